use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gasr_core::config::ExperimentConfig;
use gasr_core::experiment::{combined_report, DecodeSpec, Harness, ReportTable, SeedRunner, Step2Variant, System, Workspace};
use gasr_core::guided::{DecoderVariant, PromptVariant};
use gasr_core::metrics::wer;
use gasr_core::Error;

/// Guided joint CTC/attention ASR on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "gasr", version)]
struct Cli {
    /// Work directory holding data, checkpoints, decodes and reports.
    #[arg(long, global = true, default_value = "work")]
    work: PathBuf,
    /// TOML config layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config value, e.g. `--set decode.xi=0.5` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct SeedArg {
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug, Default)]
struct DecodeFlags {
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    large_beam: Option<usize>,
    /// CTC weight.
    #[arg(long)]
    xi: Option<f64>,
    /// Comma-separated seeds (default: `seeds` from the config).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus, features and LM text.
    SynthData(SeedArg),
    /// Pretrain the toy instruction-following LM.
    PretrainLlm(SeedArg),
    /// Step 1: joint CTC/attention training.
    TrainAsr(SeedArg),
    /// Step 2: train the guided decoder against the frozen Step-1 model and LM.
    TrainGuided {
        #[command(flatten)]
        seed: SeedArg,
        /// Prompt variant (default: `guided.prompt`).
        #[arg(long)]
        prompt: Option<PromptVariant>,
        /// Train without the LM (the B1 ablation).
        #[arg(long)]
        no_llm: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode one split with one system and print its WER.
    Decode {
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long)]
        decoder: Option<DecoderVariant>,
        #[arg(long)]
        prompt: Option<PromptVariant>,
        /// Shallow-fusion weight.
        #[arg(long)]
        fusion: Option<f64>,
        #[command(flatten)]
        flags: DecodeFlags,
    },
    /// Main comparison table (A0-A4).
    Eval(DecodeFlags),
    /// Ablation table (B1-B3); trains missing ablation decoders.
    Ablate(DecodeFlags),
    /// LM integration table with fusion and rescoring weight sweeps.
    LmIntegration(DecodeFlags),
    /// Print the saved tables.
    Report,
}

fn push(o: &mut Vec<String>, key: &str, v: Option<impl ToString>) {
    if let Some(v) = v {
        o.push(format!("{key}={}", v.to_string()));
    }
}

fn decode_overrides(o: &mut Vec<String>, f: &DecodeFlags) {
    push(o, "decode.beam", f.beam);
    push(o, "decode.large_beam", f.large_beam);
    push(o, "decode.xi", f.xi);
    if !f.seeds.is_empty() {
        let list: Vec<String> = f.seeds.iter().map(u64::to_string).collect();
        o.push(format!("seeds=[{}]", list.join(",")));
    }
}

fn workspace(cli: &Cli) -> Result<Workspace> {
    let mut o = cli.overrides.clone();
    match &cli.cmd {
        Command::TrainGuided { prompt, no_llm, epochs, .. } => {
            push(&mut o, "guided.prompt", prompt.map(|p| format!("\"{p}\"")));
            if *no_llm {
                o.push("guided.use_llm=false".into());
            }
            push(&mut o, "guided_train.epochs", *epochs);
        }
        Command::Decode {
            decoder,
            prompt,
            fusion,
            flags,
            ..
        } => {
            decode_overrides(&mut o, flags);
            push(&mut o, "decode.decoder", decoder.map(|d| format!("\"{d}\"")));
            push(&mut o, "decode.prompt", prompt.map(|p| format!("\"{p}\"")));
            push(&mut o, "decode.fusion_weight", *fusion);
        }
        Command::Eval(f) | Command::Ablate(f) | Command::LmIntegration(f) => decode_overrides(&mut o, f),
        _ => {}
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &o)?;
    Ok(Workspace::new(cfg, &cli.work)?)
}

fn save_and_print(ws: &Workspace, table: ReportTable) -> Result<()> {
    table.save(&ws.layout)?;
    print!("{}", table.to_text());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let ws = workspace(cli)?;
    match &cli.cmd {
        Command::SynthData(s) => {
            let summary = ws.synth_data(s.seed)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::PretrainLlm(s) => {
            ws.pretrain_llm(s.seed, |r| log::info!("{r:?}"))?;
            println!("wrote {}", ws.layout.llm_ckpt().display());
        }
        Command::TrainAsr(s) => {
            ws.train_asr(s.seed, |r| log::info!("{r:?}"))?;
            println!("wrote {}", ws.layout.asr_ckpt(s.seed).display());
        }
        Command::TrainGuided { seed, .. } => {
            let v = Step2Variant::from_config(&ws.cfg.guided);
            ws.train_guided(seed.seed, &[v], |v, r| log::info!("{}: {r:?}", v.tag()))?;
            println!("wrote {}", ws.layout.guided_ckpt(seed.seed, v).display());
        }
        Command::Decode { split, .. } => {
            let d = &ws.cfg.decode;
            let system = match d.decoder {
                DecoderVariant::Baseline => System::Baseline,
                DecoderVariant::Guided => System::Step2(Step2Variant {
                    prompt: d.prompt,
                    use_llm: true,
                }),
                DecoderVariant::GuidedNoLlm => System::Step2(Step2Variant::NO_LLM),
            };
            let spec = DecodeSpec {
                system,
                beam: d.beam,
                xi: d.xi,
                fusion: (d.fusion_weight > 0.0).then_some(d.fusion_weight),
            };
            for &seed in &ws.cfg.seeds {
                let mut r = SeedRunner::new(&ws, seed)?;
                let refs = r.references(split)?;
                let hyps: Vec<String> = r.decode(spec, split)?.records.iter().map(|x| x.text.clone()).collect();
                println!(
                    "seed {seed} {} {split}: WER {:.2}% ({})",
                    spec.key(),
                    100.0 * wer(&refs, &hyps)?,
                    ws.layout.decode_file(seed, &spec.key(), split).display()
                );
            }
        }
        Command::Eval(_) => save_and_print(&ws, Harness::new(&ws)?.main_table()?)?,
        Command::Ablate(_) => save_and_print(&ws, Harness::new(&ws)?.ablation_table()?)?,
        Command::LmIntegration(_) => save_and_print(&ws, Harness::new(&ws)?.lm_table()?)?,
        Command::Report => print!("{}", combined_report(&ws.layout)?),
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::MissingArtifact { .. }) => 3,
        Some(Error::Invariant(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli).with_context(|| format!("gasr {}", std::env::args().skip(1).collect::<Vec<_>>().join(" "))) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
