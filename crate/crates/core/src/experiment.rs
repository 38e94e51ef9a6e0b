//! Artifact layout, the training stages, decoding to files, and the three
//! report tables (main comparison, ablations, LM integration).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use gasr_tensor::{text_digest, Checkpoint, ParamStore};
use serde::{Deserialize, Serialize};

use crate::asr::{train_joint, AsrModel, EpochRow};
use crate::config::ExperimentConfig;
use crate::ctc::best_path_decode;
use crate::data::{load_split, Utterance};
use crate::error::{Error, Result};
use crate::guided::{train_guided, GuidedConfig, GuidedEpochRow, GuidedModel, LlmFeaturizer, PromptVariant, Step2Context, SAMPLE_POLICY};
use crate::llm::{pretrain_llm, read_corpus, LlmHandle, LmEpochRow, ToyLlm, GEC_INSTRUCTION};
use crate::metrics::{wer, FRAME_SHIFT_SECONDS};
use crate::search::{decode_utterance, rescore_nbest, zero_shot_gec, AttentionSource, NBest};
use crate::synth::{derive_seed, lm_corpus_path, synthesize, SynthSummary};
use crate::train::write_tsv;
use crate::vocab::Vocabulary;

/// Which Step-2 decoder: LM-fed with a prompt variant, or token-fed without the LM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Step2Variant {
    pub prompt: PromptVariant,
    pub use_llm: bool,
}

impl Step2Variant {
    pub const GUIDED: Step2Variant = Step2Variant {
        prompt: PromptVariant::Gec,
        use_llm: true,
    };
    /// B1: retrained from scratch without the LM.
    pub const NO_LLM: Step2Variant = Step2Variant {
        prompt: PromptVariant::None,
        use_llm: false,
    };
    /// B2: empty instruction and empty hypothesis.
    pub const NO_PROMPT: Step2Variant = Step2Variant {
        prompt: PromptVariant::None,
        use_llm: true,
    };
    /// B3: translation instruction.
    pub const MISMATCHED: Step2Variant = Step2Variant {
        prompt: PromptVariant::Mismatched,
        use_llm: true,
    };

    pub fn from_config(cfg: &GuidedConfig) -> Self {
        if cfg.use_llm {
            Step2Variant {
                prompt: cfg.prompt,
                use_llm: true,
            }
        } else {
            Step2Variant::NO_LLM
        }
    }

    pub fn tag(self) -> &'static str {
        if self.use_llm {
            self.prompt.as_str()
        } else {
            "no-llm"
        }
    }

    pub fn guided_config(self, base: &GuidedConfig) -> GuidedConfig {
        GuidedConfig {
            prompt: self.prompt,
            use_llm: self.use_llm,
            ..base.clone()
        }
    }
}

/// File locations under one work directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn llm_ckpt(&self) -> PathBuf {
        self.root.join("llm").join("llm.ckpt")
    }

    pub fn llm_log(&self) -> PathBuf {
        self.root.join("llm").join("train_log.tsv")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn asr_ckpt(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("asr.ckpt")
    }

    pub fn asr_log(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("asr_log.tsv")
    }

    pub fn guided_ckpt(&self, seed: u64, v: Step2Variant) -> PathBuf {
        self.seed_dir(seed).join(format!("guided-{}.ckpt", v.tag()))
    }

    pub fn guided_log(&self, seed: u64, v: Step2Variant) -> PathBuf {
        self.seed_dir(seed).join(format!("guided-{}_log.tsv", v.tag()))
    }

    pub fn decode_file(&self, seed: u64, key: &str, split: &str) -> PathBuf {
        self.seed_dir(seed).join("decode").join(format!("{key}.{split}.tsv"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report_json(&self, table: &str) -> PathBuf {
        self.reports_dir().join(format!("{table}.json"))
    }

    pub fn report_text(&self, table: &str) -> PathBuf {
        self.reports_dir().join(format!("{table}.txt"))
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn ensure_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) => ensure_dir(d),
        None => Ok(()),
    }
}

fn load_checkpoint(path: &Path, stage: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.display().to_string(),
            stage: stage.to_string(),
        });
    }
    Ok(Checkpoint::load(path)?)
}

/// One line of a decode-output file.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeRecord {
    pub id: String,
    pub text: String,
    /// Joint score of the chosen hypothesis (NaN when not applicable).
    pub score: f64,
    pub ctc: f64,
    pub aed: f64,
    /// Wall-clock decode time.
    pub seconds: f64,
}

pub const DECODE_HEADER: [&str; 6] = ["id", "text", "score", "ctc", "aed", "seconds"];

pub fn write_decode(path: &Path, records: &[DecodeRecord]) -> Result<()> {
    ensure_parent(path)?;
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.id.clone(),
                r.text.clone(),
                r.score.to_string(),
                r.ctc.to_string(),
                r.aed.to_string(),
                r.seconds.to_string(),
            ]
        })
        .collect();
    write_tsv(path, &DECODE_HEADER, &rows)
}

pub fn read_decode(path: &Path) -> Result<Vec<DecodeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(DECODE_HEADER.join("\t").as_str()) {
        return Err(Error::Parse(format!("{}: not a decode file", path.display())));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("{}: bad number `{s}`", path.display())));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::Parse(format!("{}: expected 6 fields in `{l}`", path.display())));
            }
            Ok(DecodeRecord {
                id: f[0].to_string(),
                text: f[1].to_string(),
                score: num(f[2])?,
                ctc: num(f[3])?,
                aed: num(f[4])?,
                seconds: num(f[5])?,
            })
        })
        .collect()
}

/// What produced the attention scores of a decode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum System {
    Baseline,
    Step2(Step2Variant),
}

impl System {
    fn tag(self) -> String {
        match self {
            System::Baseline => "baseline".into(),
            System::Step2(v) => format!("guided-{}", v.tag()),
        }
    }
}

/// A joint beam-search decode setting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeSpec {
    pub system: System,
    pub beam: usize,
    pub xi: f64,
    /// Shallow-fusion weight.
    pub fusion: Option<f64>,
}

impl DecodeSpec {
    pub fn key(&self) -> String {
        let mut k = format!("{}-b{}-xi{}", self.system.tag(), self.beam, self.xi);
        if let Some(b) = self.fusion {
            write!(k, "-fusion{b}").expect("string write");
        }
        k
    }
}

/// Records plus N-best lists of one decoded split.
#[derive(Clone, Debug)]
pub struct DecodeRun {
    pub records: Vec<DecodeRecord>,
    pub nbests: Vec<NBest>,
}

/// Training stages and loading for one work directory.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pub vocab: Vocabulary,
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Workspace {
            cfg,
            layout: Layout::new(root),
            vocab: Vocabulary::default(),
        })
    }

    pub fn synth_data(&self, seed: u64) -> Result<SynthSummary> {
        let mut cfg = self.cfg.synth.clone();
        cfg.seed = seed;
        synthesize(&cfg, &self.layout.data_dir())
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<Utterance>> {
        load_split(&self.layout.data_dir(), split, &self.vocab)
    }

    pub fn pretrain_llm(&self, seed: u64, mut on_epoch: impl FnMut(&LmEpochRow)) -> Result<Vec<LmEpochRow>> {
        let dir = self.layout.data_dir();
        let train = read_corpus(&lm_corpus_path(&dir, false), &self.vocab)?;
        let heldout = read_corpus(&lm_corpus_path(&dir, true), &self.vocab)?;
        let mut store = ParamStore::new();
        let model = ToyLlm::new(&self.cfg.llm, &self.vocab, &mut store, derive_seed(seed, "llm-init"))?;
        let rows = pretrain_llm(&model, &mut store, &train, &heldout, &self.cfg.llm_train, seed, &mut on_epoch)?;
        let path = self.layout.llm_ckpt();
        ensure_parent(&path)?;
        Checkpoint::from_store(&store)
            .with_meta("seed", seed.to_string())
            .with_meta("config", serde_json::to_string(&(&self.cfg.llm, &self.cfg.llm_train)).expect("serialize"))
            .save(&path)?;
        write_tsv(&self.layout.llm_log(), &LmEpochRow::HEADER, &rows.iter().map(|r| r.cells()).collect::<Vec<_>>())?;
        Ok(rows)
    }

    pub fn load_llm(&self) -> Result<(LlmHandle, String)> {
        let ckpt = load_checkpoint(&self.layout.llm_ckpt(), "pretrain-llm")?;
        let mut store = ParamStore::new();
        let model = ToyLlm::new(&self.cfg.llm, &self.vocab, &mut store, 0)?;
        ckpt.load_into(&mut store).map_err(|e| Error::Config(format!("LM checkpoint does not match the configuration: {e}")))?;
        store.freeze_all();
        Ok((
            LlmHandle {
                model: Arc::new(model),
                store: Arc::new(store),
            },
            ckpt.digest()?,
        ))
    }

    pub fn train_asr(&self, seed: u64, mut on_epoch: impl FnMut(&EpochRow)) -> Result<Vec<EpochRow>> {
        let train = self.load_split("train")?;
        let dev = self.load_split("dev")?;
        let mut store = ParamStore::new();
        let model = AsrModel::new(&self.cfg.asr, &self.vocab, &mut store, derive_seed(seed, "asr-init"))?;
        let rows = train_joint(&model, &mut store, &train, &dev, &self.cfg.asr_train, seed, &mut on_epoch)?;
        let path = self.layout.asr_ckpt(seed);
        ensure_parent(&path)?;
        Checkpoint::from_store(&store)
            .with_meta("seed", seed.to_string())
            .with_meta("config", serde_json::to_string(&(&self.cfg.asr, &self.cfg.asr_train)).expect("serialize"))
            .save(&path)?;
        write_tsv(&self.layout.asr_log(seed), &EpochRow::HEADER, &rows.iter().map(|r| r.cells()).collect::<Vec<_>>())?;
        Ok(rows)
    }

    /// Frozen Step-1 model and its checkpoint digest.
    pub fn load_asr(&self, seed: u64) -> Result<(AsrModel, ParamStore<f32>, String)> {
        let ckpt = load_checkpoint(&self.layout.asr_ckpt(seed), &format!("train-asr --seed {seed}"))?;
        let mut store = ParamStore::new();
        let model = AsrModel::new(&self.cfg.asr, &self.vocab, &mut store, 0)?;
        ckpt.load_into(&mut store).map_err(|e| Error::Config(format!("ASR checkpoint does not match the configuration: {e}")))?;
        store.freeze_all();
        Ok((model, store, ckpt.digest()?))
    }

    /// Step 2 for several variants sharing the frozen Step-1 outputs and the
    /// hypothesis samples.
    pub fn train_guided(
        &self,
        seed: u64,
        variants: &[Step2Variant],
        mut on_epoch: impl FnMut(Step2Variant, &GuidedEpochRow),
    ) -> Result<Vec<Vec<GuidedEpochRow>>> {
        let (asr, asr_store, asr_digest) = self.load_asr(seed)?;
        let llm = if variants.iter().any(|v| v.use_llm) { Some(self.load_llm()?) } else { None };
        let train = self.load_split("train")?;
        let dev = self.load_split("dev")?;
        let mut ctx = Step2Context::new(&asr, &asr_store, &train, &dev, seed)?;
        let mut out = Vec::new();
        for &v in variants {
            let gcfg = v.guided_config(&self.cfg.guided);
            let handle = if v.use_llm { llm.as_ref().map(|l| &l.0) } else { None };
            let llm_dim = handle.map_or(0, |h| h.model.dim());
            let mut store = ParamStore::new();
            let model = GuidedModel::new(&gcfg, &self.vocab, llm_dim, &mut store, derive_seed(seed, "guided-init"))?;
            let rows = train_guided(&model, &mut store, handle, &mut ctx, &self.cfg.guided_train, |r| on_epoch(v, r))?;
            let path = self.layout.guided_ckpt(seed, v);
            ensure_parent(&path)?;
            let llm_digest = match (&llm, v.use_llm) {
                (Some((_, d)), true) => d.clone(),
                _ => "none".into(),
            };
            Checkpoint::from_store(&store)
                .with_meta("seed", seed.to_string())
                .with_meta("variant", v.tag())
                .with_meta("step1", asr_digest.clone())
                .with_meta("llm", llm_digest)
                .with_meta("prompt", text_digest(gcfg.prompt.instruction()))
                .with_meta("samples", SAMPLE_POLICY)
                .with_meta("trainable", store.num_values().to_string())
                .with_meta("config", serde_json::to_string(&(&gcfg, &self.cfg.guided_train)).expect("serialize"))
                .save(&path)?;
            write_tsv(&self.layout.guided_log(seed, v), &GuidedEpochRow::HEADER, &rows.iter().map(|r| r.cells()).collect::<Vec<_>>())?;
            out.push(rows);
        }
        Ok(out)
    }

    /// A Step-2 model whose header matches the current Step-1 and LM checkpoints.
    pub fn load_guided(&self, seed: u64, v: Step2Variant, asr_digest: &str, llm_digest: Option<&str>) -> Result<(GuidedModel, ParamStore<f32>)> {
        let stage = if v == Step2Variant::from_config(&self.cfg.guided) {
            format!("train-guided --seed {seed}")
        } else {
            "ablate".to_string()
        };
        let ckpt = load_checkpoint(&self.layout.guided_ckpt(seed, v), &stage)?;
        if ckpt.meta.get("step1").map(String::as_str) != Some(asr_digest) {
            return Err(Error::Invariant(format!("guided checkpoint for seed {seed} was trained on another Step-1 checkpoint")));
        }
        if let (true, Some(d)) = (v.use_llm, llm_digest) {
            if ckpt.meta.get("llm").map(String::as_str) != Some(d) {
                return Err(Error::Invariant(format!("guided checkpoint for seed {seed} was trained with another LM")));
            }
        }
        let gcfg = v.guided_config(&self.cfg.guided);
        let llm_dim = if v.use_llm { self.cfg.llm.block.dim } else { 0 };
        let mut store = ParamStore::new();
        let model = GuidedModel::new(&gcfg, &self.vocab, llm_dim, &mut store, 0)?;
        ckpt.load_into(&mut store).map_err(|e| Error::Config(format!("guided checkpoint does not match the configuration: {e}")))?;
        Ok((model, store))
    }
}

/// Everything loaded for decoding with one seed.
pub struct SeedRunner<'w> {
    ws: &'w Workspace,
    pub seed: u64,
    asr: AsrModel,
    asr_store: ParamStore<f32>,
    asr_digest: String,
    llm: Option<(LlmHandle, String)>,
    guided: HashMap<Step2Variant, (GuidedModel, ParamStore<f32>, Option<LlmFeaturizer>)>,
    splits: HashMap<String, Vec<Utterance>>,
    memo: HashMap<(String, String), DecodeRun>,
}

impl<'w> SeedRunner<'w> {
    pub fn new(ws: &'w Workspace, seed: u64) -> Result<Self> {
        let (asr, asr_store, asr_digest) = ws.load_asr(seed)?;
        Ok(SeedRunner {
            ws,
            seed,
            asr,
            asr_store,
            asr_digest,
            llm: None,
            guided: HashMap::new(),
            splits: HashMap::new(),
            memo: HashMap::new(),
        })
    }

    fn llm(&mut self) -> Result<LlmHandle> {
        if self.llm.is_none() {
            self.llm = Some(self.ws.load_llm()?);
        }
        Ok(self.llm.as_ref().expect("loaded").0.clone())
    }

    fn split(&mut self, split: &str) -> Result<&[Utterance]> {
        if !self.splits.contains_key(split) {
            let utts = self.ws.load_split(split)?;
            self.splits.insert(split.to_string(), utts);
        }
        Ok(&self.splits[split])
    }

    fn ensure_guided(&mut self, v: Step2Variant) -> Result<()> {
        if self.guided.contains_key(&v) {
            return Ok(());
        }
        let llm = if v.use_llm { Some(self.llm()?) } else { None };
        let llm_digest = self.llm.as_ref().map(|l| l.1.clone());
        let (model, store) = self.ws.load_guided(self.seed, v, &self.asr_digest, llm_digest.as_deref())?;
        let feat = match llm {
            Some(h) => Some(LlmFeaturizer::new(h, v.prompt)?),
            None => None,
        };
        self.guided.insert(v, (model, store, feat));
        Ok(())
    }

    pub fn references(&mut self, split: &str) -> Result<Vec<String>> {
        Ok(self.split(split)?.iter().map(|u| u.transcript.clone()).collect())
    }

    /// Joint beam search over a split; memoized and written to the decode file.
    pub fn decode(&mut self, spec: DecodeSpec, split: &str) -> Result<&DecodeRun> {
        let key = (spec.key(), split.to_string());
        if !self.memo.contains_key(&key) {
            self.split(split)?;
            if let System::Step2(v) = spec.system {
                self.ensure_guided(v)?;
            }
            let fusion = match spec.fusion {
                Some(w) => Some((self.llm()?, w)),
                None => None,
            };
            let utts = &self.splits[split];
            let source = match spec.system {
                System::Baseline => AttentionSource::Baseline,
                System::Step2(v) => {
                    let (m, s, f) = &self.guided[&v];
                    AttentionSource::Guided {
                        model: m,
                        store: s,
                        featurizer: f.as_ref(),
                    }
                }
            };
            let mut run = DecodeRun {
                records: Vec::with_capacity(utts.len()),
                nbests: Vec::with_capacity(utts.len()),
            };
            for u in utts {
                let t = Instant::now();
                let d = decode_utterance(
                    &self.asr,
                    &self.asr_store,
                    &source,
                    &u.features,
                    spec.beam,
                    spec.xi,
                    fusion.as_ref().map(|(h, w)| (h, *w)),
                )?;
                let seconds = t.elapsed().as_secs_f64();
                let best = d.nbest.best();
                run.records.push(DecodeRecord {
                    id: u.id.clone(),
                    text: self.ws.vocab.decode(&best.tokens),
                    score: best.score,
                    ctc: best.ctc,
                    aed: best.aed,
                    seconds,
                });
                run.nbests.push(d.nbest);
            }
            write_decode(&self.ws.layout.decode_file(self.seed, &key.0, split), &run.records)?;
            log::info!("seed {} decoded {} {}", self.seed, key.0, split);
            self.memo.insert(key.clone(), run);
        }
        Ok(&self.memo[&key])
    }

    /// Rescore the N-best lists of `spec` with weight `gamma`.
    pub fn rescore(&mut self, spec: DecodeSpec, split: &str, gamma: f64) -> Result<Vec<DecodeRecord>> {
        let llm = self.llm()?;
        let run = self.decode(spec, split)?.clone();
        let mut out = Vec::with_capacity(run.records.len());
        for (r, nb) in run.records.iter().zip(&run.nbests) {
            let t = Instant::now();
            let i = rescore_nbest(nb, &llm, gamma)?;
            let e = &nb.entries[i];
            out.push(DecodeRecord {
                id: r.id.clone(),
                text: self.ws.vocab.decode(&e.tokens),
                score: e.score,
                ctc: e.ctc,
                aed: e.aed,
                seconds: r.seconds + t.elapsed().as_secs_f64(),
            });
        }
        let key = format!("{}-rescore{gamma}", spec.key());
        write_decode(&self.ws.layout.decode_file(self.seed, &key, split), &out)?;
        Ok(out)
    }

    /// The LM's greedy correction of the eval-mode best-path hypothesis.
    pub fn zero_shot(&mut self, split: &str) -> Result<Vec<DecodeRecord>> {
        let llm = self.llm()?;
        let max_len = self.ws.cfg.decode.max_response;
        self.split(split)?;
        let mut out = Vec::new();
        let mut truncated = 0;
        for u in &self.splits[split] {
            let t = Instant::now();
            let lp = self.asr.ctc_emissions(&self.asr_store, &u.features)?;
            let hyp = best_path_decode(&lp);
            let (resp, cut) = zero_shot_gec(&llm, GEC_INSTRUCTION, &hyp, max_len)?;
            truncated += usize::from(cut);
            out.push(DecodeRecord {
                id: u.id.clone(),
                text: self.ws.vocab.decode(&resp),
                score: f64::NAN,
                ctc: f64::NAN,
                aed: f64::NAN,
                seconds: t.elapsed().as_secs_f64(),
            });
        }
        if truncated > 0 {
            log::warn!("seed {}: {truncated} zero-shot responses hit the length limit", self.seed);
        }
        write_decode(&self.ws.layout.decode_file(self.seed, "zero-shot-gec", split), &out)?;
        Ok(out)
    }

    /// Frames of each utterance of a split.
    fn frames(&mut self, split: &str) -> Result<Vec<usize>> {
        Ok(self.split(split)?.iter().map(|u| u.frames()).collect())
    }
}

/// One report line, aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub model: String,
    pub beam: Option<usize>,
    pub xi: Option<f64>,
    /// Fusion or rescoring weight.
    pub weight: Option<f64>,
    /// Mean over seeds.
    pub dev_wer: f64,
    pub test_wer: f64,
    pub dev_wer_by_seed: Vec<f64>,
    pub test_wer_by_seed: Vec<f64>,
    /// Total decode seconds over total virtual audio seconds on test.
    pub test_rtf: f64,
    /// Dev averages of the chosen hypotheses' score parts.
    pub mean_score: Option<f64>,
    pub mean_ctc: Option<f64>,
    pub mean_aed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub name: String,
    pub title: String,
    pub seeds: Vec<u64>,
    pub frame_shift_seconds: f64,
    pub rows: Vec<ReportRow>,
    pub notes: Vec<String>,
}

impl ReportTable {
    pub fn row(&self, id: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Aligned plain-text rendering (WER in percent).
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let header = ["ID", "Model", "B", "xi", "weight", "Dev WER", "Test WER", "Test RTF", "score", "ctc", "aed"];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            cells.push(vec![
                r.id.clone(),
                r.model.clone(),
                r.beam.map_or("-".into(), |b| b.to_string()),
                opt(r.xi, 1),
                opt(r.weight, 1),
                format!("{:.2}", 100.0 * r.dev_wer),
                format!("{:.2}", 100.0 * r.test_wer),
                format!("{:.4}", r.test_rtf),
                opt(r.mean_score, 3),
                opt(r.mean_ctc, 3),
                opt(r.mean_aed, 3),
            ]);
        }
        let widths: Vec<usize> = (0..header.len()).map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = format!("{}\nseeds: {:?}; WER in %; RTF uses a {} s virtual frame shift\n", self.title, self.seeds, self.frame_shift_seconds);
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    let pad = widths[c] - s.chars().count();
                    if c <= 1 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }

    pub fn save(&self, layout: &Layout) -> Result<()> {
        ensure_dir(&layout.reports_dir())?;
        let j = layout.report_json(&self.name);
        fs::write(&j, self.to_json()).map_err(|e| Error::io(&j, e))?;
        let t = layout.report_text(&self.name);
        fs::write(&t, self.to_text()).map_err(|e| Error::io(&t, e))
    }

    pub fn load(layout: &Layout, name: &str) -> Result<Self> {
        let p = layout.report_json(name);
        let text = fs::read_to_string(&p).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    path: p.display().to_string(),
                    stage: stage_of_table(name).into(),
                }
            } else {
                Error::io(&p, e)
            }
        })?;
        Self::from_json(&text)
    }
}

pub const MAIN_TABLE: &str = "main";
pub const ABLATION_TABLE: &str = "ablations";
pub const LM_TABLE: &str = "lm-integration";
pub const TABLES: [&str; 3] = [MAIN_TABLE, ABLATION_TABLE, LM_TABLE];

fn stage_of_table(name: &str) -> &'static str {
    match name {
        MAIN_TABLE => "eval",
        ABLATION_TABLE => "ablate",
        _ => "lm-integration",
    }
}

/// Per-seed dev and test records of one row.
struct RowRuns {
    dev: Vec<Vec<DecodeRecord>>,
    test: Vec<Vec<DecodeRecord>>,
}

fn finite_mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = vals.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn record_wer(refs: &[String], recs: &[DecodeRecord]) -> Result<f64> {
    let hyps: Vec<&str> = recs.iter().map(|r| r.text.as_str()).collect();
    wer(refs, &hyps)
}

/// Drives the per-seed runners and assembles tables.
pub struct Harness<'w> {
    pub ws: &'w Workspace,
    pub runners: Vec<SeedRunner<'w>>,
}

impl<'w> Harness<'w> {
    pub fn new(ws: &'w Workspace) -> Result<Self> {
        let runners = ws.cfg.seeds.iter().map(|&s| SeedRunner::new(ws, s)).collect::<Result<_>>()?;
        Ok(Harness { ws, runners })
    }

    fn seeds(&self) -> Vec<u64> {
        self.runners.iter().map(|r| r.seed).collect()
    }

    fn table(&self, name: &str, title: &str, rows: Vec<ReportRow>, notes: Vec<String>) -> ReportTable {
        ReportTable {
            name: name.into(),
            title: title.into(),
            seeds: self.seeds(),
            frame_shift_seconds: FRAME_SHIFT_SECONDS,
            rows,
            notes,
        }
    }

    fn collect(&mut self, mut f: impl FnMut(&mut SeedRunner<'w>, &str) -> Result<Vec<DecodeRecord>>) -> Result<RowRuns> {
        let mut runs = RowRuns { dev: Vec::new(), test: Vec::new() };
        for r in self.runners.iter_mut() {
            runs.dev.push(f(r, "dev")?);
            runs.test.push(f(r, "test")?);
        }
        Ok(runs)
    }

    fn dev_only(&mut self, mut f: impl FnMut(&mut SeedRunner<'w>, &str) -> Result<Vec<DecodeRecord>>) -> Result<Vec<Vec<DecodeRecord>>> {
        self.runners.iter_mut().map(|r| f(r, "dev")).collect()
    }

    fn mean_dev_wer(&mut self, dev: &[Vec<DecodeRecord>]) -> Result<f64> {
        let mut w = Vec::new();
        for (r, recs) in self.runners.iter_mut().zip(dev) {
            w.push(record_wer(&r.references("dev")?, recs)?);
        }
        Ok(mean(&w))
    }

    fn summarize(&mut self, id: &str, model: &str, beam: Option<usize>, xi: Option<f64>, weight: Option<f64>, runs: &RowRuns) -> Result<ReportRow> {
        let (mut dw, mut tw, mut rtfs) = (Vec::new(), Vec::new(), Vec::new());
        for (i, r) in self.runners.iter_mut().enumerate() {
            dw.push(record_wer(&r.references("dev")?, &runs.dev[i])?);
            tw.push(record_wer(&r.references("test")?, &runs.test[i])?);
            let frames: usize = r.frames("test")?.iter().sum();
            let secs: f64 = runs.test[i].iter().map(|x| x.seconds).sum();
            rtfs.push(secs / (frames as f64 * FRAME_SHIFT_SECONDS));
        }
        let dev_all = || runs.dev.iter().flatten();
        Ok(ReportRow {
            id: id.into(),
            model: model.into(),
            beam,
            xi,
            weight,
            dev_wer: mean(&dw),
            test_wer: mean(&tw),
            dev_wer_by_seed: dw,
            test_wer_by_seed: tw,
            test_rtf: mean(&rtfs),
            mean_score: finite_mean(dev_all().map(|r| r.score)),
            mean_ctc: finite_mean(dev_all().map(|r| r.ctc)),
            mean_aed: finite_mean(dev_all().map(|r| r.aed)),
        })
    }

    fn beam_row(&mut self, id: &str, model: &str, spec: DecodeSpec) -> Result<ReportRow> {
        let runs = self.collect(|r, split| Ok(r.decode(spec, split)?.records.clone()))?;
        self.summarize(id, model, Some(spec.beam), Some(spec.xi), spec.fusion, &runs)
    }

    fn guided_variant(&self) -> Step2Variant {
        Step2Variant::from_config(&self.ws.cfg.guided)
    }

    /// A0-A4: CTC-weighted baseline, baseline and guided decoders at both beams.
    pub fn main_table(&mut self) -> Result<ReportTable> {
        let d = self.ws.cfg.decode.clone();
        let g = System::Step2(self.guided_variant());
        let spec = |system, beam, xi| DecodeSpec { system, beam, xi, fusion: None };
        let rows = vec![
            self.beam_row("A0", "joint CTC/attention", spec(System::Baseline, d.beam, 1.0))?,
            self.beam_row("A1", "joint CTC/attention", spec(System::Baseline, d.beam, d.xi))?,
            self.beam_row("A2", "+ LLM-guided decoder", spec(g, d.beam, d.xi))?,
            self.beam_row("A3", "joint CTC/attention", spec(System::Baseline, d.large_beam, d.xi))?,
            self.beam_row("A4", "+ LLM-guided decoder", spec(g, d.large_beam, d.xi))?,
        ];
        Ok(self.table(MAIN_TABLE, "Guided decoder vs joint CTC/attention baselines", rows, Vec::new()))
    }

    /// Guided decoder against B1 (no LM), B2 (no prompt) and B3 (mismatched
    /// instruction), at both beams. Missing ablation checkpoints are trained.
    pub fn ablation_table(&mut self) -> Result<ReportTable> {
        let variants = [Step2Variant::NO_LLM, Step2Variant::NO_PROMPT, Step2Variant::MISMATCHED];
        for r in &self.runners {
            let missing: Vec<Step2Variant> = variants.iter().copied().filter(|v| !self.ws.layout.guided_ckpt(r.seed, *v).exists()).collect();
            if !missing.is_empty() {
                self.ws.train_guided(r.seed, &missing, |v, row| log::info!("seed {} {}: {:?}", r.seed, v.tag(), row))?;
            }
        }
        let d = self.ws.cfg.decode.clone();
        let mut rows = Vec::new();
        for beam in [d.beam, d.large_beam] {
            let spec = |v| DecodeSpec {
                system: System::Step2(v),
                beam,
                xi: d.xi,
                fusion: None,
            };
            rows.push(self.beam_row(if beam == d.beam { "A2" } else { "A4" }, "LLM-guided decoder", spec(self.guided_variant()))?);
            rows.push(self.beam_row("B1", "w/o LLM", spec(Step2Variant::NO_LLM))?);
            rows.push(self.beam_row("B2", "w/o prompt", spec(Step2Variant::NO_PROMPT))?);
            rows.push(self.beam_row("B3", "w/ mismatched task instruction", spec(Step2Variant::MISMATCHED))?);
        }
        Ok(self.table(ABLATION_TABLE, "Ablations of the guided decoder", rows, Vec::new()))
    }

    /// Best weight on dev (lowest mean WER, first on ties) over the grid.
    fn sweep(&mut self, mut dev_at: impl FnMut(&mut Self, f64) -> Result<Vec<Vec<DecodeRecord>>>) -> Result<(f64, Vec<(f64, f64)>)> {
        let mut results = Vec::new();
        for &w in &self.ws.cfg.decode.weight_grid.clone() {
            let dev = dev_at(self, w)?;
            results.push((w, self.mean_dev_wer(&dev)?));
        }
        let best = results.iter().fold(results[0], |b, &x| if x.1 < b.1 { x } else { b });
        Ok((best.0, results))
    }

    /// Baseline with shallow fusion, rescoring and zero-shot correction, and
    /// the guided decoder with and without rescoring, all at the large beam.
    pub fn lm_table(&mut self) -> Result<ReportTable> {
        let d = self.ws.cfg.decode.clone();
        let base = DecodeSpec {
            system: System::Baseline,
            beam: d.large_beam,
            xi: d.xi,
            fusion: None,
        };
        let guided = DecodeSpec {
            system: System::Step2(self.guided_variant()),
            ..base
        };
        let fmt_sweep = |name: &str, res: &[(f64, f64)], best: f64| {
            let parts: Vec<String> = res.iter().map(|(w, e)| format!("{w}: {:.2}%", 100.0 * e)).collect();
            format!("{name} sweep (mean dev WER): {}; chosen {best}", parts.join(", "))
        };
        let mut rows = Vec::new();
        let mut notes = Vec::new();
        rows.push(self.beam_row("A3", "joint CTC/attention", base)?);

        let (beta, res) = self.sweep(|h, w| h.dev_only(|r, s| Ok(r.decode(DecodeSpec { fusion: Some(w), ..base }, s)?.records.clone())))?;
        notes.push(fmt_sweep("fusion weight", &res, beta));
        rows.push(self.beam_row("fusion", "+ shallow fusion", DecodeSpec { fusion: Some(beta), ..base })?);

        let (gamma, res) = self.sweep(|h, w| h.dev_only(|r, s| r.rescore(base, s, w)))?;
        notes.push(fmt_sweep("rescoring weight (baseline)", &res, gamma));
        let runs = self.collect(|r, s| r.rescore(base, s, gamma))?;
        rows.push(self.summarize("rescoring", "+ rescoring", Some(base.beam), Some(base.xi), Some(gamma), &runs)?);

        let runs = self.collect(|r, s| r.zero_shot(s))?;
        rows.push(self.summarize("zero-shot", "+ zero-shot GEC", None, None, None, &runs)?);

        rows.push(self.beam_row("A4", "+ LLM-guided decoder", guided)?);
        let (gamma, res) = self.sweep(|h, w| h.dev_only(|r, s| r.rescore(guided, s, w)))?;
        notes.push(fmt_sweep("rescoring weight (guided)", &res, gamma));
        let runs = self.collect(|r, s| r.rescore(guided, s, gamma))?;
        rows.push(self.summarize("guided+rescoring", "++ rescoring", Some(guided.beam), Some(guided.xi), Some(gamma), &runs)?);
        Ok(self.table(LM_TABLE, "LM integration methods", rows, notes))
    }
}

/// Render every saved table into one text report.
pub fn combined_report(layout: &Layout) -> Result<String> {
    let mut out = String::new();
    let mut found = 0;
    for name in TABLES {
        match ReportTable::load(layout, name) {
            Ok(t) => {
                out.push_str(&t.to_text());
                out.push('\n');
                found += 1;
            }
            Err(Error::MissingArtifact { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if found == 0 {
        return Err(Error::MissingArtifact {
            path: layout.reports_dir().display().to_string(),
            stage: "eval".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x").join("d.tsv");
        let recs = vec![
            DecodeRecord {
                id: "dev-00000".into(),
                text: "ab cd".into(),
                score: -1.25,
                ctc: f64::NEG_INFINITY,
                aed: -0.1,
                seconds: 0.5,
            },
            DecodeRecord {
                id: "dev-00001".into(),
                text: String::new(),
                score: f64::NAN,
                ctc: f64::NAN,
                aed: f64::NAN,
                seconds: 1e-3,
            },
        ];
        write_decode(&p, &recs).unwrap();
        let back = read_decode(&p).unwrap();
        assert_eq!(back[0], recs[0]);
        assert_eq!(back[1].text, "");
        assert!(back[1].score.is_nan());
    }

    #[test]
    fn variant_tags_are_distinct() {
        let tags: std::collections::BTreeSet<_> = [Step2Variant::GUIDED, Step2Variant::NO_LLM, Step2Variant::NO_PROMPT, Step2Variant::MISMATCHED]
            .iter()
            .map(|v| v.tag())
            .collect();
        assert_eq!(tags.len(), 4);
        assert_eq!(Step2Variant::from_config(&GuidedConfig::default()), Step2Variant::GUIDED);
    }

    #[test]
    fn text_table_aligns_columns() {
        let row = ReportRow {
            id: "A1".into(),
            model: "m".into(),
            beam: Some(1),
            xi: Some(0.3),
            weight: None,
            dev_wer: 0.1,
            test_wer: 0.2,
            dev_wer_by_seed: vec![0.1],
            test_wer_by_seed: vec![0.2],
            test_rtf: 0.01,
            mean_score: None,
            mean_ctc: Some(-1.0),
            mean_aed: Some(-2.0),
        };
        let t = ReportTable {
            name: "main".into(),
            title: "t".into(),
            seeds: vec![1],
            frame_shift_seconds: 0.01,
            rows: vec![row],
            notes: vec![],
        };
        let text = t.to_text();
        assert!(text.contains("10.00"));
        assert_eq!(ReportTable::from_json(&t.to_json()).unwrap(), t);
    }
}
