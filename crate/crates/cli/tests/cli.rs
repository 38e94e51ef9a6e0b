use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [1]

[synth]
lexicon_size = 20
train = 24
dev = 6
test = 6
lm_sequences = 60
lm_heldout = 6

[asr.encoder]
dim = 16
ff_dim = 32
layers = 1

[asr.decoder]
dim = 16
ff_dim = 32
layers = 1

[llm.block]
dim = 16
ff_dim = 32
layers = 1

[guided.decoder]
dim = 16
ff_dim = 32
layers = 1

[asr_train]
epochs = 1
batch_size = 8
warmup_steps = 2

[llm_train]
epochs = 1
batch_size = 16
warmup_steps = 2

[guided_train]
epochs = 1
batch_size = 8
warmup_steps = 2

[decode]
large_beam = 2
weight_grid = [0.3]
max_response = 40
"#;

struct Lab {
    _dir: tempfile::TempDir,
    work: PathBuf,
    config: PathBuf,
}

impl Lab {
    fn new() -> Lab {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Lab {
            work: dir.path().join("work"),
            config,
            _dir: dir,
        }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_gasr"))
            .arg("--work")
            .arg(&self.work)
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn pipeline(&self) {
        self.ok(&["synth-data", "--seed", "7"]);
        self.ok(&["pretrain-llm", "--seed", "7"]);
        self.ok(&["train-asr", "--seed", "1"]);
        self.ok(&["train-guided", "--seed", "1"]);
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Every file under `dir`, relative path to bytes, with the per-utterance
/// timing column of decode files and timing cells of reports dropped.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            let bytes = fs::read(&p).unwrap();
            let bytes = if rel.ends_with(".tsv") && rel.contains("decode") {
                String::from_utf8(bytes)
                    .unwrap()
                    .lines()
                    .map(|l| l.rsplit_once('\t').map_or(l, |(head, _)| head).to_string())
                    .collect::<Vec<_>>()
                    .join("\n")
                    .into_bytes()
            } else if rel.starts_with("reports") {
                continue;
            } else {
                bytes
            };
            out.push((rel, bytes));
        }
    }
    out.sort();
    out
}

#[test]
fn seed_is_required_for_training_and_synthesis() {
    let lab = Lab::new();
    for cmd in ["synth-data", "pretrain-llm", "train-asr", "train-guided"] {
        assert_eq!(code(&lab.run(&[cmd])), 2, "{cmd}");
    }
}

#[test]
fn bad_configuration_exits_with_two() {
    let lab = Lab::new();
    assert_eq!(code(&lab.run(&["--set", "decode.xi=2.0", "synth-data", "--seed", "1"])), 2);
    assert_eq!(code(&lab.run(&["--set", "decode.nonsense=1", "synth-data", "--seed", "1"])), 2);
    assert_eq!(code(&lab.run(&["decode", "--beam", "0"])), 2);
    fs::write(&lab.config, "seeds = [").unwrap();
    assert_eq!(code(&lab.run(&["report"])), 2);
}

#[test]
fn missing_artifacts_exit_with_three() {
    let lab = Lab::new();
    assert_eq!(code(&lab.run(&["pretrain-llm", "--seed", "1"])), 3);
    assert_eq!(code(&lab.run(&["report"])), 3);
    lab.ok(&["synth-data", "--seed", "7"]);
    assert_eq!(code(&lab.run(&["train-guided", "--seed", "1"])), 3);
    assert_eq!(code(&lab.run(&["decode", "--decoder", "baseline"])), 3);
}

#[test]
fn full_pipeline_runs_and_reproduces_bit_for_bit() {
    let a = Lab::new();
    let b = Lab::new();
    for lab in [&a, &b] {
        lab.pipeline();
        let line = lab.ok(&["decode", "--decoder", "guided"]);
        assert!(line.contains("WER"), "{line}");
        lab.ok(&["decode", "--decoder", "baseline", "--fusion", "0.3"]);
        lab.ok(&["eval"]);
        lab.ok(&["ablate"]);
        lab.ok(&["lm-integration"]);
    }
    let report = a.ok(&["report"]);
    for id in ["A0", "A4", "B1", "B3"] {
        assert!(report.contains(id), "{report}");
    }
    assert_eq!(snapshot(&a.work), snapshot(&b.work));
}

#[test]
fn retrained_step_one_invalidates_guided_checkpoints() {
    let lab = Lab::new();
    lab.pipeline();
    lab.ok(&["--set", "asr_train.lr=0.001", "train-asr", "--seed", "1"]);
    assert_eq!(code(&lab.run(&["decode", "--decoder", "guided"])), 4);
    // The baseline only needs Step 1 and still decodes.
    lab.ok(&["decode", "--decoder", "baseline"]);
}
