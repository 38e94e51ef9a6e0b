//! Experiment configuration: TOML file layered over defaults, then
//! `key.path=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asr::AsrConfig;
use crate::error::{Error, Result};
use crate::guided::{DecoderVariant, GuidedConfig, PromptVariant};
use crate::llm::LlmConfig;
use crate::nn::BlockConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Decoding and LM-integration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// Default beam (`B`).
    pub beam: usize,
    /// Beam of the large-beam rows and the N-best lists for rescoring.
    pub large_beam: usize,
    /// CTC weight `ξ`.
    pub xi: f64,
    /// Shallow-fusion weight `β` for single decodes.
    pub fusion_weight: f64,
    /// Rescoring weight `γ` for single decodes.
    pub rescore_weight: f64,
    /// Weights swept for `β` and `γ`; the best dev value is applied to test.
    pub weight_grid: Vec<f64>,
    pub decoder: DecoderVariant,
    pub prompt: PromptVariant,
    /// Response length limit for zero-shot correction.
    pub max_response: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 1,
            large_beam: 20,
            xi: 0.3,
            fusion_weight: 0.3,
            rescore_weight: 0.3,
            weight_grid: vec![0.1, 0.3, 0.5],
            decoder: DecoderVariant::Guided,
            prompt: PromptVariant::Gec,
            max_response: 200,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.large_beam == 0 {
            return Err(Error::Config("beam sizes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::Config(format!("xi {} outside [0,1]", self.xi)));
        }
        let weights = self.weight_grid.iter().chain([&self.fusion_weight, &self.rescore_weight]);
        if weights.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("fusion and rescoring weights must be finite and non-negative".into()));
        }
        if self.weight_grid.is_empty() {
            return Err(Error::Config("weight_grid is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds of the per-seed stages (Step 1, Step 2, decoding).
    pub seeds: Vec<u64>,
    pub synth: SynthConfig,
    pub asr: AsrConfig,
    pub asr_train: TrainConfig,
    pub llm: LlmConfig,
    pub llm_train: TrainConfig,
    pub guided: GuidedConfig,
    pub guided_train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1, 2, 3],
            synth: SynthConfig::default(),
            asr: AsrConfig::default(),
            asr_train: TrainConfig {
                epochs: 8,
                batch_size: 16,
                lr: 2e-3,
                warmup_steps: 200,
                final_lr_fraction: 0.1,
                clip: 5.0,
                patience: 3,
            },
            llm: LlmConfig::default(),
            llm_train: TrainConfig {
                epochs: 3,
                batch_size: 32,
                lr: 2e-3,
                warmup_steps: 200,
                final_lr_fraction: 0.1,
                clip: 5.0,
                patience: 0,
            },
            guided: GuidedConfig::default(),
            guided_train: TrainConfig {
                epochs: 10,
                batch_size: 16,
                lr: 5e-3,
                warmup_steps: 200,
                final_lr_fraction: 0.1,
                clip: 5.0,
                patience: 3,
            },
            decode: DecodeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.synth.validate()?;
        self.asr.validate()?;
        self.asr_train.validate()?;
        self.llm.block.validate()?;
        self.llm_train.validate()?;
        self.guided.decoder.validate()?;
        self.guided_train.validate()?;
        self.decode.validate()?;
        if self.asr.feat_dim != self.synth.feat_dim {
            return Err(Error::Config(format!(
                "asr.feat_dim {} differs from synth.feat_dim {}",
                self.asr.feat_dim, self.synth.feat_dim
            )));
        }
        let enc: &BlockConfig = &self.asr.encoder;
        if self.guided.decoder.dim != enc.dim {
            return Err(Error::Config("guided.decoder.dim must equal asr.encoder.dim".into()));
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then each `key.path=value`
    /// override. Values parse as TOML literals, falling back to strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Value::try_from(ExperimentConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let file: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut tree, file);
        }
        for o in overrides {
            set_path(&mut tree, o)?;
        }
        let cfg: ExperimentConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply one `a.b.c=value` override.
pub fn set_path(tree: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{}` is not a table", parts[..i].join("."))))?;
        if !table.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        if i + 1 == parts.len() {
            table.insert((*part).to_string(), value);
            return Ok(());
        }
        node = table.get_mut(*part).expect("checked");
    }
    Err(Error::Config(format!("empty config key in `{assignment}`")))
}
