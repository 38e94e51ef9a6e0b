//! Utterances loaded from manifests.

use std::path::Path;
use std::sync::Arc;

use gasr_tensor::Tensor;

use crate::error::{Error, Result};
use crate::nn::Frontend;
use crate::synth::{manifest_path, read_features, read_manifest};
use crate::vocab::{Token, Vocabulary};

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub features: Arc<Tensor<f32>>,
    pub transcript: String,
    pub tokens: Vec<Token>,
}

impl Utterance {
    /// Checks length, blank-freeness and CTC feasibility.
    pub fn new(id: impl Into<String>, features: Tensor<f32>, transcript: impl Into<String>, vocab: &Vocabulary) -> Result<Self> {
        let id = id.into();
        let transcript = transcript.into();
        let tokens = vocab.encode(&transcript)?;
        let frames = features.rows();
        if frames < 4 {
            return Err(Error::TooShort { frames, min: 4 });
        }
        let needed = Vocabulary::min_ctc_frames(&tokens);
        let available = Frontend::output_len(frames);
        if available < needed {
            return Err(Error::InfeasibleTarget {
                target: tokens.len(),
                repeats: Vocabulary::adjacent_repeats(&tokens),
                needed,
                frames: available,
            });
        }
        Ok(Utterance {
            id,
            features: Arc::new(features),
            transcript,
            tokens,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

pub fn load_split(data_dir: &Path, split: &str, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    read_manifest(&manifest_path(data_dir, split))?
        .into_iter()
        .map(|e| Utterance::new(e.id, read_features(&e.features)?, e.transcript, vocab))
        .collect()
}
