//! Encoder, CTC head and attention decoder trained with the interpolated
//! CTC/attention objective.

use std::sync::Arc;

use gasr_tensor::{Graph, Mode, ParamId, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{best_path_decode, ctc_loss_node};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::metrics::wer;
use crate::nn::{add_positional_encoding, BlockConfig, DecoderStack, Frontend, KeyValues, LayerNorm, Linear, SelfAttnBlock};
use crate::synth::derive_seed;
use crate::train::{shuffled_batches, Optimizer, TrainConfig};
use crate::vocab::{Token, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrConfig {
    pub feat_dim: usize,
    pub encoder: BlockConfig,
    pub decoder: BlockConfig,
    /// CTC weight of the training objective.
    pub lambda: f64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        let block = BlockConfig {
            dim: 64,
            heads: 2,
            ff_dim: 128,
            keep: 0.9,
            layers: 2,
        };
        AsrConfig {
            feat_dim: 16,
            encoder: block,
            decoder: block,
            lambda: 0.3,
        }
    }
}

impl AsrConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.dim != self.decoder.dim {
            return Err(Error::Config("encoder and decoder widths differ".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("feat_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder and CTC head plus the token-embedding attention decoder.
#[derive(Clone, Debug)]
pub struct AsrModel {
    pub cfg: AsrConfig,
    pub vocab: Vocabulary,
    pub frontend: Frontend,
    pub encoder: Vec<SelfAttnBlock>,
    pub encoder_ln: LayerNorm,
    pub ctc_head: Linear,
    pub embed: ParamId,
    pub decoder: DecoderStack,
}

/// Parameter name prefixes of the encoder side (frontend, blocks, CTC head).
pub const ENCODER_PREFIXES: [&str; 4] = ["frontend.", "encoder.", "encoder_ln.", "ctc_head."];

/// Per-utterance training terms.
#[derive(Clone, Copy, Debug)]
pub struct UttLoss {
    pub ctc: Var,
    pub aed: Var,
    pub joint: Var,
}

impl AsrModel {
    pub fn new<F: Real>(cfg: &AsrConfig, vocab: &Vocabulary, store: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.encoder.dim;
        let frontend = Frontend::new(store, "frontend", cfg.feat_dim, d, &mut rng)?;
        let encoder = (0..cfg.encoder.layers)
            .map(|i| SelfAttnBlock::new(store, &format!("encoder.block{i}"), &cfg.encoder, &mut rng))
            .collect::<Result<_>>()?;
        let encoder_ln = LayerNorm::new(store, "encoder_ln", d)?;
        let ctc_head = Linear::new(store, "ctc_head", d, vocab.classes(), &mut rng)?;
        let embed = store.add("embed", gasr_tensor::init::normal(&mut rng, &[vocab.embed_rows(), d], 0.02))?;
        let decoder = DecoderStack::new(store, "decoder", &cfg.decoder, vocab.classes(), &mut rng)?;
        Ok(AsrModel {
            cfg: cfg.clone(),
            vocab: vocab.clone(),
            frontend,
            encoder,
            encoder_ln,
            ctc_head,
            embed,
            decoder,
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.encoder.dim
    }

    /// `features` (`[T, F]`) to `H` (`[floor(T/4), D]`).
    pub fn encode<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, features: Var) -> Result<Var> {
        let x = self.frontend.forward(g, s, features)?;
        let x = add_positional_encoding(g, x, 0)?;
        let mut x = g.dropout(x, F::lit(self.cfg.encoder.keep))?;
        for b in &self.encoder {
            x = b.forward(g, s, x)?;
        }
        self.encoder_ln.forward(g, s, x)
    }

    /// Row-wise log-distribution over blank and symbols.
    pub fn ctc_log_probs<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, h: Var) -> Result<Var> {
        let logits = self.ctc_head.forward(g, s, h)?;
        Ok(g.log_softmax(logits)?)
    }

    /// Scaled embeddings plus positions for decoder input tokens.
    pub fn embed_tokens<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, tokens: &[Token], start: usize) -> Result<Var> {
        let rows: Vec<usize> = tokens.iter().map(|&t| self.vocab.embed_row(t)).collect();
        let table = g.param(s, self.embed);
        let e = g.embedding(table, &rows)?;
        let e = g.scale(e, F::lit((self.dim() as f64).sqrt()))?;
        add_positional_encoding(g, e, start)
    }

    fn check_prefix(&self, prefix: &[Token]) -> Result<()> {
        if prefix.first() != Some(&self.vocab.bos()) {
            return Err(Error::invalid("decoder prefix must start with the start symbol"));
        }
        if let Some(&t) = prefix[1..].iter().find(|&&t| !self.vocab.is_symbol(t)) {
            return Err(Error::invalid(format!("decoder prefix contains non-symbol token {t}")));
        }
        Ok(())
    }

    /// Teacher-forced decoder log-probabilities, one row per prefix position.
    pub fn decoder_log_probs<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, h: Var, prefix: &[Token]) -> Result<Var> {
        self.check_prefix(prefix)?;
        let memory = self.decoder.memory(g, s, h)?;
        let x = self.embed_tokens(g, s, prefix, 0)?;
        Ok(self.decoder.forward(g, s, x, &memory, None)?.0)
    }

    /// Decoder inputs `[bos, w_1..w_N]` and class targets `[w_1..w_N, eos]`.
    pub fn teacher_forcing(&self, tokens: &[Token]) -> (Vec<Token>, Vec<usize>) {
        let mut inputs = vec![self.vocab.bos()];
        inputs.extend_from_slice(tokens);
        let mut targets: Vec<usize> = tokens.iter().map(|&t| self.vocab.dec_class(t)).collect();
        targets.push(self.vocab.dec_class(self.vocab.eos()));
        (inputs, targets)
    }

    pub fn aed_loss_node<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, h: Var, tokens: &[Token]) -> Result<Var> {
        let (inputs, targets) = self.teacher_forcing(tokens);
        let logp = self.decoder_log_probs(g, s, h, &inputs)?;
        Ok(g.cross_entropy(logp, &targets)?)
    }

    pub fn losses<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, features: Var, tokens: &[Token], lambda: f64) -> Result<UttLoss> {
        let h = self.encode(g, s, features)?;
        let lp = self.ctc_log_probs(g, s, h)?;
        let ctc = ctc_loss_node(g, lp, tokens)?;
        let aed = self.aed_loss_node(g, s, h, tokens)?;
        let a = g.scale(ctc, F::lit(lambda))?;
        let b = g.scale(aed, F::lit(1.0 - lambda))?;
        let joint = g.add(a, b)?;
        Ok(UttLoss { ctc, aed, joint })
    }

    /// Mean joint loss of several utterances in one graph.
    pub fn batch_loss<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, batch: &[(Tensor<F>, Vec<Token>)], lambda: f64) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut terms = Vec::with_capacity(batch.len());
        for (feats, tokens) in batch {
            let x = g.constant(feats.clone());
            terms.push(self.losses(g, s, x, tokens, lambda)?.joint);
        }
        let cat = g.concat(&terms, 0)?;
        let total = g.sum(cat)?;
        Ok(g.scale(total, F::lit(1.0 / batch.len() as f64))?)
    }

    /// Eval-mode CTC log-probabilities of one utterance.
    pub fn ctc_emissions(&self, s: &ParamStore<f32>, features: &Arc<Tensor<f32>>) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let x = g.constant_shared(Arc::clone(features));
        let h = self.encode(&mut g, s, x)?;
        let lp = self.ctc_log_probs(&mut g, s, h)?;
        Ok(g.value(lp).clone())
    }

    /// Eval-mode encoder output and CTC log-probabilities.
    pub fn encode_eval(&self, s: &ParamStore<f32>, features: &Arc<Tensor<f32>>) -> Result<(Arc<Tensor<f32>>, Tensor<f32>)> {
        let mut g = Graph::inference();
        let x = g.constant_shared(Arc::clone(features));
        let h = self.encode(&mut g, s, x)?;
        let lp = self.ctc_log_probs(&mut g, s, h)?;
        Ok((g.shared_value(h), g.value(lp).clone()))
    }

    /// Cross-attention memory of the baseline decoder for a fixed `H`.
    pub fn decoder_memory(&self, g: &mut Graph<f32>, s: &ParamStore<f32>, h: &Arc<Tensor<f32>>) -> Result<Vec<KeyValues>> {
        let hv = g.constant_shared(Arc::clone(h));
        self.decoder.memory(g, s, hv)
    }

    /// Next-token distribution (probabilities over decoder classes) after `prefix`.
    pub fn aed_token_dist(&self, s: &ParamStore<f32>, features: &Arc<Tensor<f32>>, prefix: &[Token]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let x = g.constant_shared(Arc::clone(features));
        let h = self.encode(&mut g, s, x)?;
        let lp = self.decoder_log_probs(&mut g, s, h, prefix)?;
        let t = g.value(lp);
        Ok(t.row_slice(t.rows() - 1).iter().map(|v| (*v as f64).exp()).collect())
    }

    /// Best-path CTC transcript in eval mode.
    pub fn greedy_ctc(&self, s: &ParamStore<f32>, features: &Arc<Tensor<f32>>) -> Result<Vec<Token>> {
        Ok(best_path_decode(&self.ctc_emissions(s, features)?))
    }
}

/// One line of the Step-1 training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub ctc: f64,
    pub aed: f64,
    pub joint: f64,
    pub dev_wer: f64,
}

impl EpochRow {
    pub const HEADER: [&'static str; 5] = ["epoch", "L_ctc", "L_aed", "joint", "dev_wer"];

    pub fn cells(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            crate::train::fmt_f(self.ctc),
            crate::train::fmt_f(self.aed),
            crate::train::fmt_f(self.joint),
            crate::train::fmt_f(self.dev_wer),
        ]
    }
}

/// Corpus WER of eval-mode best-path CTC transcripts.
pub fn ctc_greedy_wer(model: &AsrModel, s: &ParamStore<f32>, utts: &[Utterance]) -> Result<f64> {
    let mut refs = Vec::with_capacity(utts.len());
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        hyps.push(model.vocab.decode(&model.greedy_ctc(s, &u.features)?));
        refs.push(u.transcript.clone());
    }
    wer(&refs, &hyps)
}

/// Mean per-utterance training losses under eval mode.
pub fn mean_losses(model: &AsrModel, s: &ParamStore<f32>, utts: &[Utterance]) -> Result<(f64, f64, f64)> {
    let (mut c, mut a, mut j) = (0.0, 0.0, 0.0);
    for u in utts {
        let mut g = Graph::no_grad(Mode::Eval, 0);
        let x = g.constant_shared(Arc::clone(&u.features));
        let l = model.losses(&mut g, s, x, &u.tokens, model.cfg.lambda)?;
        c += g.value(l.ctc).item() as f64;
        a += g.value(l.aed).item() as f64;
        j += g.value(l.joint).item() as f64;
    }
    let n = utts.len().max(1) as f64;
    Ok((c / n, a / n, j / n))
}

/// Step 1: minibatch training of encoder, CTC head and decoder on the joint
/// loss. Each batch averages per-utterance losses. After every epoch the dev
/// set is scored with best-path CTC; the store ends at the best dev epoch.
///
/// On a non-finite loss the store is reset to the last completed epoch and
/// `Error::Diverged` is returned.
pub fn train_joint(
    model: &AsrModel,
    store: &mut ParamStore<f32>,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<Vec<EpochRow>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let lambda = model.cfg.lambda;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = Optimizer::new(cfg, store, steps_per_epoch * cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "asr-batches"));
    let mut rows = Vec::new();
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut last_good = store.clone();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let (mut c, mut a, mut j) = (0.0, 0.0, 0.0);
        for (b, batch) in shuffled_batches(train.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let weight = 1.0 / batch.len() as f64;
            for &i in &batch {
                let u = &train[i];
                let graph_seed = derive_seed(seed, &format!("asr:{epoch}:{b}:{i}"));
                let mut g = Graph::new(Mode::Train, graph_seed);
                let x = g.constant_shared(Arc::clone(&u.features));
                let step = model
                    .losses(&mut g, store, x, &u.tokens, lambda)
                    .and_then(|l| Ok((l, g.scale(l.joint, weight as f32)?)));
                let (l, scaled) = match step {
                    Ok(v) if g.value(v.1).is_finite() => v,
                    _ => {
                        *store = last_good;
                        return Err(Error::Diverged { epoch });
                    }
                };
                g.backward(scaled, &mut [store])?;
                c += g.value(l.ctc).item() as f64;
                a += g.value(l.aed).item() as f64;
                j += g.value(l.joint).item() as f64;
            }
            if opt.step(store).is_err() {
                *store = last_good;
                return Err(Error::Diverged { epoch });
            }
        }
        let n = train.len() as f64;
        let dev_wer = if dev.is_empty() { f64::NAN } else { ctc_greedy_wer(model, store, dev)? };
        let row = EpochRow {
            epoch,
            ctc: c / n,
            aed: a / n,
            joint: j / n,
            dev_wer,
        };
        on_epoch(&row);
        rows.push(row);
        last_good = store.clone();
        let improved = best.as_ref().is_none_or(|(w, _)| dev_wer < *w);
        if improved {
            best = Some((dev_wer, store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((w, s)) = best {
        if !w.is_nan() {
            *store = s;
        }
    }
    Ok(rows)
}
