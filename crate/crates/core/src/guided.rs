//! Attention decoder whose inputs are projected hidden states of the frozen
//! language model, prompted with a CTC hypothesis, plus its second-stage
//! training on dropout-sampled hypotheses.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use gasr_tensor::{Graph, Mode, ParamId, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asr::AsrModel;
use crate::ctc::best_path_decode;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::llm::{LlmHandle, LlmState, Prompt, ToyLlm, GEC_INSTRUCTION, TRANSLATE_INSTRUCTION};
use crate::nn::{add_positional_encoding, BlockConfig, DecoderStack, KeyValues, Linear};
use crate::synth::derive_seed;
use crate::train::{shuffled_batches, Optimizer, TrainConfig};
use crate::vocab::{Token, Vocabulary};

/// Instruction used when building the language-model prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptVariant {
    /// Correction instruction with the hypothesis as user input.
    Gec,
    /// No instruction and no hypothesis.
    None,
    /// Translation instruction with the hypothesis as user input.
    Mismatched,
}

impl PromptVariant {
    pub fn instruction(self) -> &'static str {
        match self {
            PromptVariant::Gec => GEC_INSTRUCTION,
            PromptVariant::None => "",
            PromptVariant::Mismatched => TRANSLATE_INSTRUCTION,
        }
    }

    /// Whether the CTC hypothesis enters the prompt.
    pub fn uses_hypothesis(self) -> bool {
        self != PromptVariant::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Gec => "gec",
            PromptVariant::None => "none",
            PromptVariant::Mismatched => "mismatched",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gec" => Ok(PromptVariant::Gec),
            "none" => Ok(PromptVariant::None),
            "mismatched" => Ok(PromptVariant::Mismatched),
            _ => Err(Error::Config(format!("unknown prompt variant `{s}` (gec, none, mismatched)"))),
        }
    }
}

/// Which decoder produces the attention scores at decode time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderVariant {
    /// The Step-1 token-embedding decoder.
    Baseline,
    Guided,
    /// Step-2 decoder retrained from scratch on token embeddings, no LM.
    GuidedNoLlm,
}

impl DecoderVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderVariant::Baseline => "baseline",
            DecoderVariant::Guided => "guided",
            DecoderVariant::GuidedNoLlm => "guided-no-llm",
        }
    }
}

impl fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(DecoderVariant::Baseline),
            "guided" => Ok(DecoderVariant::Guided),
            "guided-no-llm" => Ok(DecoderVariant::GuidedNoLlm),
            _ => Err(Error::Config(format!("unknown decoder variant `{s}` (baseline, guided, guided-no-llm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidedConfig {
    /// Must match the encoder width.
    pub decoder: BlockConfig,
    pub prompt: PromptVariant,
    /// false: token embeddings replace the LM features.
    pub use_llm: bool,
}

impl Default for GuidedConfig {
    fn default() -> Self {
        GuidedConfig {
            decoder: BlockConfig {
                dim: 64,
                heads: 2,
                ff_dim: 128,
                keep: 0.9,
                layers: 2,
            },
            prompt: PromptVariant::Gec,
            use_llm: true,
        }
    }
}

/// Sample-count policy recorded in guided checkpoints.
pub const SAMPLE_POLICY: &str = "one-per-utterance-per-epoch";

#[derive(Clone, Debug)]
pub enum GuidedInput {
    /// `D_llm -> D_asr` projection of LM features.
    Llm { proj: Linear },
    Tokens { embed: ParamId },
}

/// All parameters are named `guided.*`.
#[derive(Clone, Debug)]
pub struct GuidedModel {
    pub cfg: GuidedConfig,
    pub vocab: Vocabulary,
    pub input: GuidedInput,
    pub decoder: DecoderStack,
}

impl GuidedModel {
    pub fn new<F: Real>(cfg: &GuidedConfig, vocab: &Vocabulary, llm_dim: usize, store: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        cfg.decoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.decoder.dim;
        let input = if cfg.use_llm {
            GuidedInput::Llm {
                proj: Linear::new(store, "guided.proj", llm_dim, d, &mut rng)?,
            }
        } else {
            GuidedInput::Tokens {
                embed: store.add("guided.embed", gasr_tensor::init::normal(&mut rng, &[vocab.embed_rows(), d], 0.02))?,
            }
        };
        let decoder = DecoderStack::new(store, "guided.decoder", &cfg.decoder, vocab.classes(), &mut rng)?;
        Ok(GuidedModel {
            cfg: cfg.clone(),
            vocab: vocab.clone(),
            input,
            decoder,
        })
    }

    pub fn uses_llm(&self) -> bool {
        matches!(self.input, GuidedInput::Llm { .. })
    }

    pub fn dim(&self) -> usize {
        self.cfg.decoder.dim
    }

    /// Decoder input rows from position `start`: projected LM features (one
    /// row per response position), or token embeddings without the LM. Both
    /// get the decoder's positional encoding.
    pub fn inputs<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, features: Option<Var>, tokens: &[Token], start: usize) -> Result<Var> {
        match (&self.input, features) {
            (GuidedInput::Llm { proj }, Some(f)) => {
                if g.value(f).rows() != tokens.len() {
                    return Err(Error::invalid("feature rows do not match decoder positions"));
                }
                let x = proj.forward(g, s, f)?;
                add_positional_encoding(g, x, start)
            }
            (GuidedInput::Llm { .. }, None) => Err(Error::invalid("guided decoder needs language-model features")),
            (GuidedInput::Tokens { embed }, _) => {
                let rows: Vec<usize> = tokens.iter().map(|&t| self.vocab.embed_row(t)).collect();
                let table = g.param(s, *embed);
                let e = g.embedding(table, &rows)?;
                let e = g.scale(e, F::lit((self.dim() as f64).sqrt()))?;
                add_positional_encoding(g, e, start)
            }
        }
    }

    pub fn memory<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, h: Var) -> Result<Vec<KeyValues>> {
        self.decoder.memory(g, s, h)
    }

    /// Teacher-forced log-probabilities over `[bos, w_1..w_N]` positions.
    pub fn log_probs<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, h: Var, features: Option<Var>, inputs: &[Token]) -> Result<Var> {
        let memory = self.memory(g, s, h)?;
        let x = self.inputs(g, s, features, inputs, 0)?;
        Ok(self.decoder.forward(g, s, x, &memory, None)?.0)
    }

    /// `-Σ log p(w_n | W̃, W_<n, O)` over the reference and the end symbol.
    pub fn loss_node<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, h: Var, features: Option<Var>, tokens: &[Token]) -> Result<Var> {
        let mut inputs = vec![self.vocab.bos()];
        inputs.extend_from_slice(tokens);
        let mut targets: Vec<usize> = tokens.iter().map(|&t| self.vocab.dec_class(t)).collect();
        targets.push(self.vocab.dec_class(self.vocab.eos()));
        let lp = self.log_probs(g, s, h, features, &inputs)?;
        Ok(g.cross_entropy(lp, &targets)?)
    }
}

/// The prompt for a hypothesis under a variant, with the response `[bos]`.
pub fn guided_prompt(vocab: &Vocabulary, variant: PromptVariant, hypothesis: &[Token]) -> Result<Prompt> {
    Ok(Prompt {
        instruction: vocab.encode(variant.instruction())?,
        user_input: if variant.uses_hypothesis() { hypothesis.to_vec() } else { Vec::new() },
        response: vec![vocab.bos()],
    })
}

/// LM hidden states for the response `[bos, words..]` after the prompt,
/// from one full causal pass (any scalar type).
pub fn llm_features<F: Real>(llm: &ToyLlm, s: &ParamStore<F>, prompt: &Prompt, words: &[Token]) -> Result<Tensor<F>> {
    let mut response = vec![llm.vocab.bos()];
    response.extend_from_slice(words);
    let p = prompt.with_response(response);
    let tokens = p.tokens(&llm.vocab);
    let start = tokens.len() - p.response.len();
    let mut g = Graph::no_grad(Mode::Eval, 0);
    let (h, _) = llm.hidden(&mut g, s, &tokens, 0, None)?;
    let rows = g.slice(h, 0, start, p.response.len())?;
    Ok(g.value(rows).clone())
}

/// Frozen-LM feature extraction for one prompt variant. The instruction part
/// is consumed once and reused.
#[derive(Clone, Debug)]
pub struct LlmFeaturizer {
    pub llm: LlmHandle,
    pub variant: PromptVariant,
    instruction_len: usize,
    shared: Option<LlmState>,
}

impl LlmFeaturizer {
    pub fn new(llm: LlmHandle, variant: PromptVariant) -> Result<Self> {
        let vocab = &llm.model.vocab;
        let prompt = guided_prompt(vocab, variant, &[])?;
        let instruction_len = if prompt.instruction.is_empty() { 0 } else { prompt.instruction.len() + 1 };
        let shared = if instruction_len == 0 {
            None
        } else {
            let prefix = prompt.prefix(vocab);
            Some(llm.model.prefill(&llm.store, &prefix[..instruction_len], None)?.0)
        };
        Ok(LlmFeaturizer {
            llm,
            variant,
            instruction_len,
            shared,
        })
    }

    pub fn dim(&self) -> usize {
        self.llm.model.dim()
    }

    /// Tokens after the instruction, through the start symbol.
    fn rest(&self, hypothesis: &[Token]) -> Result<Vec<Token>> {
        let p = guided_prompt(&self.llm.model.vocab, self.variant, hypothesis)?;
        Ok(p.tokens(&self.llm.model.vocab)[self.instruction_len..].to_vec())
    }

    /// One row per response position `[bos, words..]`.
    pub fn features(&self, hypothesis: &[Token], words: &[Token]) -> Result<Tensor<f32>> {
        let mut rest = self.rest(hypothesis)?;
        let first = rest.len() - 1;
        rest.extend_from_slice(words);
        let (_, h) = self.llm.model.prefill(&self.llm.store, &rest, self.shared.as_ref())?;
        Ok(h.slice_rows(first, words.len() + 1)?)
    }

    /// State after the start symbol and its feature row.
    pub fn start(&self, hypothesis: &[Token]) -> Result<(LlmState, Tensor<f32>)> {
        let rest = self.rest(hypothesis)?;
        let (state, h) = self.llm.model.prefill(&self.llm.store, &rest, self.shared.as_ref())?;
        let row = h.slice_rows(h.rows() - 1, 1)?;
        Ok((state, row))
    }

    pub fn step(&self, state: &LlmState, token: Token) -> Result<(LlmState, Tensor<f32>)> {
        self.llm.model.prefill(&self.llm.store, &[token], Some(state))
    }
}

/// A hypothesis drawn from a dropout-enabled encoder pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledHypothesis {
    pub tokens: Vec<Token>,
    pub utterance: String,
    pub seed: u64,
}

/// Best-path decode of a training-mode (dropout) encoder pass.
pub fn sample_hypothesis(asr: &AsrModel, s: &ParamStore<f32>, utt: &Utterance, seed: u64) -> Result<SampledHypothesis> {
    let mut g = Graph::no_grad(Mode::Train, seed);
    let x = g.constant_shared(Arc::clone(&utt.features));
    let h = asr.encode(&mut g, s, x)?;
    let lp = asr.ctc_log_probs(&mut g, s, h)?;
    Ok(SampledHypothesis {
        tokens: best_path_decode(g.value(lp)),
        utterance: utt.id.clone(),
        seed,
    })
}

/// Frozen Step-1 outputs shared by every Step-2 run on the same checkpoint:
/// eval-mode encoder outputs, eval-mode best paths, and memoized samples.
pub struct Step2Context<'a> {
    pub asr: &'a AsrModel,
    pub asr_store: &'a ParamStore<f32>,
    pub train: &'a [Utterance],
    pub dev: &'a [Utterance],
    pub train_h: Vec<Arc<Tensor<f32>>>,
    pub dev_h: Vec<Arc<Tensor<f32>>>,
    pub dev_best_path: Vec<Vec<Token>>,
    pub seed: u64,
    samples: HashMap<(usize, usize), Vec<Token>>,
}

impl<'a> Step2Context<'a> {
    pub fn new(asr: &'a AsrModel, asr_store: &'a ParamStore<f32>, train: &'a [Utterance], dev: &'a [Utterance], seed: u64) -> Result<Self> {
        let enc = |u: &Utterance| asr.encode_eval(asr_store, &u.features);
        let train_h = train.iter().map(|u| Ok(enc(u)?.0)).collect::<Result<_>>()?;
        let mut dev_h = Vec::with_capacity(dev.len());
        let mut dev_best_path = Vec::with_capacity(dev.len());
        for u in dev {
            let (h, lp) = enc(u)?;
            dev_h.push(h);
            dev_best_path.push(best_path_decode(&lp));
        }
        Ok(Step2Context {
            asr,
            asr_store,
            train,
            dev,
            train_h,
            dev_h,
            dev_best_path,
            seed,
            samples: HashMap::new(),
        })
    }

    pub fn sample_seed(&self, epoch: usize, utt: usize) -> u64 {
        derive_seed(self.seed, &format!("sample:{epoch}:{}", self.train[utt].id))
    }

    /// The hypothesis for training utterance `utt` in `epoch`; identical for
    /// every Step-2 run sharing this context.
    pub fn sample(&mut self, epoch: usize, utt: usize) -> Result<Vec<Token>> {
        if let Some(t) = self.samples.get(&(epoch, utt)) {
            return Ok(t.clone());
        }
        let seed = self.sample_seed(epoch, utt);
        let t = sample_hypothesis(self.asr, self.asr_store, &self.train[utt], seed)?.tokens;
        self.samples.insert((epoch, utt), t.clone());
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidedEpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
}

impl GuidedEpochRow {
    pub const HEADER: [&'static str; 3] = ["epoch", "train_loss", "dev_loss"];

    pub fn cells(&self) -> Vec<String> {
        vec![self.epoch.to_string(), crate::train::fmt_f(self.train_loss), crate::train::fmt_f(self.dev_loss)]
    }
}

/// Features cached per utterance, reused while the hypothesis is unchanged.
struct FeatureCache {
    entries: HashMap<usize, (Vec<Token>, Arc<Tensor<f32>>)>,
}

impl FeatureCache {
    fn get(&mut self, f: &LlmFeaturizer, utt: usize, hypothesis: &[Token], words: &[Token]) -> Result<Arc<Tensor<f32>>> {
        let hyp: &[Token] = if f.variant.uses_hypothesis() { hypothesis } else { &[] };
        if let Some((h, t)) = self.entries.get(&utt) {
            if h == hyp {
                return Ok(Arc::clone(t));
            }
        }
        let t = Arc::new(f.features(hyp, words)?);
        self.entries.insert(utt, (hyp.to_vec(), Arc::clone(&t)));
        Ok(t)
    }
}

fn utterance_loss(
    model: &GuidedModel,
    g: &mut Graph<f32>,
    s: &ParamStore<f32>,
    h: &Arc<Tensor<f32>>,
    features: Option<&Arc<Tensor<f32>>>,
    tokens: &[Token],
) -> Result<Var> {
    let hv = g.constant_shared(Arc::clone(h));
    let fv = features.map(|f| g.constant_shared(Arc::clone(f)));
    model.loss_node(g, s, hv, fv, tokens)
}

/// Mean eval-mode loss on dev with the eval-mode best path as hypothesis.
pub fn guided_dev_loss(model: &GuidedModel, s: &ParamStore<f32>, featurizer: Option<&LlmFeaturizer>, ctx: &Step2Context) -> Result<f64> {
    let mut total = 0.0;
    for (i, u) in ctx.dev.iter().enumerate() {
        let feats = match featurizer {
            Some(f) => Some(Arc::new(f.features(&ctx.dev_best_path[i], &u.tokens)?)),
            None => None,
        };
        let mut g = Graph::inference();
        let l = utterance_loss(model, &mut g, s, &ctx.dev_h[i], feats.as_ref(), &u.tokens)?;
        total += g.value(l).item() as f64;
    }
    Ok(total / ctx.dev.len().max(1) as f64)
}

/// Step 2: train only the guided decoder (projection included) against the
/// reference, conditioned on one freshly sampled hypothesis per utterance per
/// epoch. Encoder, CTC head and LM stay frozen; their checksums are compared
/// before and after. Early stopping and best-epoch selection use dev loss.
pub fn train_guided(
    model: &GuidedModel,
    store: &mut ParamStore<f32>,
    llm: Option<&LlmHandle>,
    ctx: &mut Step2Context,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&GuidedEpochRow),
) -> Result<Vec<GuidedEpochRow>> {
    cfg.validate()?;
    if ctx.train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let featurizer = match (model.uses_llm(), llm) {
        (true, Some(l)) => Some(LlmFeaturizer::new(l.clone(), model.cfg.prompt)?),
        (true, None) => return Err(Error::invalid("guided decoder needs the language model")),
        (false, _) => None,
    };
    if let Some(f) = &featurizer {
        if f.dim() != model.input_dim() {
            return Err(Error::Config(format!("projection expects width {}, LM has {}", model.input_dim(), f.dim())));
        }
    }
    let asr_before = ctx.asr_store.checksum();
    let llm_before = llm.map(|l| l.store.checksum());
    if store.iter().any(|(_, p)| !p.name().starts_with("guided.")) {
        return Err(Error::Invariant("guided store holds non-guided parameters".into()));
    }
    let seed = ctx.seed;
    let steps_per_epoch = ctx.train.len().div_ceil(cfg.batch_size);
    let mut opt = Optimizer::new(cfg, store, steps_per_epoch * cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "guided-batches"));
    let mut cache = FeatureCache { entries: HashMap::new() };
    let mut rows = Vec::new();
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut last_good = store.clone();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for (b, batch) in shuffled_batches(ctx.train.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let weight = 1.0 / batch.len() as f32;
            for &i in &batch {
                let feats = match &featurizer {
                    Some(f) => {
                        let hyp = if f.variant.uses_hypothesis() { ctx.sample(epoch, i)? } else { Vec::new() };
                        Some(cache.get(f, i, &hyp, &ctx.train[i].tokens)?)
                    }
                    None => None,
                };
                let mut g = Graph::new(Mode::Train, derive_seed(seed, &format!("guided:{epoch}:{b}:{i}")));
                let step = utterance_loss(model, &mut g, store, &ctx.train_h[i], feats.as_ref(), &ctx.train[i].tokens)
                    .and_then(|l| Ok((l, g.scale(l, weight)?)));
                let (l, scaled) = match step {
                    Ok(v) if g.value(v.0).is_finite() => v,
                    _ => {
                        *store = last_good;
                        return Err(Error::Diverged { epoch });
                    }
                };
                g.backward(scaled, &mut [store]).map_err(frozen_breach)?;
                total += g.value(l).item() as f64;
            }
            if opt.step(store).is_err() {
                *store = last_good;
                return Err(Error::Diverged { epoch });
            }
        }
        let dev_loss = if ctx.dev.is_empty() { f64::NAN } else { guided_dev_loss(model, store, featurizer.as_ref(), ctx)? };
        let row = GuidedEpochRow {
            epoch,
            train_loss: total / ctx.train.len() as f64,
            dev_loss,
        };
        on_epoch(&row);
        rows.push(row);
        last_good = store.clone();
        if best.as_ref().is_none_or(|(l, _)| dev_loss < *l) {
            best = Some((dev_loss, store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((l, s)) = best {
        if !l.is_nan() {
            *store = s;
        }
    }
    if ctx.asr_store.checksum() != asr_before || llm.map(|l| l.store.checksum()) != llm_before {
        return Err(Error::Invariant("frozen parameters changed during Step 2".into()));
    }
    Ok(rows)
}

fn frozen_breach(e: gasr_tensor::TensorError) -> Error {
    match e {
        gasr_tensor::TensorError::FrozenGradient(name) => Error::Invariant(format!("gradient reached frozen parameter `{name}`")),
        other => Error::Tensor(other),
    }
}

impl GuidedModel {
    /// Width expected from LM features (0 without the LM).
    pub fn input_dim(&self) -> usize {
        match &self.input {
            GuidedInput::Llm { proj } => proj.din,
            GuidedInput::Tokens { .. } => 0,
        }
    }
}
