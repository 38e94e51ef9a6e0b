//! One-pass joint CTC/attention beam search, guided two-stage decoding, and
//! the language-model comparison decoders (shallow fusion, N-best rescoring,
//! zero-shot correction).

use std::any::Any;
use std::sync::Arc;

use gasr_tensor::{Graph, ParamStore, Tensor, Var};

use crate::asr::AsrModel;
use crate::ctc::{best_path_decode, CtcPrefixScorer, CtcPrefixState};
use crate::error::{Error, Result};
use crate::guided::{GuidedModel, LlmFeaturizer};
use crate::llm::{build_prompt, LlmHandle, LlmState, Prompt};
use crate::nn::{DecoderStack, KvCache};
use crate::vocab::{Token, Vocabulary};

/// Next-token log-probabilities (indexed by decoder class) after a prefix,
/// plus whatever the scorer needs to continue from it.
#[derive(Clone)]
pub struct ScorerState {
    pub log_probs: Arc<Vec<f64>>,
    pub cache: Arc<dyn Any + Send + Sync>,
}

/// Autoregressive scorer over symbols and the end symbol.
pub trait TokenScorer {
    /// State for the empty prefix.
    fn start(&self) -> Result<ScorerState>;
    /// State after appending the symbol `token`.
    fn extend(&self, state: &ScorerState, token: Token) -> Result<ScorerState>;
}

fn cache_of<T: 'static>(state: &ScorerState) -> Result<&T> {
    state
        .cache
        .downcast_ref::<T>()
        .ok_or_else(|| Error::invalid("scorer state from a different scorer"))
}

fn row_log_probs(t: &Tensor<f32>) -> Vec<f64> {
    t.row_slice(t.rows() - 1).iter().map(|&v| v as f64).collect()
}

#[derive(Clone)]
struct DecoderCache {
    past: Vec<KvCache<f32>>,
    len: usize,
}

/// Cross-attention keys/values of a decoder stack over a fixed `H`.
fn stack_memory(stack: &DecoderStack, s: &ParamStore<f32>, h: &Arc<Tensor<f32>>) -> Result<Vec<KvCache<f32>>> {
    let mut g = Graph::inference();
    let hv = g.constant_shared(Arc::clone(h));
    let kvs = stack.memory(&mut g, s, hv)?;
    Ok(kvs.into_iter().map(|kv| KvCache::capture(&g, kv)).collect())
}

/// One incremental decoder step on a single input row built by `input`.
fn stack_step(
    stack: &DecoderStack,
    s: &ParamStore<f32>,
    memory: &[KvCache<f32>],
    past: Option<&DecoderCache>,
    input: impl FnOnce(&mut Graph<f32>, usize) -> Result<Var>,
) -> Result<(Vec<f64>, DecoderCache)> {
    let mut g = Graph::inference();
    let len = past.map_or(0, |p| p.len);
    let mem: Vec<_> = memory.iter().map(|m| m.bind(&mut g)).collect();
    let bound: Option<Vec<_>> = past.map(|p| p.past.iter().map(|c| c.bind(&mut g)).collect());
    let x = input(&mut g, len)?;
    let (lp, kvs) = stack.forward(&mut g, s, x, &mem, bound.as_deref())?;
    let cache = DecoderCache {
        past: kvs.into_iter().map(|kv| KvCache::capture(&g, kv)).collect(),
        len: len + 1,
    };
    Ok((row_log_probs(g.value(lp)), cache))
}

/// The Step-1 attention decoder over a fixed encoder output.
pub struct AedScorer<'a> {
    model: &'a AsrModel,
    store: &'a ParamStore<f32>,
    memory: Vec<KvCache<f32>>,
}

impl<'a> AedScorer<'a> {
    pub fn new(model: &'a AsrModel, store: &'a ParamStore<f32>, h: &Arc<Tensor<f32>>) -> Result<Self> {
        Ok(AedScorer {
            model,
            store,
            memory: stack_memory(&model.decoder, store, h)?,
        })
    }

    fn run(&self, past: Option<&DecoderCache>, token: Token) -> Result<ScorerState> {
        let (lp, cache) = stack_step(&self.model.decoder, self.store, &self.memory, past, |g, pos| {
            self.model.embed_tokens(g, self.store, &[token], pos)
        })?;
        Ok(ScorerState {
            log_probs: Arc::new(lp),
            cache: Arc::new(cache),
        })
    }
}

impl TokenScorer for AedScorer<'_> {
    fn start(&self) -> Result<ScorerState> {
        self.run(None, self.model.vocab.bos())
    }

    fn extend(&self, state: &ScorerState, token: Token) -> Result<ScorerState> {
        self.run(Some(cache_of::<DecoderCache>(state)?), token)
    }
}

#[derive(Clone)]
struct GuidedCache {
    llm: Option<LlmState>,
    decoder: DecoderCache,
}

/// The guided decoder conditioned on a fixed hypothesis `W̃` and encoder output.
pub struct GuidedScorer<'a> {
    model: &'a GuidedModel,
    store: &'a ParamStore<f32>,
    featurizer: Option<&'a LlmFeaturizer>,
    hypothesis: Vec<Token>,
    memory: Vec<KvCache<f32>>,
}

impl<'a> GuidedScorer<'a> {
    pub fn new(
        model: &'a GuidedModel,
        store: &'a ParamStore<f32>,
        featurizer: Option<&'a LlmFeaturizer>,
        hypothesis: &[Token],
        h: &Arc<Tensor<f32>>,
    ) -> Result<Self> {
        if model.uses_llm() && featurizer.is_none() {
            return Err(Error::invalid("guided decoder needs language-model features"));
        }
        Ok(GuidedScorer {
            model,
            store,
            featurizer,
            hypothesis: hypothesis.to_vec(),
            memory: stack_memory(&model.decoder, store, h)?,
        })
    }

    fn run(&self, llm: Option<(LlmState, Tensor<f32>)>, past: Option<&DecoderCache>, token: Token) -> Result<ScorerState> {
        let (llm_state, feature) = match llm {
            Some((st, f)) => (Some(st), Some(f)),
            None => (None, None),
        };
        let (lp, decoder) = stack_step(&self.model.decoder, self.store, &self.memory, past, |g, pos| {
            let f = feature.map(|f| g.constant(f));
            self.model.inputs(g, self.store, f, &[token], pos)
        })?;
        Ok(ScorerState {
            log_probs: Arc::new(lp),
            cache: Arc::new(GuidedCache { llm: llm_state, decoder }),
        })
    }
}

impl TokenScorer for GuidedScorer<'_> {
    fn start(&self) -> Result<ScorerState> {
        let llm = match (self.model.uses_llm(), self.featurizer) {
            (true, Some(f)) => Some(f.start(&self.hypothesis)?),
            _ => None,
        };
        self.run(llm, None, self.model.vocab.bos())
    }

    fn extend(&self, state: &ScorerState, token: Token) -> Result<ScorerState> {
        let c = cache_of::<GuidedCache>(state)?;
        let llm = match (&c.llm, self.featurizer) {
            (Some(st), Some(f)) => Some(f.step(st, token)?),
            _ => None,
        };
        self.run(llm, Some(&c.decoder), token)
    }
}

/// Plain (instruction-free) LM continuation scores, for shallow fusion.
pub struct LmScorer<'a> {
    llm: &'a LlmHandle,
}

impl<'a> LmScorer<'a> {
    pub fn new(llm: &'a LlmHandle) -> Self {
        LmScorer { llm }
    }

    fn state(&self, st: LlmState, h: Tensor<f32>) -> Result<ScorerState> {
        let lp = self
            .llm
            .model
            .token_dist(&self.llm.store, h.row_slice(h.rows() - 1))?
            .into_iter()
            .map(f64::ln)
            .collect();
        Ok(ScorerState {
            log_probs: Arc::new(lp),
            cache: Arc::new(st),
        })
    }
}

impl TokenScorer for LmScorer<'_> {
    fn start(&self) -> Result<ScorerState> {
        let prompt = plain_prompt(&self.llm.model.vocab)?;
        let (st, h) = self.llm.model.prefill(&self.llm.store, &prompt.tokens(&self.llm.model.vocab), None)?;
        self.state(st, h)
    }

    fn extend(&self, state: &ScorerState, token: Token) -> Result<ScorerState> {
        let (st, h) = self.llm.model.prefill(&self.llm.store, &[token], Some(cache_of::<LlmState>(state)?))?;
        self.state(st, h)
    }
}

/// Prompt without instruction or user input.
pub fn plain_prompt(vocab: &Vocabulary) -> Result<Prompt> {
    build_prompt(vocab, "", "")
}

/// Weighted additional scorer (shallow fusion).
pub struct ExtraScorer<'a> {
    pub weight: f64,
    pub scorer: &'a dyn TokenScorer,
}

/// One finished hypothesis with its score parts.
#[derive(Clone, Debug, PartialEq)]
pub struct NBestEntry {
    pub tokens: Vec<Token>,
    pub score: f64,
    /// Complete-sequence CTC log-probability.
    pub ctc: f64,
    /// Attention log-probability including the end symbol.
    pub aed: f64,
    /// Unweighted log-probabilities of the extra scorers.
    pub extras: Vec<f64>,
}

/// Finished hypotheses, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct NBest {
    pub entries: Vec<NBestEntry>,
}

impl NBest {
    pub fn best(&self) -> &NBestEntry {
        &self.entries[0]
    }
}

fn weighted(w: f64, v: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * v
    }
}

/// `ξ·ctc + (1−ξ)·aed + Σ β_i·extra_i`, with zero-weight terms dropped.
pub fn joint_score(xi: f64, ctc: f64, aed: f64, extras: &[(f64, f64)]) -> f64 {
    weighted(xi, ctc) + weighted(1.0 - xi, aed) + extras.iter().map(|&(w, v)| weighted(w, v)).sum::<f64>()
}

#[derive(Clone)]
struct Running {
    tokens: Vec<Token>,
    ctc: CtcPrefixState,
    aed: f64,
    extras: Vec<f64>,
    main: ScorerState,
    extra_states: Vec<ScorerState>,
    score: f64,
}

struct Candidate {
    from: usize,
    token: Token,
    score: f64,
    aed: f64,
    extras: Vec<f64>,
}

/// Beam search over symbols and the end symbol scoring each prefix by
/// `ξ·(CTC prefix score) + (1−ξ)·(attention log-prob)` plus weighted extras.
/// `log_emissions` are the CTC log-probabilities (`[T', classes]`). Hypotheses
/// ending in the end symbol leave the beam; the search stops once no running
/// hypothesis beats the best finished one, and the end symbol is forced at
/// length `2·T'`. Ties are broken by beam rank, then token id.
pub fn joint_beam_search(
    log_emissions: &Tensor<f32>,
    scorer: &dyn TokenScorer,
    vocab: &Vocabulary,
    beam: usize,
    xi: f64,
    extras: &[ExtraScorer],
) -> Result<NBest> {
    if beam == 0 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::invalid(format!("CTC weight {xi} outside [0,1]")));
    }
    if extras.iter().any(|e| !(e.weight >= 0.0)) {
        return Err(Error::invalid("extra scorer weights must be non-negative"));
    }
    let ctc = CtcPrefixScorer::new(log_emissions);
    if ctc.classes() != vocab.classes() {
        return Err(Error::invalid("emission width does not match the vocabulary"));
    }
    let max_len = 2 * ctc.frames();
    let eos = vocab.eos();
    let eos_class = vocab.dec_class(eos);
    let mut running = vec![Running {
        tokens: Vec::new(),
        ctc: ctc.init(),
        aed: 0.0,
        extras: vec![0.0; extras.len()],
        main: scorer.start()?,
        extra_states: extras.iter().map(|e| e.scorer.start()).collect::<Result<_>>()?,
        score: 0.0,
    }];
    let mut finished: Vec<NBestEntry> = Vec::new();
    let weights: Vec<f64> = extras.iter().map(|e| e.weight).collect();
    let score_of = |ctc_v: f64, aed: f64, ex: &[f64]| {
        let pairs: Vec<(f64, f64)> = weights.iter().copied().zip(ex.iter().copied()).collect();
        joint_score(xi, ctc_v, aed, &pairs)
    };
    while !running.is_empty() {
        let mut cands: Vec<Candidate> = Vec::new();
        for (r, hyp) in running.iter().enumerate() {
            let ext = ctc.extension_scores(&hyp.ctc);
            let prefix = hyp.ctc.prefix_score();
            let extend_ok = hyp.tokens.len() < max_len;
            for token in 1..=vocab.len() + 1 {
                let is_eos = token == eos;
                if !is_eos && !extend_ok {
                    continue;
                }
                let class = if is_eos { eos_class } else { vocab.dec_class(token) };
                let ctc_v = prefix + if is_eos { ctc.finish_increment(&hyp.ctc) } else { ext[token] };
                let aed = hyp.aed + hyp.main.log_probs[class];
                let ex: Vec<f64> = hyp
                    .extras
                    .iter()
                    .zip(&hyp.extra_states)
                    .map(|(v, st)| v + st.log_probs[class])
                    .collect();
                let score = score_of(ctc_v, aed, &ex);
                if score == f64::NEG_INFINITY || score.is_nan() {
                    continue;
                }
                cands.push(Candidate {
                    from: r,
                    token,
                    score,
                    aed,
                    extras: ex,
                });
            }
        }
        cands.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("finite or +/- inf scores")
                .then(a.from.cmp(&b.from))
                .then(a.token.cmp(&b.token))
        });
        cands.truncate(beam);
        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let hyp = &running[c.from];
            if c.token == eos {
                finished.push(NBestEntry {
                    tokens: hyp.tokens.clone(),
                    score: c.score,
                    ctc: hyp.ctc.complete_score(),
                    aed: c.aed,
                    extras: c.extras,
                });
                continue;
            }
            let (ctc_state, _) = ctc.extend(&hyp.ctc, c.token)?;
            let mut tokens = hyp.tokens.clone();
            tokens.push(c.token);
            next.push(Running {
                tokens,
                ctc: ctc_state,
                aed: c.aed,
                extras: c.extras,
                main: scorer.extend(&hyp.main, c.token)?,
                extra_states: extras
                    .iter()
                    .zip(&hyp.extra_states)
                    .map(|(e, st)| e.scorer.extend(st, c.token))
                    .collect::<Result<_>>()?,
                score: c.score,
            });
        }
        running = next;
        let best_finished = finished.iter().map(|f| f.score).fold(f64::NEG_INFINITY, f64::max);
        let best_running = running.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if !finished.is_empty() && best_running <= best_finished {
            break;
        }
    }
    if finished.is_empty() {
        return Err(Error::invalid("beam search found no hypothesis with finite score"));
    }
    finished.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    finished.truncate(beam);
    Ok(NBest { entries: finished })
}

/// Index of the entry maximizing `score + γ·(plain-prompt LM log-likelihood)`;
/// the first such entry on ties.
pub fn rescore_nbest(nbest: &NBest, llm: &LlmHandle, gamma: f64) -> Result<usize> {
    if nbest.entries.is_empty() {
        return Err(Error::invalid("empty N-best list"));
    }
    if nbest.entries.len() == 1 || gamma == 0.0 {
        return Ok(0);
    }
    let prompt = plain_prompt(&llm.model.vocab)?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, e) in nbest.entries.iter().enumerate() {
        let total = e.score + gamma * llm.model.sequence_loglik(&llm.store, &prompt, &e.tokens)?;
        if total > best.1 {
            best = (i, total);
        }
    }
    Ok(best.0)
}

/// Greedy LM response to the correction prompt around `hypothesis`. Returns
/// the response and whether generation hit `max_len`.
pub fn zero_shot_gec(llm: &LlmHandle, instruction: &str, hypothesis: &[Token], max_len: usize) -> Result<(Vec<Token>, bool)> {
    let vocab = &llm.model.vocab;
    let prompt = Prompt {
        instruction: vocab.encode(instruction)?,
        user_input: hypothesis.to_vec(),
        response: vec![vocab.bos()],
    };
    llm.model.generate(&llm.store, &prompt, max_len)
}

/// Which attention scorer the beam uses.
pub enum AttentionSource<'a> {
    Baseline,
    Guided {
        model: &'a GuidedModel,
        store: &'a ParamStore<f32>,
        featurizer: Option<&'a LlmFeaturizer>,
    },
}

/// Result of decoding one utterance.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub nbest: NBest,
    /// Eval-mode best-path CTC hypothesis (`W̃'`).
    pub ctc_hypothesis: Vec<Token>,
}

/// Encode once in eval mode, take the best-path hypothesis, then run the joint
/// beam with the chosen attention scorer (conditioned on that hypothesis for
/// the guided decoder) and optional shallow fusion.
pub fn decode_utterance(
    asr: &AsrModel,
    asr_store: &ParamStore<f32>,
    source: &AttentionSource,
    features: &Arc<Tensor<f32>>,
    beam: usize,
    xi: f64,
    fusion: Option<(&LlmHandle, f64)>,
) -> Result<Decoded> {
    let (h, lp) = asr.encode_eval(asr_store, features)?;
    let ctc_hypothesis = best_path_decode(&lp);
    let lm = fusion.map(|(l, w)| (LmScorer::new(l), w));
    let extras: Vec<ExtraScorer> = lm
        .iter()
        .map(|(s, w)| ExtraScorer {
            weight: *w,
            scorer: s as &dyn TokenScorer,
        })
        .collect();
    let nbest = match source {
        AttentionSource::Baseline => {
            let scorer = AedScorer::new(asr, asr_store, &h)?;
            joint_beam_search(&lp, &scorer, &asr.vocab, beam, xi, &extras)?
        }
        AttentionSource::Guided { model, store, featurizer } => {
            let scorer = GuidedScorer::new(model, store, *featurizer, &ctc_hypothesis, &h)?;
            joint_beam_search(&lp, &scorer, &asr.vocab, beam, xi, &extras)?
        }
    };
    Ok(Decoded { nbest, ctc_hypothesis })
}
