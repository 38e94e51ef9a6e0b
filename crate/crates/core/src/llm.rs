//! Small character-level decoder-only language model with instruction
//! prompts, plus its pretraining on correction triples.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use gasr_tensor::{Graph, Mode, ParamId, ParamStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{add_positional_encoding, BlockConfig, KeyValues, KvCache, LayerNorm, Linear, SelfAttnBlock, AttnMask};
use crate::synth::derive_seed;
use crate::train::{Optimizer, TrainConfig};
use crate::vocab::{Token, Vocabulary, BOS_LITERAL, EOS_LITERAL, QUOTE, SEPARATOR};

/// Grammatical-error-correction instruction.
pub const GEC_INSTRUCTION: &str =
    "You will be provided with a statement in quotes. Correct the wrong words and provide your revised version.";

/// Mismatched-task instruction.
pub const TRANSLATE_INSTRUCTION: &str =
    "You will be provided with a statement in quotes, and your task is to translate it into Japanese.";

/// Double every quote character.
pub fn escape_user_input(text: &str) -> String {
    text.replace(QUOTE, "\"\"")
}

fn user_segment(user: &str) -> String {
    format!("{QUOTE}{}{QUOTE}{SEPARATOR}", escape_user_input(user))
}

/// Serialized prompt text that precedes the start symbol.
pub fn prompt_prefix_text(instruction: &str, user: &str) -> String {
    let mut s = String::new();
    if !instruction.is_empty() {
        s.push_str(instruction);
        s.push(SEPARATOR);
    }
    if !instruction.is_empty() || !user.is_empty() {
        s.push_str(&user_segment(user));
    }
    s
}

pub fn serialize_triple_line(instruction: &str, corrupted: &str, clean: &str) -> String {
    format!("{}{BOS_LITERAL}{clean}{EOS_LITERAL}", prompt_prefix_text(instruction, corrupted))
}

pub fn serialize_plain_line(clean: &str) -> String {
    format!("{BOS_LITERAL}{clean}{EOS_LITERAL}")
}

/// Instruction, user input and response prefix (starting at the start symbol).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub instruction: Vec<Token>,
    pub user_input: Vec<Token>,
    pub response: Vec<Token>,
}

pub fn build_prompt(vocab: &Vocabulary, instruction: &str, user_input: &str) -> Result<Prompt> {
    Ok(Prompt {
        instruction: vocab.encode(instruction)?,
        user_input: vocab.encode(user_input)?,
        response: vec![vocab.bos()],
    })
}

impl Prompt {
    /// Serialized instruction and quoted user input.
    pub fn prefix(&self, vocab: &Vocabulary) -> Vec<Token> {
        let sep = vocab.symbol(SEPARATOR).expect("separator in vocabulary");
        let quote = vocab.symbol(QUOTE).expect("quote in vocabulary");
        let mut out = Vec::new();
        if !self.instruction.is_empty() {
            out.extend_from_slice(&self.instruction);
            out.push(sep);
        }
        if !self.instruction.is_empty() || !self.user_input.is_empty() {
            out.push(quote);
            for &t in &self.user_input {
                out.push(t);
                if t == quote {
                    out.push(quote);
                }
            }
            out.push(quote);
            out.push(sep);
        }
        out
    }

    pub fn tokens(&self, vocab: &Vocabulary) -> Vec<Token> {
        let mut t = self.prefix(vocab);
        t.extend_from_slice(&self.response);
        t
    }

    pub fn with_response(&self, response: Vec<Token>) -> Prompt {
        Prompt {
            response,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    pub block: BlockConfig,
    /// Maximum serialized length in tokens.
    pub context: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            block: BlockConfig {
                dim: 96,
                heads: 4,
                ff_dim: 192,
                keep: 0.9,
                layers: 2,
            },
            context: 512,
        }
    }
}

/// Keys/values of every layer for an already consumed token sequence.
#[derive(Clone, Debug)]
pub struct LlmState {
    pub caches: Vec<KvCache<f32>>,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct ToyLlm {
    pub cfg: LlmConfig,
    pub vocab: Vocabulary,
    pub embed: ParamId,
    pub blocks: Vec<SelfAttnBlock>,
    pub ln: LayerNorm,
    pub head: Linear,
}

impl ToyLlm {
    pub fn new<F: Real>(cfg: &LlmConfig, vocab: &Vocabulary, store: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        cfg.block.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.block.dim;
        let embed = store.add("llm.embed", gasr_tensor::init::normal(&mut rng, &[vocab.embed_rows(), d], 0.02))?;
        let blocks = (0..cfg.block.layers)
            .map(|i| SelfAttnBlock::new(store, &format!("llm.block{i}"), &cfg.block, &mut rng))
            .collect::<Result<_>>()?;
        Ok(ToyLlm {
            cfg: cfg.clone(),
            vocab: vocab.clone(),
            embed,
            blocks,
            ln: LayerNorm::new(store, "llm.ln", d)?,
            head: Linear::new(store, "llm.head", d, vocab.classes(), &mut rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.block.dim
    }

    fn check_context(&self, len: usize) -> Result<()> {
        if len > self.cfg.context {
            return Err(Error::ContextOverflow {
                len,
                limit: self.cfg.context,
            });
        }
        Ok(())
    }

    /// Final hidden states for `tokens` at positions `start..`, continuing
    /// `past` keys/values. Returns the hidden rows and per-layer keys/values
    /// covering everything consumed so far.
    pub fn hidden<F: Real>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        tokens: &[Token],
        start: usize,
        past: Option<&[KeyValues]>,
    ) -> Result<(Var, Vec<KeyValues>)> {
        self.check_context(start + tokens.len())?;
        let rows: Vec<usize> = tokens.iter().map(|&t| self.vocab.embed_row(t)).collect();
        if rows.iter().any(|&r| r >= self.vocab.embed_rows()) {
            return Err(Error::invalid("language model input contains the end symbol"));
        }
        let table = g.param(s, self.embed);
        let e = g.embedding(table, &rows)?;
        let e = g.scale(e, F::lit((self.dim() as f64).sqrt()))?;
        let e = add_positional_encoding(g, e, start)?;
        let mut x = g.dropout(e, F::lit(self.cfg.block.keep))?;
        let mut kvs = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, kv) = b.forward_cached(g, s, x, past.map(|p| p[i]), AttnMask::Causal { offset: start })?;
            x = y;
            kvs.push(kv);
        }
        Ok((self.ln.forward(g, s, x)?, kvs))
    }

    /// Log-distribution over symbols and the end symbol for hidden rows.
    pub fn log_probs<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, hidden: Var) -> Result<Var> {
        let logits = self.head.forward(g, s, hidden)?;
        Ok(g.log_softmax(logits)?)
    }

    /// Eval-mode consumption of `tokens` after `past`.
    pub fn prefill(&self, s: &ParamStore<f32>, tokens: &[Token], past: Option<&LlmState>) -> Result<(LlmState, Tensor<f32>)> {
        let mut g = Graph::inference();
        let start = past.map_or(0, |p| p.len);
        let bound: Option<Vec<KeyValues>> = past.map(|p| p.caches.iter().map(|c| c.bind(&mut g)).collect());
        let (h, kvs) = self.hidden(&mut g, s, tokens, start, bound.as_deref())?;
        let state = LlmState {
            caches: kvs.into_iter().map(|kv| KvCache::capture(&g, kv)).collect(),
            len: start + tokens.len(),
        };
        Ok((state, g.value(h).clone()))
    }

    /// One feature vector per response position, computed with full causal
    /// context over the serialized prompt.
    pub fn llm_hidden(&self, s: &ParamStore<f32>, prompt: &Prompt) -> Result<Tensor<f32>> {
        let prefix = prompt.prefix(&self.vocab);
        let mut all = prefix.clone();
        all.extend_from_slice(&prompt.response);
        let (_, h) = self.prefill(s, &all, None)?;
        Ok(h.slice_rows(prefix.len(), prompt.response.len())?)
    }

    /// Distribution over decoder classes from one feature vector.
    pub fn token_dist(&self, s: &ParamStore<f32>, feature: &[f32]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let e = g.constant(Tensor::row(feature.to_vec())?);
        let lp = self.log_probs(&mut g, s, e)?;
        Ok(g.value(lp).data().iter().map(|&v| (v as f64).exp()).collect())
    }

    /// `Σ log p(w_n | W_<n, prompt)` including the end symbol.
    pub fn sequence_loglik<F: Real>(&self, s: &ParamStore<F>, prompt: &Prompt, words: &[Token]) -> Result<f64> {
        let mut response = vec![self.vocab.bos()];
        response.extend_from_slice(words);
        let p = prompt.with_response(response);
        let mut g = Graph::no_grad(Mode::Eval, 0);
        let tokens = p.tokens(&self.vocab);
        let start = tokens.len() - p.response.len();
        let (h, _) = self.hidden(&mut g, s, &tokens, 0, None)?;
        let h = g.slice(h, 0, start, p.response.len())?;
        let lp = self.log_probs(&mut g, s, h)?;
        let mut targets: Vec<usize> = words.iter().map(|&t| self.vocab.dec_class(t)).collect();
        targets.push(self.vocab.dec_class(self.vocab.eos()));
        let t = g.value(lp);
        Ok(targets.iter().enumerate().map(|(r, &c)| t.get2(r, c).as_f64()).sum())
    }

    /// Greedy continuation until the end symbol or `max_len` symbols.
    /// Returns the response and whether it was truncated.
    pub fn generate(&self, s: &ParamStore<f32>, prompt: &Prompt, max_len: usize) -> Result<(Vec<Token>, bool)> {
        let tokens = prompt.tokens(&self.vocab);
        let (mut state, h) = self.prefill(s, &tokens, None)?;
        let mut last = h.slice_rows(h.rows() - 1, 1)?;
        let mut out = Vec::new();
        loop {
            let dist = self.token_dist(s, last.data())?;
            let mut best = 0;
            for (k, &p) in dist.iter().enumerate() {
                if p > dist[best] {
                    best = k;
                }
            }
            let token = self.vocab.dec_token(best);
            if token == self.vocab.eos() {
                return Ok((out, false));
            }
            if out.len() == max_len || state.len + 1 > self.cfg.context {
                return Ok((out, true));
            }
            out.push(token);
            let (next, h) = self.prefill(s, &[token], Some(&state))?;
            state = next;
            last = h;
        }
    }
}

/// One pretraining sequence split into the instruction part, which is shared
/// by every sequence with the same instruction, and the rest. The loss covers
/// the positions from the start symbol on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmSequence {
    pub shared: Vec<Token>,
    pub rest: Vec<Token>,
    /// Index of the start symbol in `rest`.
    pub response_start: usize,
}

impl LmSequence {
    /// Symbols of the response (without specials).
    pub fn response(&self) -> &[Token] {
        &self.rest[self.response_start + 1..self.rest.len() - 1]
    }

    /// User input tokens (unescaped), empty for plain sentences.
    pub fn user_input(&self, vocab: &Vocabulary) -> Vec<Token> {
        let quote = vocab.symbol(QUOTE).expect("quote");
        if self.response_start < 3 {
            return Vec::new();
        }
        let inner = &self.rest[1..self.response_start - 2];
        let mut out = Vec::new();
        let mut i = 0;
        while i < inner.len() {
            out.push(inner[i]);
            i += if inner[i] == quote { 2 } else { 1 };
        }
        out
    }

    pub fn targets(&self, vocab: &Vocabulary) -> Vec<usize> {
        self.rest[self.response_start + 1..].iter().map(|&t| vocab.dec_class(t)).collect()
    }
}

pub fn parse_corpus_line(vocab: &Vocabulary, line: &str) -> Result<LmSequence> {
    let tokens = vocab.encode_with_specials(line)?;
    let bos = tokens
        .iter()
        .position(|&t| t == vocab.bos())
        .ok_or_else(|| Error::Parse(format!("corpus line without start symbol: {line}")))?;
    if tokens.last() != Some(&vocab.eos()) || tokens[bos + 1..tokens.len() - 1].iter().any(|&t| !vocab.is_symbol(t)) {
        return Err(Error::Parse(format!("corpus line must end its response with the end symbol: {line}")));
    }
    let sep = vocab.symbol(SEPARATOR).expect("separator");
    let quote = vocab.symbol(QUOTE).expect("quote");
    // An instruction is present when the prefix does not begin with the quoted segment.
    let split = if bos == 0 || tokens[0] == quote {
        0
    } else {
        tokens[..bos]
            .iter()
            .position(|&t| t == sep)
            .map(|p| p + 1)
            .ok_or_else(|| Error::Parse(format!("instruction without separator: {line}")))?
    };
    Ok(LmSequence {
        shared: tokens[..split].to_vec(),
        rest: tokens[split..].to_vec(),
        response_start: bos - split,
    })
}

pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<LmSequence>> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.display().to_string(),
                stage: "synth-data".into(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    text.lines().filter(|l| !l.is_empty()).map(|l| parse_corpus_line(vocab, l)).collect()
}

impl ToyLlm {
    /// Summed response cross-entropy of a group of sequences sharing one
    /// instruction part, with the instruction computed once. Returns the loss
    /// node and the number of predicted tokens.
    pub fn group_loss<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, group: &[&LmSequence]) -> Result<(Var, usize)> {
        let shared = &group.first().ok_or_else(|| Error::invalid("empty group"))?.shared;
        let past = if shared.is_empty() {
            None
        } else {
            Some(self.hidden(g, s, shared, 0, None)?.1)
        };
        let mut terms = Vec::with_capacity(group.len());
        let mut count = 0;
        for seq in group {
            if &seq.shared != shared {
                return Err(Error::invalid("group mixes instruction prefixes"));
            }
            let (h, _) = self.hidden(g, s, &seq.rest[..seq.rest.len() - 1], shared.len(), past.as_deref())?;
            let n = seq.rest.len() - 1 - seq.response_start;
            let h = g.slice(h, 0, seq.response_start, n)?;
            let lp = self.log_probs(g, s, h)?;
            let targets = seq.targets(&self.vocab);
            terms.push(g.cross_entropy(lp, &targets)?);
            count += targets.len();
        }
        let total = if terms.len() == 1 { terms[0] } else { let c = g.concat(&terms, 0)?; g.sum(c)? };
        Ok((total, count))
    }

    /// Total response negative log-likelihood and token count in eval mode.
    pub fn response_nll(&self, s: &ParamStore<f32>, seqs: &[LmSequence]) -> Result<(f64, usize)> {
        let (mut nll, mut n) = (0.0, 0);
        for chunk in group_batches(seqs, 32) {
            let refs: Vec<&LmSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let mut g = Graph::no_grad(Mode::Eval, 0);
            let (loss, count) = self.group_loss(&mut g, s, &refs)?;
            nll += g.value(loss).item() as f64;
            n += count;
        }
        Ok((nll, n))
    }
}

/// Indices grouped by shared instruction part, chunked into batches.
pub fn group_batches(seqs: &[LmSequence], batch: usize) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<&[Token], Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        groups.entry(&s.shared).or_default().push(i);
    }
    groups.values().flat_map(|v| v.chunks(batch).map(|c| c.to_vec())).collect()
}

/// Perplexity of held-out response tokens under an add-one unigram fit on the
/// training responses.
pub fn unigram_perplexity(vocab: &Vocabulary, train: &[LmSequence], heldout: &[LmSequence]) -> f64 {
    let mut counts = vec![1.0; vocab.classes()];
    for s in train {
        for c in s.targets(vocab) {
            counts[c] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let (mut nll, mut n) = (0.0, 0usize);
    for s in heldout {
        for c in s.targets(vocab) {
            nll -= (counts[c] / total).ln();
            n += 1;
        }
    }
    (nll / n.max(1) as f64).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmEpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_ppl: f64,
}

impl LmEpochRow {
    pub const HEADER: [&'static str; 3] = ["epoch", "train_nll_per_token", "heldout_ppl"];

    pub fn cells(&self) -> Vec<String> {
        vec![self.epoch.to_string(), crate::train::fmt_f(self.train_loss), crate::train::fmt_f(self.heldout_ppl)]
    }
}

/// Next-token training on response positions. Each minibatch holds sequences
/// with the same instruction and averages over predicted tokens.
pub fn pretrain_llm(
    model: &ToyLlm,
    store: &mut ParamStore<f32>,
    train: &[LmSequence],
    heldout: &[LmSequence],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&LmEpochRow),
) -> Result<Vec<LmEpochRow>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty LM corpus"));
    }
    for s in train.iter().chain(heldout) {
        model.check_context(s.shared.len() + s.rest.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "llm-batches"));
    let steps_per_epoch = group_batches(train, cfg.batch_size).len();
    let mut opt = Optimizer::new(cfg, store, steps_per_epoch * cfg.epochs);
    let mut last_good = store.clone();
    let mut rows = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<LmSequence> = order.iter().map(|&i| train[i].clone()).collect();
        let mut batches = group_batches(&shuffled, cfg.batch_size);
        batches.shuffle(&mut rng);
        let (mut nll, mut count) = (0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let refs: Vec<&LmSequence> = batch.iter().map(|&i| &shuffled[i]).collect();
            let mut g = Graph::new(Mode::Train, derive_seed(seed, &format!("llm:{epoch}:{b}")));
            let step = model.group_loss(&mut g, store, &refs).and_then(|(loss, n)| {
                let mean = g.scale(loss, 1.0 / n as f32)?;
                Ok((loss, n, mean))
            });
            let (loss, n, mean) = match step {
                Ok(v) if g.value(v.2).is_finite() => v,
                _ => {
                    *store = last_good;
                    return Err(Error::Diverged { epoch });
                }
            };
            g.backward(mean, &mut [store])?;
            if opt.step(store).is_err() {
                *store = last_good;
                return Err(Error::Diverged { epoch });
            }
            nll += g.value(loss).item() as f64;
            count += n;
        }
        let heldout_ppl = if heldout.is_empty() {
            f64::NAN
        } else {
            let (h, n) = model.response_nll(store, heldout)?;
            (h / n as f64).exp()
        };
        let row = LmEpochRow {
            epoch,
            train_loss: nll / count as f64,
            heldout_ppl,
        };
        on_epoch(&row);
        rows.push(row);
        last_good = store.clone();
    }
    Ok(rows)
}

/// Greedy-correction exact match on held-out triples, and the exact match of
/// returning the corrupted input unchanged.
pub fn correction_accuracy(model: &ToyLlm, s: &ParamStore<f32>, heldout: &[LmSequence], instruction: &str) -> Result<(f64, f64)> {
    let vocab = &model.vocab;
    let (mut hits, mut copies, mut n) = (0, 0, 0);
    for seq in heldout.iter().filter(|s| !s.shared.is_empty()) {
        let user = seq.user_input(vocab);
        let prompt = Prompt {
            instruction: vocab.encode(instruction)?,
            user_input: user.clone(),
            response: vec![vocab.bos()],
        };
        let (out, _) = model.generate(s, &prompt, seq.response().len() + 20)?;
        hits += usize::from(out == seq.response());
        copies += usize::from(user == seq.response());
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok((hits as f64 / n, copies as f64 / n))
}

/// Shared handle for scorers that need the model and its parameters.
#[derive(Clone, Debug)]
pub struct LlmHandle {
    pub model: Arc<ToyLlm>,
    pub store: Arc<ParamStore<f32>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_serialization() {
        let v = Vocabulary::default();
        let p = build_prompt(&v, GEC_INSTRUCTION, "teh cat").unwrap();
        let text = v.decode(&p.tokens(&v));
        assert_eq!(text, format!("{GEC_INSTRUCTION}|\"teh cat\"|⟨s⟩"));
        let empty = build_prompt(&v, "", "").unwrap();
        assert_eq!(empty.tokens(&v), vec![v.bos()]);
        let quoted = build_prompt(&v, "", "say \"hi\"").unwrap();
        assert_eq!(v.decode(&quoted.prefix(&v)), "\"say \"\"hi\"\"\"|");
        let no_user = build_prompt(&v, GEC_INSTRUCTION, "").unwrap();
        assert!(v.decode(&no_user.prefix(&v)).ends_with("|\"\"|"));
        assert!(build_prompt(&v, "ü", "").is_err());
    }

    #[test]
    fn corpus_lines_round_trip() {
        let v = Vocabulary::default();
        let line = serialize_triple_line(GEC_INSTRUCTION, "a \"b", "ab");
        let seq = parse_corpus_line(&v, &line).unwrap();
        assert_eq!(v.decode(&seq.shared), format!("{GEC_INSTRUCTION}|"));
        assert_eq!(v.decode(seq.response()), "ab");
        assert_eq!(v.decode(&seq.user_input(&v)), "a \"b");
        let plain = parse_corpus_line(&v, &serialize_plain_line("xy")).unwrap();
        assert!(plain.shared.is_empty());
        assert_eq!(plain.response_start, 0);
        assert_eq!(plain.targets(&v).len(), 3);
        assert!(parse_corpus_line(&v, "abc").is_err());
    }
}
