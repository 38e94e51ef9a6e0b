//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod composite;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use gasr_core::ctc::{collapse, logaddexp};
use gasr_core::search::{ScorerState, TokenScorer};
use gasr_core::{Result, Token, Vocabulary};
use gasr_tensor::Tensor;
use rand::Rng;

/// Random `[frames, classes]` rows of log-probabilities.
pub fn random_log_softmax(rng: &mut impl Rng, frames: usize, classes: usize) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[frames, classes], |_| rng.gen_range(-2.0..2.0));
    for r in 0..frames {
        let row = &mut t.data_mut()[r * classes..(r + 1) * classes];
        let lse = row.iter().fold(f64::NEG_INFINITY, |a, &b| logaddexp(a, b));
        row.iter_mut().for_each(|v| *v -= lse);
    }
    t
}

pub fn to_f32(t: &Tensor<f64>) -> Tensor<f32> {
    Tensor::from_fn(t.shape(), |i| t.data()[i] as f32)
}

pub fn to_f64(t: &Tensor<f32>) -> Tensor<f64> {
    Tensor::from_fn(t.shape(), |i| t.data()[i] as f64)
}

/// log P(target) summed over every frame alignment (exponential; tiny inputs only).
pub fn brute_force_ctc(le: &Tensor<f64>, target: &[Token]) -> f64 {
    let (frames, classes) = (le.rows(), le.cols());
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path) == target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| le.get2(t, k)).sum();
            total = logaddexp(total, lp);
        }
        let mut i = 0;
        loop {
            if i == frames {
                return total;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Attention stand-in: a fixed pseudo-random distribution over decoder
/// classes for every prefix, derived from a hash of the prefix.
pub struct TableScorer {
    pub classes: usize,
    pub seed: u64,
}

impl TableScorer {
    pub fn dist(&self, prefix: &[Token]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut state = h.finish() | 1;
        let logits: Vec<f64> = (0..self.classes)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 10_000) as f64 / 2_500.0
            })
            .collect();
        let lse = logits.iter().fold(f64::NEG_INFINITY, |a, &b| logaddexp(a, b));
        logits.iter().map(|l| l - lse).collect()
    }

    /// Sum of per-token log-probabilities of `tokens` followed by the end symbol.
    pub fn sequence(&self, vocab: &Vocabulary, tokens: &[Token]) -> f64 {
        let mut total = 0.0;
        for n in 0..tokens.len() {
            total += self.dist(&tokens[..n])[vocab.dec_class(tokens[n])];
        }
        total + self.dist(tokens)[vocab.dec_class(vocab.eos())]
    }
}

impl TokenScorer for TableScorer {
    fn start(&self) -> Result<ScorerState> {
        Ok(ScorerState {
            log_probs: Arc::new(self.dist(&[])),
            cache: Arc::new(Vec::<Token>::new()),
        })
    }

    fn extend(&self, state: &ScorerState, token: Token) -> Result<ScorerState> {
        let mut prefix = state.cache.downcast_ref::<Vec<Token>>().expect("table scorer state").clone();
        prefix.push(token);
        Ok(ScorerState {
            log_probs: Arc::new(self.dist(&prefix)),
            cache: Arc::new(prefix),
        })
    }
}

/// Every symbol sequence of length at most `max_len`.
pub fn all_sequences(symbols: usize, max_len: usize) -> Vec<Vec<Token>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for t in 1..=symbols {
                let mut e: Vec<Token> = s.clone();
                e.push(t);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Argmax of `ξ·ctc + (1−ξ)·aed` over every sequence up to `2·T'` symbols.
pub fn exhaustive_best(le: &Tensor<f64>, scorer: &TableScorer, vocab: &Vocabulary, xi: f64) -> (Vec<Token>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for seq in all_sequences(vocab.len(), 2 * le.rows()) {
        let ctc = brute_force_ctc(le, &seq);
        let aed = scorer.sequence(vocab, &seq);
        let mut score = 0.0;
        if xi != 0.0 {
            score += xi * ctc;
        }
        if xi != 1.0 {
            score += (1.0 - xi) * aed;
        }
        if score > best.1 {
            best = (seq, score);
        }
    }
    best
}

/// Word-level Levenshtein distance by the full quadratic table.
pub fn word_distance(reference: &str, hypothesis: &str) -> usize {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h.len() {
        d[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[r.len()][h.len()]
}

/// Corpus WER with lowercasing and whitespace collapsing.
pub fn reference_wer(refs: &[String], hyps: &[String]) -> f64 {
    let (mut errors, mut words) = (0, 0);
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (r.to_lowercase(), h.to_lowercase());
        errors += word_distance(&r, &h);
        words += r.split_whitespace().count();
    }
    errors as f64 / words as f64
}

/// A target of at most three symbols that fits in `frames` CTC frames.
pub fn random_feasible_target(rng: &mut impl Rng, frames: usize, classes: usize) -> Vec<Token> {
    loop {
        let n = rng.gen_range(0..=3);
        let target: Vec<Token> = (0..n).map(|_| rng.gen_range(1..classes)).collect();
        if Vocabulary::min_ctc_frames(&target) <= frames {
            return target;
        }
    }
}
