//! CTC alignment lattice.
//!
//! Emission matrices are `[frames, classes]` log-probabilities where class `0`
//! is the blank and classes `1..` are symbol ids. Lattice recursions run in
//! log space and accumulate in `f64`.

use gasr_tensor::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::vocab::{Token, Vocabulary, BLANK};

pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Merge repeated runs, then drop blanks.
pub fn collapse(alignment: &[Token]) -> Vec<Token> {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in alignment {
        if Some(a) != prev && a != BLANK {
            out.push(a);
        }
        prev = Some(a);
    }
    out
}

fn check_feasible(frames: usize, target: &[Token]) -> Result<()> {
    let needed = Vocabulary::min_ctc_frames(target);
    if frames < needed {
        return Err(Error::InfeasibleTarget {
            target: target.len(),
            repeats: Vocabulary::adjacent_repeats(target),
            needed,
            frames,
        });
    }
    Ok(())
}

/// CTC negative log-likelihood and its gradient with respect to the
/// log-emission matrix.
#[derive(Clone, Debug)]
pub struct CtcLoss<F: Real> {
    pub loss: f64,
    pub grad: Tensor<F>,
}

/// Forward–backward over the `2N+1`-state blank-augmented lattice.
///
/// The gradient treats every log-emission entry as a free variable, so it is
/// minus the posterior occupancy of that (frame, class) cell.
pub fn ctc_loss<F: Real>(log_emissions: &Tensor<F>, target: &[Token]) -> Result<CtcLoss<F>> {
    let (frames, classes) = (log_emissions.rows(), log_emissions.cols());
    if let Some(&bad) = target.iter().find(|&&t| t == BLANK || t >= classes) {
        return Err(Error::invalid(format!("target symbol {bad} is blank or outside {classes} classes")));
    }
    check_feasible(frames, target)?;
    let x = |t: usize, k: usize| log_emissions.data()[t * classes + k].as_f64();
    let states = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { BLANK } else { target[s / 2] };
    // Skip transition s-2 -> s is allowed into a symbol differing from the previous symbol.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * states];
    alpha[0] = x(0, BLANK);
    if states > 1 {
        alpha[1] = x(0, label(1));
    }
    for t in 1..frames {
        for s in 0..states {
            let prev = &alpha[(t - 1) * states..t * states];
            let mut a = prev[s];
            if s >= 1 {
                a = logaddexp(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = logaddexp(a, prev[s - 2]);
            }
            alpha[t * states + s] = if a == ninf { ninf } else { a + x(t, label(s)) };
        }
    }
    let last = (frames - 1) * states;
    let mut log_p = alpha[last + states - 1];
    if states > 1 {
        log_p = logaddexp(log_p, alpha[last + states - 2]);
    }

    let mut beta = vec![ninf; frames * states];
    beta[last + states - 1] = x(frames - 1, label(states - 1));
    if states > 1 {
        beta[last + states - 2] = x(frames - 1, label(states - 2));
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = &beta[(t + 1) * states..(t + 2) * states];
            let mut b = next[s];
            if s + 1 < states {
                b = logaddexp(b, next[s + 1]);
            }
            if s + 2 < states && can_skip(s + 2) {
                b = logaddexp(b, next[s + 2]);
            }
            beta[t * states + s] = if b == ninf { ninf } else { b + x(t, label(s)) };
        }
    }

    // alpha and beta both include the emission at t, so occupancy subtracts it once.
    let mut grad = vec![F::zero(); frames * classes];
    for t in 0..frames {
        let mut occ = vec![ninf; classes];
        for s in 0..states {
            let ab = alpha[t * states + s] + beta[t * states + s];
            if ab > ninf {
                let k = label(s);
                occ[k] = logaddexp(occ[k], ab - x(t, k));
            }
        }
        for k in 0..classes {
            if occ[k] > ninf {
                grad[t * classes + k] = F::lit(-(occ[k] - log_p).exp());
            }
        }
    }
    if !log_p.is_finite() {
        return Err(Error::invalid("CTC likelihood underflowed to zero"));
    }
    Ok(CtcLoss {
        loss: -log_p,
        grad: Tensor::new(log_emissions.shape().to_vec(), grad)?,
    })
}

/// CTC loss as a graph node over `log_emissions` (a `[frames, classes]`
/// log-softmax output).
pub fn ctc_loss_node<F: Real>(g: &mut Graph<F>, log_emissions: Var, target: &[Token]) -> Result<Var> {
    let out = ctc_loss(g.value(log_emissions), target)?;
    Ok(g.external_scalar(log_emissions, F::lit(out.loss), out.grad)?)
}

/// Per-frame argmax (lowest class on ties, so blank wins ties), collapsed.
pub fn best_path_decode<F: Real>(log_emissions: &Tensor<F>) -> Vec<Token> {
    let path: Vec<Token> = (0..log_emissions.rows())
        .map(|t| {
            let row = log_emissions.row_slice(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

fn increment(new: f64, old: f64) -> f64 {
    if new == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        new - old
    }
}

/// Prefix-probability state of one hypothesis: per-frame log-probabilities of
/// having emitted exactly the prefix by frame `t` and ending in a non-blank
/// (`r_nb`) or a blank (`r_b`).
#[derive(Clone, Debug)]
pub struct CtcPrefixState {
    r_nb: Vec<f64>,
    r_b: Vec<f64>,
    last: Option<Token>,
    /// Log-probability that the labeling starts with this prefix.
    prefix_score: f64,
}

impl CtcPrefixState {
    pub fn prefix_score(&self) -> f64 {
        self.prefix_score
    }

    pub fn last(&self) -> Option<Token> {
        self.last
    }

    /// Log-probability that the labeling is exactly this prefix.
    pub fn complete_score(&self) -> f64 {
        let t = self.r_b.len() - 1;
        logaddexp(self.r_nb[t], self.r_b[t])
    }
}

/// One-pass label-prefix scoring over a fixed emission matrix, used by joint
/// CTC/attention beam search.
#[derive(Clone, Debug)]
pub struct CtcPrefixScorer {
    frames: usize,
    classes: usize,
    log_emissions: Vec<f64>,
}

impl CtcPrefixScorer {
    pub fn new<F: Real>(log_emissions: &Tensor<F>) -> Self {
        CtcPrefixScorer {
            frames: log_emissions.rows(),
            classes: log_emissions.cols(),
            log_emissions: log_emissions.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn x(&self, t: usize, k: usize) -> f64 {
        self.log_emissions[t * self.classes + k]
    }

    /// State of the empty prefix.
    pub fn init(&self) -> CtcPrefixState {
        let mut r_b = Vec::with_capacity(self.frames);
        let mut acc = 0.0;
        for t in 0..self.frames {
            acc += self.x(t, BLANK);
            r_b.push(acc);
        }
        CtcPrefixState {
            r_nb: vec![f64::NEG_INFINITY; self.frames],
            r_b,
            last: None,
            prefix_score: 0.0,
        }
    }

    fn extend_impl(&self, state: &CtcPrefixState, token: Token, keep: bool) -> (Option<CtcPrefixState>, f64) {
        let ninf = f64::NEG_INFINITY;
        let n = self.frames;
        let mut r_nb = if keep { Vec::with_capacity(n) } else { Vec::new() };
        let mut r_b = if keep { Vec::with_capacity(n) } else { Vec::new() };
        let mut nb = if state.last.is_none() { self.x(0, token) } else { ninf };
        let mut b = ninf;
        let mut psi = nb;
        if keep {
            r_nb.push(nb);
            r_b.push(b);
        }
        for t in 1..n {
            let phi = if state.last == Some(token) {
                state.r_b[t - 1]
            } else {
                logaddexp(state.r_b[t - 1], state.r_nb[t - 1])
            };
            let xc = self.x(t, token);
            let new_nb = logaddexp(nb, phi) + xc;
            let new_b = logaddexp(b, nb) + self.x(t, BLANK);
            psi = logaddexp(psi, phi + xc);
            nb = new_nb;
            b = new_b;
            if keep {
                r_nb.push(nb);
                r_b.push(b);
            }
        }
        let next = keep.then(|| CtcPrefixState {
            r_nb,
            r_b,
            last: Some(token),
            prefix_score: psi,
        });
        (next, psi)
    }

    /// Extend with a non-blank symbol. Returns the new state and the
    /// increment of the prefix log-probability.
    pub fn extend(&self, state: &CtcPrefixState, token: Token) -> Result<(CtcPrefixState, f64)> {
        self.check_token(token)?;
        let (next, psi) = self.extend_impl(state, token, true);
        Ok((next.expect("kept"), increment(psi, state.prefix_score)))
    }

    /// Prefix score increments for every symbol class `1..classes` at once
    /// (index 0, the blank, is left at `-inf`).
    pub fn extension_scores(&self, state: &CtcPrefixState) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.classes];
        for (k, o) in out.iter_mut().enumerate().skip(1) {
            *o = increment(self.extend_impl(state, k, false).1, state.prefix_score);
        }
        out
    }

    /// Increment for ending the hypothesis: moves from prefix mass to the
    /// exact-labeling mass.
    pub fn finish_increment(&self, state: &CtcPrefixState) -> f64 {
        increment(state.complete_score(), state.prefix_score)
    }

    fn check_token(&self, token: Token) -> Result<()> {
        if token == BLANK {
            return Err(Error::invalid("cannot extend a CTC prefix with the blank"));
        }
        if token >= self.classes {
            return Err(Error::invalid(format!("token {token} outside {} CTC classes", self.classes)));
        }
        Ok(())
    }

    /// `log p_ctc(tokens | O)` via prefix extension.
    pub fn sequence_score(&self, tokens: &[Token]) -> Result<f64> {
        let mut state = self.init();
        let mut total = 0.0;
        for &t in tokens {
            let (next, inc) = self.extend(&state, t)?;
            total += inc;
            state = next;
        }
        Ok(total + self.finish_increment(&state))
    }
}
