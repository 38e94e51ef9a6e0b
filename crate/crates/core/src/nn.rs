//! Transformer building blocks and the subsampling frontend.

use std::sync::Arc;

use gasr_tensor::{init, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Width, head count, feed-forward width, dropout keep probability and depth
/// of a block stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub keep: f64,
    pub layers: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ff_dim == 0 || self.layers == 0 {
            return Err(Error::Config(format!("block sizes must be positive: {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.dim, self.heads)));
        }
        if !(self.keep > 0.0 && self.keep <= 1.0) {
            return Err(Error::Config(format!("keep probability {} not in (0,1]", self.keep)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = store.add(format!("{name}.w"), init::xavier_uniform(rng, din, dout))?;
        let b = store.add(format!("{name}.b"), init::zeros(&[1, dout]))?;
        Ok(Linear { w, b, din, dout })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), init::ones(&[1, dim]))?;
        let bias = store.add(format!("{name}.bias"), init::zeros(&[1, dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<Var> {
        let gain = g.param(s, self.gain);
        let bias = g.param(s, self.bias);
        Ok(g.layer_norm(x, gain, bias, F::lit(LN_EPS))?)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize, ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, ff, rng)?,
            down: Linear::new(store, &format!("{name}.down"), ff, dim, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, s, h)
    }
}

/// Projected keys and values (`[len, dim]` each) ready to be attended to.
#[derive(Clone, Copy, Debug)]
pub struct KeyValues {
    pub k: Var,
    pub v: Var,
}

/// Keys and values detached from any graph, for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache<F: Real> {
    pub k: Arc<Tensor<F>>,
    pub v: Arc<Tensor<F>>,
}

impl<F: Real> KvCache<F> {
    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capture(g: &Graph<F>, kv: KeyValues) -> Self {
        KvCache {
            k: g.shared_value(kv.k),
            v: g.shared_value(kv.v),
        }
    }

    pub fn bind(&self, g: &mut Graph<F>) -> KeyValues {
        KeyValues {
            k: g.constant_shared(Arc::clone(&self.k)),
            v: g.constant_shared(Arc::clone(&self.v)),
        }
    }
}

/// Which keys a query may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    Full,
    /// Query `i` sits at absolute position `offset + i` and sees keys `0..=offset + i`.
    Causal { offset: usize },
}

impl AttnMask {
    pub fn allowed(self, queries: usize, keys: usize) -> Option<Vec<bool>> {
        match self {
            AttnMask::Full => None,
            AttnMask::Causal { offset } => {
                Some((0..queries * keys).map(|i| i % keys <= offset + i / keys).collect())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn project_kv<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<KeyValues> {
        Ok(KeyValues {
            k: self.k.forward(g, s, x)?,
            v: self.v.forward(g, s, x)?,
        })
    }

    /// Attention output for queries `x` over `kv`; also returns the per-head
    /// weight matrices.
    pub fn attend_with_weights<F: Real>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        x: Var,
        kv: KeyValues,
        mask: AttnMask,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(g, s, x)?;
        let (nq, nk) = (g.value(q).rows(), g.value(kv.k).rows());
        let allowed = mask.allowed(nq, nk);
        let dh = self.dim / self.heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, kv.k, kv.v)
            } else {
                (
                    g.slice(q, 1, h * dh, dh)?,
                    g.slice(kv.k, 1, h * dh, dh)?,
                    g.slice(kv.v, 1, h * dh, dh)?,
                )
            };
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let w = match &allowed {
                Some(m) => g.masked_softmax(scores, m)?,
                None => g.softmax(scores)?,
            };
            outs.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        Ok((self.o.forward(g, s, cat)?, weights))
    }

    pub fn attend<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var, kv: KeyValues, mask: AttnMask) -> Result<Var> {
        Ok(self.attend_with_weights(g, s, x, kv, mask)?.0)
    }
}

fn check_width<F: Real>(g: &Graph<F>, x: Var, dim: usize, what: &str) -> Result<()> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != dim {
        return Err(Error::invalid(format!("{what} expects width {dim}, got shape {shape:?}")));
    }
    Ok(())
}

/// Pre-norm self-attention block (encoder layers and LM layers).
#[derive(Clone, Debug)]
pub struct SelfAttnBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
    pub keep: f64,
    pub dim: usize,
}

impl SelfAttnBlock {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(SelfAttnBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), cfg.dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), cfg.dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.dim, cfg.ff_dim, rng)?,
            keep: cfg.keep,
            dim: cfg.dim,
        })
    }

    /// Full (bidirectional) self-attention over `x`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<Var> {
        Ok(self.forward_cached(g, s, x, None, AttnMask::Full)?.0)
    }

    /// Self-attention where `x` continues a sequence whose keys/values are
    /// `past`. Returns the output and the keys/values covering past and `x`.
    pub fn forward_cached<F: Real>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        x: Var,
        past: Option<KeyValues>,
        mask: AttnMask,
    ) -> Result<(Var, KeyValues)> {
        check_width(g, x, self.dim, "self-attention block")?;
        let keep = F::lit(self.keep);
        let h = self.ln_attn.forward(g, s, x)?;
        let new = self.attn.project_kv(g, s, h)?;
        let kv = match past {
            Some(p) => KeyValues {
                k: g.concat(&[p.k, new.k], 0)?,
                v: g.concat(&[p.v, new.v], 0)?,
            },
            None => new,
        };
        let a = self.attn.attend(g, s, h, kv, mask)?;
        let a = g.dropout(a, keep)?;
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, s, x)?;
        let f = self.ff.forward(g, s, h)?;
        let f = g.dropout(f, keep)?;
        Ok((g.add(x, f)?, kv))
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention to an
/// encoder memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
    pub keep: f64,
    pub dim: usize,
}

impl DecoderBlock {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(DecoderBlock {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), cfg.dim)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), cfg.dim, cfg.heads, rng)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), cfg.dim)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), cfg.dim, cfg.heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), cfg.dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.dim, cfg.ff_dim, rng)?,
            keep: cfg.keep,
            dim: cfg.dim,
        })
    }

    /// Cross-attention keys/values of an encoder memory, computed once per utterance.
    pub fn memory<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, memory: Var) -> Result<KeyValues> {
        check_width(g, memory, self.dim, "decoder memory")?;
        self.cross_attn.project_kv(g, s, memory)
    }

    /// Decoder positions `x` continuing `past` self-attention keys/values.
    pub fn forward_cached<F: Real>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        x: Var,
        memory: KeyValues,
        past: Option<KeyValues>,
    ) -> Result<(Var, KeyValues)> {
        check_width(g, x, self.dim, "decoder block")?;
        let keep = F::lit(self.keep);
        let offset = past.map_or(0, |p| g.value(p.k).rows());
        let h = self.ln_self.forward(g, s, x)?;
        let new = self.self_attn.project_kv(g, s, h)?;
        let kv = match past {
            Some(p) => KeyValues {
                k: g.concat(&[p.k, new.k], 0)?,
                v: g.concat(&[p.v, new.v], 0)?,
            },
            None => new,
        };
        let a = self.self_attn.attend(g, s, h, kv, AttnMask::Causal { offset })?;
        let a = g.dropout(a, keep)?;
        let x = g.add(x, a)?;
        let h = self.ln_cross.forward(g, s, x)?;
        let c = self.cross_attn.attend(g, s, h, memory, AttnMask::Full)?;
        let c = g.dropout(c, keep)?;
        let x = g.add(x, c)?;
        let h = self.ln_ff.forward(g, s, x)?;
        let f = self.ff.forward(g, s, h)?;
        let f = g.dropout(f, keep)?;
        Ok((g.add(x, f)?, kv))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var, memory: KeyValues) -> Result<Var> {
        Ok(self.forward_cached(g, s, x, memory, None)?.0)
    }
}

/// Decoder blocks, a final layer norm and a log-softmax output head.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub blocks: Vec<DecoderBlock>,
    pub ln: LayerNorm,
    pub head: Linear,
}

impl DecoderStack {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cfg: &BlockConfig, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|i| DecoderBlock::new(store, &format!("{name}.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(DecoderStack {
            blocks,
            ln: LayerNorm::new(store, &format!("{name}.ln"), cfg.dim)?,
            head: Linear::new(store, &format!("{name}.head"), cfg.dim, classes, rng)?,
        })
    }

    /// Per-layer cross-attention keys/values over an encoder output.
    pub fn memory<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, h: Var) -> Result<Vec<KeyValues>> {
        self.blocks.iter().map(|b| b.memory(g, s, h)).collect()
    }

    /// Log-probabilities (`[n, classes]`) for the decoder inputs `x`, which
    /// continue the positions covered by `past`. Also returns the per-layer
    /// self-attention keys/values covering past and `x`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        x: Var,
        memory: &[KeyValues],
        past: Option<&[KeyValues]>,
    ) -> Result<(Var, Vec<KeyValues>)> {
        let mut x = x;
        let mut kvs = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, kv) = b.forward_cached(g, s, x, memory[i], past.map(|p| p[i]))?;
            x = y;
            kvs.push(kv);
        }
        let x = self.ln.forward(g, s, x)?;
        let logits = self.head.forward(g, s, x)?;
        Ok((g.log_softmax(logits)?, kvs))
    }
}

/// Sinusoidal encoding of positions `start..start + len`.
pub fn positional_encoding<F: Real>(start: usize, len: usize, dim: usize) -> Tensor<F> {
    Tensor::from_fn(&[len, dim], |i| {
        let pos = (start + i / dim) as f64;
        let j = i % dim;
        let freq = 10000f64.powf(-((j - j % 2) as f64) / dim as f64);
        F::lit(if j % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() })
    })
}

pub fn add_positional_encoding<F: Real>(g: &mut Graph<F>, x: Var, start: usize) -> Result<Var> {
    let (len, dim) = (g.value(x).rows(), g.value(x).cols());
    let pe = g.constant(positional_encoding(start, len, dim));
    Ok(g.add(x, pe)?)
}

/// Two stride-2 convolutions (kernel 3) with GELU: `T` frames become `floor(T/4)`.
#[derive(Clone, Debug)]
pub struct Frontend {
    pub conv1: Linear,
    pub conv2: Linear,
    pub feat_dim: usize,
    pub dim: usize,
}

pub const MIN_FRAMES: usize = 4;
const KERNEL: usize = 3;

impl Frontend {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, feat_dim: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Frontend {
            conv1: Linear::new(store, &format!("{name}.conv1"), KERNEL * feat_dim, dim, rng)?,
            conv2: Linear::new(store, &format!("{name}.conv2"), KERNEL * dim, dim, rng)?,
            feat_dim,
            dim,
        })
    }

    pub fn output_len(frames: usize) -> usize {
        frames / 4
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, features: Var) -> Result<Var> {
        let frames = g.value(features).rows();
        if frames < MIN_FRAMES {
            return Err(Error::TooShort { frames, min: MIN_FRAMES });
        }
        check_width(g, features, self.feat_dim, "frontend")?;
        let x = g.unfold_rows(features, KERNEL, 2, 1, frames / 2)?;
        let x = self.conv1.forward(g, s, x)?;
        let x = g.gelu(x)?;
        let x = g.unfold_rows(x, KERNEL, 2, 1, frames / 4)?;
        let x = self.conv2.forward(g, s, x)?;
        Ok(g.gelu(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gasr_tensor::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BlockConfig {
        BlockConfig {
            dim: 8,
            heads: 2,
            ff_dim: 16,
            keep: 0.9,
            layers: 1,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(BlockConfig { heads: 3, ..cfg() }.validate().is_err());
        assert!(BlockConfig { keep: 0.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn causal_mask_offsets() {
        let m = AttnMask::Causal { offset: 1 }.allowed(2, 3).unwrap();
        assert_eq!(m, vec![true, true, false, true, true, true]);
        assert!(AttnMask::Full.allowed(2, 3).is_none());
    }

    #[test]
    fn positional_base_pattern_and_distinctness() {
        let p = positional_encoding::<f64>(0, 3, 6);
        for j in 0..6 {
            assert_eq!(p.get2(0, j), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        let again = positional_encoding::<f64>(2, 1, 6);
        assert_eq!(again.row_slice(0), p.row_slice(2));
        let d: f64 = (0..6).map(|j| (p.get2(1, j) - p.get2(2, j)).powi(2)).sum();
        assert!(d.sqrt() > 0.0);
    }

    #[test]
    fn frontend_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        let fe = Frontend::new(&mut s, "fe", 3, 8, &mut rng).unwrap();
        for (t, want) in [(16, 4), (17, 4), (4, 1), (7, 1)] {
            let mut g = Graph::inference();
            let x = g.constant(Tensor::from_fn(&[t, 3], |i| (i as f32).sin()));
            let y = fe.forward(&mut g, &s, x).unwrap();
            assert_eq!(g.shape(y), &[want, 8]);
        }
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(fe.forward(&mut g, &s, x), Err(Error::TooShort { frames: 3, .. })));
    }

    #[test]
    fn zero_input_block_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        let b = SelfAttnBlock::new(&mut s, "b", &cfg(), &mut rng).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(Tensor::zeros(&[3, 8]));
        let y = b.forward(&mut g, &s, x).unwrap();
        assert!(g.value(y).is_finite());
        let bad = g.constant(Tensor::zeros(&[3, 4]));
        assert!(b.forward(&mut g, &s, bad).is_err());
    }
}
