use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Train mode enables dropout; eval mode makes every primitive deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<F: Real> {
    Leaf,
    Param {
        store: u64,
        id: ParamId,
    },
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale {
        a: Var,
        factor: F,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Slice {
        a: Var,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Dropout {
        a: Var,
        mask: Vec<F>,
    },
    Gelu {
        a: Var,
    },
    Relu {
        a: Var,
    },
    CrossEntropy {
        logp: Var,
        targets: Vec<usize>,
    },
    Sum {
        a: Var,
    },
    Unfold {
        a: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
    },
    Reshape {
        a: Var,
    },
    External {
        a: Var,
        grad: Tensor<F>,
    },
}

struct Node<F: Real> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of primitive applications.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    mode: Mode,
    grad_enabled: bool,
    rng: ChaCha8Rng,
}

impl<F: Real> Graph<F> {
    /// A graph recording gradients. `seed` drives dropout in train mode.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            grad_enabled: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Eval-mode graph without gradient bookkeeping.
    pub fn inference() -> Self {
        let mut g = Self::new(Mode::Eval, 0);
        g.grad_enabled = false;
        g
    }

    /// Forward-only graph in the given mode (dropout still applies in train).
    pub fn no_grad(mode: Mode, seed: u64) -> Self {
        let mut g = Self::new(mode, seed);
        g.grad_enabled = false;
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<F>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.constant_shared(Arc::new(t))
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor<F>>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let requires_grad = self.grad_enabled && !store.is_frozen(id);
        self.nodes.push(Node {
            value: store.shared_value(id),
            op: Op::Param {
                store: store.uid(),
                id,
            },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a · b` over the 2-D view of `a` (`[.., k]`) and a 2-D `b` (`[k, n]`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` stored as `[n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let ok = tb.shape().len() == 2 && if b_transposed { tb.cols() == k } else { tb.rows() == k };
        if !ok {
            return Err(TensorError::shape("matmul", &[ta.shape(), tb.shape()]));
        }
        let n = if b_transposed { tb.rows() } else { tb.cols() };
        let mut out = vec![F::zero(); m * n];
        let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
        // SAFETY: buffer sizes match the dimensions checked above.
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                ta.data().as_ptr(),
                k as isize,
                1,
                tb.data().as_ptr(),
                rsb,
                csb,
                F::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().expect("non-empty") = n;
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, b_transposed }, &[a, b])
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(false)
        } else if tb.len() == ta.cols() && tb.rows() == 1 {
            Ok(true)
        } else {
            Err(TensorError::shape(op, &[ta.shape(), tb.shape()]))
        }
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_check("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        let data = if broadcast {
            ta.data().iter().enumerate().map(|(i, &x)| x + tb.data()[i % c]).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect()
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", value, Op::Add { a, b, broadcast }, &[a, b])
    }

    /// Elementwise product; `b` may be a single row broadcast over `a`'s rows.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_check("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        let data = if broadcast {
            ta.data().iter().enumerate().map(|(i, &x)| x * tb.data()[i % c]).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect()
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b, broadcast }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, Op::Scale { a, factor }, &[a])
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::shape("concat", &[&base, s]));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = Self::axis_split(&base, axis);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let src = self.value(*p).data();
                data.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                lens,
            },
            parts,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("axis {axis} range {start}..{} of shape {shape:?}", start + len),
            ));
        }
        let (outer, axis_len, inner) = Self::axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "slice",
            value,
            Op::Slice {
                a,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
            &[a],
        )
    }

    /// Rows of a `[rows, dim]` table, one per id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 || ids.is_empty() {
            return Err(TensorError::invalid(
                "embedding",
                format!("table {:?} with {} ids", t.shape(), ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(TensorError::invalid(
                "embedding",
                format!("id {bad} out of range for {} rows", t.rows()),
            ));
        }
        let d = t.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last dimension restricted to entries where `allowed`
    /// is true; disallowed entries get exactly zero weight.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        self.softmax_impl(a, Some(allowed))
    }

    fn softmax_impl(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        if let Some(m) = allowed {
            if m.len() != t.len() {
                return Err(TensorError::shape("softmax", &[t.shape(), &[m.len()]]));
            }
        }
        let mut out = vec![F::zero(); t.len()];
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let ok = |j: usize| allowed.is_none_or(|m| m[r * c + j]);
            let mut max = F::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if ok(j) && x > max {
                    max = x;
                }
            }
            if max == F::neg_infinity() {
                return Err(TensorError::invalid("softmax", format!("row {r} is fully masked")));
            }
            let mut sum = F::zero();
            for (j, &x) in row.iter().enumerate() {
                if ok(j) {
                    let e = (x - max).exp();
                    out[r * c + j] = e;
                    sum += e;
                }
            }
            for o in &mut out[r * c..(r + 1) * c] {
                *o /= sum;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { a }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = vec![F::zero(); t.len()];
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            for (j, &x) in row.iter().enumerate() {
                out[r * c + j] = x - lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax { a }, &[a])
    }

    /// Normalize each row to zero mean and unit variance, then apply `gain`
    /// and `bias` (both one row of the same width).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(TensorError::shape("layer_norm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let n = F::lit(c as f64);
        let mut xhat = vec![F::zero(); tx.len()];
        let mut rstd = Vec::with_capacity(tx.rows());
        let mut out = vec![F::zero(); tx.len()];
        for r in 0..tx.rows() {
            let row = tx.row_slice(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Inverted dropout: in train mode each entry survives with probability
    /// `keep` and is scaled by `1/keep`; eval mode is the identity.
    pub fn dropout(&mut self, a: Var, keep: F) -> Result<Var> {
        if !(keep > F::zero() && keep <= F::one()) {
            return Err(TensorError::invalid("dropout", format!("keep probability {keep} not in (0,1]")));
        }
        if self.mode == Mode::Eval || keep == F::one() {
            return Ok(a);
        }
        let scale = F::one() / keep;
        let keep64 = keep.as_f64();
        let n = self.value(a).len();
        let mask: Vec<F> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep64 { scale } else { F::zero() })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { a, mask }, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| gelu_parts(x).0);
        self.push("gelu", value, Op::Gelu { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(F::zero()));
        self.push("relu", value, Op::Relu { a }, &[a])
    }

    /// Summed negative log-likelihood of `targets` under row-wise
    /// log-probabilities `logp` (`[n, classes]`).
    pub fn cross_entropy(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logp);
        if t.rows() != targets.len() {
            return Err(TensorError::shape("cross_entropy", &[t.shape(), &[targets.len()]]));
        }
        let c = t.cols();
        if let Some(&bad) = targets.iter().find(|&&k| k >= c) {
            return Err(TensorError::invalid("cross_entropy", format!("class {bad} >= {c}")));
        }
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(r, &k)| t.data()[r * c + k])
            .sum::<F>();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logp,
                targets: targets.to_vec(),
            },
            &[logp],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<F>();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Sliding windows over the rows of a `[t, c]` matrix, zero padded:
    /// output row `i` concatenates input rows `i*stride - pad_left ..` (`kernel` of them).
    pub fn unfold_rows(&mut self, a: Var, kernel: usize, stride: usize, pad_left: usize, out_len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || kernel == 0 || stride == 0 || out_len == 0 {
            return Err(TensorError::invalid(
                "unfold_rows",
                format!("shape {:?} kernel {kernel} stride {stride} out_len {out_len}", t.shape()),
            ));
        }
        let (rows, c) = (t.rows(), t.cols());
        let mut data = vec![F::zero(); out_len * kernel * c];
        for i in 0..out_len {
            for k in 0..kernel {
                let src = (i * stride + k) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < rows {
                    let dst = (i * kernel + k) * c;
                    data[dst..dst + c].copy_from_slice(t.row_slice(src as usize));
                }
            }
        }
        let value = Tensor::new(vec![out_len, kernel * c], data)?;
        self.push(
            "unfold_rows",
            value,
            Op::Unfold {
                a,
                kernel,
                stride,
                pad_left,
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Scalar computed outside the graph whose gradient with respect to `a`
    /// is already known.
    pub fn external_scalar(&mut self, a: Var, value: F, grad: Tensor<F>) -> Result<Var> {
        if grad.shape() != self.value(a).shape() {
            return Err(TensorError::shape("external_scalar", &[self.value(a).shape(), grad.shape()]));
        }
        self.push("external_scalar", Tensor::scalar(value), Op::External { a, grad }, &[a])
    }

    /// Reverse sweep from a scalar `loss`, accumulating into the parameter
    /// gradients of `stores`.
    pub fn backward(&self, loss: Var, stores: &mut [&mut ParamStore<F>]) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Param { store, id } => {
                    let target = stores
                        .iter_mut()
                        .find(|s| s.uid() == *store)
                        .ok_or(TensorError::MissingStore)?;
                    if target.is_frozen(*id) {
                        return Err(TensorError::FrozenGradient(target.get(*id).name().to_string()));
                    }
                    for (g, d) in target.grad_mut(*id).data_mut().iter_mut().zip(&gout) {
                        *g += *d;
                    }
                }
                Op::Leaf => {}
                op => self.backward_op(op, &gout, &self.nodes[i].value, &mut grads),
            }
        }
        Ok(())
    }

    fn backward_op(&self, op: &Op<F>, gout: &[F], out: &Tensor<F>, grads: &mut [Option<Vec<F>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul { a, b, b_transposed } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = out.cols();
                if wants(*a) {
                    let ga = grad_buf(grads, *a, ta.len());
                    // dA = dC · op(B)ᵀ
                    let (rsb, csb) = if *b_transposed { (k as isize, 1) } else { (1, n as isize) };
                    // SAFETY: dimensions follow the forward product.
                    unsafe {
                        F::gemm(m, n, k, F::one(), gout.as_ptr(), n as isize, 1, tb.data().as_ptr(), rsb, csb, F::one(), ga.as_mut_ptr(), k as isize, 1);
                    }
                }
                if wants(*b) {
                    let gb = grad_buf(grads, *b, tb.len());
                    // SAFETY: dimensions follow the forward product.
                    unsafe {
                        if *b_transposed {
                            // dB[n,k] = dCᵀ · A
                            F::gemm(n, m, k, F::one(), gout.as_ptr(), 1, n as isize, ta.data().as_ptr(), k as isize, 1, F::one(), gb.as_mut_ptr(), k as isize, 1);
                        } else {
                            // dB[k,n] = Aᵀ · dC
                            F::gemm(k, m, n, F::one(), ta.data().as_ptr(), 1, k as isize, gout.as_ptr(), n as isize, 1, F::one(), gb.as_mut_ptr(), n as isize, 1);
                        }
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                if wants(*a) {
                    add_into(grad_buf(grads, *a, gout.len()), gout);
                }
                if wants(*b) {
                    let c = out.cols();
                    let gb = grad_buf(grads, *b, if *broadcast { c } else { gout.len() });
                    if *broadcast {
                        for (i, &d) in gout.iter().enumerate() {
                            gb[i % c] += d;
                        }
                    } else {
                        add_into(gb, gout);
                    }
                }
            }
            Op::Mul { a, b, broadcast } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = out.cols();
                if wants(*a) {
                    let ga = grad_buf(grads, *a, ta.len());
                    for (i, &d) in gout.iter().enumerate() {
                        let bv = if *broadcast { tb.data()[i % c] } else { tb.data()[i] };
                        ga[i] += d * bv;
                    }
                }
                if wants(*b) {
                    let gb = grad_buf(grads, *b, tb.len());
                    for (i, &d) in gout.iter().enumerate() {
                        let j = if *broadcast { i % c } else { i };
                        gb[j] += d * ta.data()[i];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if wants(*a) {
                    let ga = grad_buf(grads, *a, gout.len());
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += d * *factor;
                    }
                }
            }
            Op::Concat { parts, outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (p, &l) in parts.iter().zip(lens) {
                    if wants(*p) {
                        let gp = grad_buf(grads, *p, outer * l * inner);
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut gp[o * l * inner..(o + 1) * l * inner], &gout[src..src + l * inner]);
                        }
                    }
                    offset += l;
                }
            }
            Op::Slice { a, outer, inner, axis_len, start, len } => {
                if wants(*a) {
                    let ga = grad_buf(grads, *a, outer * axis_len * inner);
                    for o in 0..*outer {
                        let dst = (o * axis_len + start) * inner;
                        add_into(&mut ga[dst..dst + len * inner], &gout[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let gt = grad_buf(grads, *table, tt.len());
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Softmax { a } => {
                if wants(*a) {
                    let c = out.cols();
                    let y = out.data();
                    let ga = grad_buf(grads, *a, y.len());
                    for r in 0..out.rows() {
                        let s = r * c;
                        let dot: F = (0..c).map(|j| gout[s + j] * y[s + j]).sum();
                        for j in 0..c {
                            ga[s + j] += y[s + j] * (gout[s + j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                if wants(*a) {
                    let c = out.cols();
                    let y = out.data();
                    let ga = grad_buf(grads, *a, y.len());
                    for r in 0..out.rows() {
                        let s = r * c;
                        let total: F = gout[s..s + c].iter().copied().sum();
                        for j in 0..c {
                            ga[s + j] += gout[s + j] - y[s + j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = out.cols();
                let rows = out.rows();
                let tg = self.value(*gain).data();
                if wants(*gain) {
                    let gg = grad_buf(grads, *gain, c);
                    for (i, &d) in gout.iter().enumerate() {
                        gg[i % c] += d * xhat[i];
                    }
                }
                if wants(*bias) {
                    let gb = grad_buf(grads, *bias, c);
                    for (i, &d) in gout.iter().enumerate() {
                        gb[i % c] += d;
                    }
                }
                if wants(*x) {
                    let n = F::lit(c as f64);
                    let gx = grad_buf(grads, *x, rows * c);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let s = r * c;
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for j in 0..c {
                            let dh = gout[s + j] * tg[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[s + j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..c {
                            let dh = gout[s + j] * tg[j];
                            gx[s + j] += rs * (dh - mean_d - xhat[s + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if wants(*a) {
                    let ga = grad_buf(grads, *a, mask.len());
                    for ((g, &d), &m) in ga.iter_mut().zip(gout).zip(mask) {
                        *g += d * m;
                    }
                }
            }
            Op::Gelu { a } => {
                if wants(*a) {
                    let x = self.value(*a).data();
                    let ga = grad_buf(grads, *a, x.len());
                    for ((g, &d), &xv) in ga.iter_mut().zip(gout).zip(x) {
                        *g += d * gelu_parts(xv).1;
                    }
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let x = self.value(*a).data();
                    let ga = grad_buf(grads, *a, x.len());
                    for ((g, &d), &xv) in ga.iter_mut().zip(gout).zip(x) {
                        if xv > F::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::CrossEntropy { logp, targets } => {
                if wants(*logp) {
                    let t = self.value(*logp);
                    let c = t.cols();
                    let gl = grad_buf(grads, *logp, t.len());
                    for (r, &k) in targets.iter().enumerate() {
                        gl[r * c + k] -= gout[0];
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let n = self.value(*a).len();
                    let ga = grad_buf(grads, *a, n);
                    for g in ga.iter_mut() {
                        *g += gout[0];
                    }
                }
            }
            Op::Unfold { a, kernel, stride, pad_left } => {
                if wants(*a) {
                    let t = self.value(*a);
                    let (rows, c) = (t.rows(), t.cols());
                    let out_len = out.rows();
                    let ga = grad_buf(grads, *a, t.len());
                    for i in 0..out_len {
                        for k in 0..*kernel {
                            let src = (i * stride + k) as isize - *pad_left as isize;
                            if src >= 0 && (src as usize) < rows {
                                let s = src as usize * c;
                                let o = (i * kernel + k) * c;
                                add_into(&mut ga[s..s + c], &gout[o..o + c]);
                            }
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    add_into(grad_buf(grads, *a, gout.len()), gout);
                }
            }
            Op::External { a, grad } => {
                if wants(*a) {
                    let ga = grad_buf(grads, *a, grad.len());
                    for (g, &d) in ga.iter_mut().zip(grad.data()) {
                        *g += gout[0] * d;
                    }
                }
            }
        }
    }
}

fn grad_buf<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let value = half * x * (F::one() + t);
    let du = c * (F::one() + F::lit(3.0) * k * x * x);
    let deriv = half * (F::one() + t) + half * x * (F::one() - t * t) * du;
    (value, deriv)
}
