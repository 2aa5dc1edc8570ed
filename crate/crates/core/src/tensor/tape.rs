use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn, split_axis};
use super::params::{Gradients, ParamId, ParamStore};
use super::{shape_err, Tensor, TensorError};

/// Fill value for masked attention logits. Finite so every recorded value
/// stays finite; `exp(MASK_VALUE - max)` underflows to exactly zero.
pub const MASK_VALUE: f64 = -1.0e30;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBroadcast(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Elu(usize),
    Softmax {
        a: usize,
        axis: usize,
    },
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(usize),
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        a: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    GatherLast {
        a: usize,
        indices: Vec<usize>,
    },
    MaskFuture(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Mse(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        row_weights: Vec<f64>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Minimum(usize, usize),
    Maximum(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive ops in execution order; `backward` replays them in
/// exact reverse order, accumulating into shared inputs.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    store: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            store: None,
            param_vars: Vec::new(),
        }
    }

    /// A tape that can pull parameters from `store` via [`Tape::param`].
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            store: Some(store),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// The parameter's leaf; repeated calls return the same node so every
    /// use accumulates into one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let v = self.leaf(store.get(id).clone());
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// Batched product over the leading axis: `[B,m,k]·[B,k,n]`, or
    /// `[B,m,k]·[B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?} trans_b={trans_b}")));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; bt * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..bt {
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                let cb = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt(ab, bb, cb, m, k, n);
                } else {
                    gemm_nn(ab, bb, cb, m, k, n);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![bt, m, n], out)?,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        ))
    }

    // ---- elementwise ----

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok((t, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, rg) = self.binary_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, rg) = self.binary_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, rg) = self.binary_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, rg) = self.binary_same("minimum", a, b, f64::min)?;
        Ok(self.push(t, Op::Minimum(a.0, b.0), rg))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, rg) = self.binary_same("maximum", a, b, f64::max)?;
        Ok(self.push(t, Op::Maximum(a.0, b.0), rg))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s (bias rows,
    /// positional tables).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var, TensorError> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(shape_err("add_broadcast", format!("{sx:?} + {sy:?}")));
        }
        let yv = self.value(y).data();
        let n = yv.len();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(yv).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(t, Op::AddBroadcast(x.0, y.0), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.0, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a.0), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a.0), |x| gelu_fwd(x).0)
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a.0), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp { a: a.0, lo, hi }, |x| x.clamp(lo, hi))
    }

    // ---- normalization ----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let mx = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - mx).exp();
                    out[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[at(l)] /= s;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a: a.0, axis }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(c) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::LogSoftmax(a.0), rg)
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if n < 2 || self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err(
                "layernorm",
                format!(
                    "x {shape:?}, gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (xv, gv, bv) = (
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- layout ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let data = kernels::permute(self.value(a).data(), &shape, axes);
        let out_shape = axes.iter().map(|&i| shape[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                a: a.0,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(shape_err("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(oshape, out)?,
            Op::Narrow {
                a: a.0,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Selects entries along `axis` (embedding lookup when `axis == 0`).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || indices.is_empty() {
            return Err(shape_err("index_select", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::Index {
                op: "index_select",
                index: bad,
                len,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = o * len * inner + i * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = indices.len();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(oshape, out)?,
            Op::IndexSelect {
                a: a.0,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `out[r] = a[r, indices[r]]` over the last axis.
    pub fn gather_last(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap();
        let rows = self.value(a).numel() / c;
        if indices.len() != rows {
            return Err(shape_err(
                "gather_last",
                format!("{} indices for {rows} rows", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(TensorError::Index {
                op: "gather_last",
                index: bad,
                len: c,
            });
        }
        let src = self.value(a).data();
        let out: Vec<f64> = indices.iter().enumerate().map(|(r, &i)| src[r * c + i]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::vector(out),
            Op::GatherLast {
                a: a.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Sets entries above the diagonal of the trailing `[N, N]` block to
    /// [`MASK_VALUE`].
    pub fn mask_future(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(shape_err("mask_future", format!("{shape:?}")));
        }
        let n = shape[r - 1];
        let mut out = self.value(a).data().to_vec();
        for block in out.chunks_mut(n * n) {
            for i in 0..n {
                for j in i + 1..n {
                    block[i * n + j] = MASK_VALUE;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskFuture(a.0), rg))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap();
        let out: Vec<f64> = self.value(a).data().chunks(c).map(|r| r.iter().sum()).collect();
        let oshape = if shape.len() > 1 {
            shape[..shape.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let rg = self.rg(a);
        self.push(Tensor::new(oshape, out).unwrap(), Op::SumLast(a.0), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred.0, target.0), rg))
    }

    /// Weighted, label-smoothed cross-entropy averaged over rows.
    ///
    /// Row `i` has target distribution `q = (1-ε)·onehot(yᵢ) + ε/C` and
    /// weight `w[yᵢ]`; the result is `Σᵢ w[yᵢ]·H(qᵢ, pᵢ) / Σᵢ w[yᵢ]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
        smoothing: f64,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {shape:?} with {} targets", targets.len()),
            ));
        }
        let c = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                len: c,
            });
        }
        if let Some(w) = class_weights {
            if w.len() != c || w.iter().any(|&x| !(x > 0.0)) {
                return Err(shape_err("cross_entropy", "class weights must be C positive values"));
            }
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(shape_err("cross_entropy", format!("smoothing {smoothing} outside [0,1)")));
        }
        let raw_w: Vec<f64> = targets
            .iter()
            .map(|&t| class_weights.map_or(1.0, |w| w[t]))
            .collect();
        let wsum: f64 = raw_w.iter().sum();
        let row_weights: Vec<f64> = raw_w.iter().map(|w| w / wsum).collect();
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(src.len());
        let mut loss = 0.0;
        for (i, row) in src.chunks(c).enumerate() {
            let lse = log_sum_exp(row);
            let mut h = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let logp = x - lse;
                probs.push(logp.exp());
                let q = smoothing / c as f64 + if j == targets[i] { 1.0 - smoothing } else { 0.0 };
                h -= q * logp;
            }
            loss += row_weights[i] * h;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                row_weights,
                smoothing,
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`. Gradients accumulate, so a value
    /// used twice receives the sum of both contributions.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", "loss must be a scalar"));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter pulled through [`Tape::param`].
    pub fn param_grads(&self) -> Gradients {
        Gradients {
            grads: self
                .param_vars
                .iter()
                .map(|v| v.and_then(|v| self.grad(v).map(|g| g.to_vec())))
                .collect(),
        }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], idx: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let n = nodes[idx].value.numel();
    Some(grads[idx].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let op = &nodes[i].op;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape().to_vec(), nodes[*b].value.shape().to_vec());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if nodes[*a].requires_grad {
                let bv = nodes[*b].value.data();
                let ga = acc(nodes, grads, *a).unwrap();
                gemm_nt(g, &bv, ga, m, n, k);
            }
            if nodes[*b].requires_grad {
                let av = nodes[*a].value.data();
                let gb = acc(nodes, grads, *b).unwrap();
                gemm_tn(&av, g, gb, m, k, n);
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let sa = nodes[*a].value.shape().to_vec();
            let sb = nodes[*b].value.shape().to_vec();
            let (bt, m, k) = (sa[0], sa[1], sa[2]);
            let n = if *trans_b { sb[1] } else { sb[2] };
            if nodes[*a].requires_grad {
                let bv = nodes[*b].value.data();
                let ga = acc(nodes, grads, *a).unwrap();
                for t in 0..bt {
                    let gc = &g[t * m * n..(t + 1) * m * n];
                    let bb = &bv[t * k * n..(t + 1) * k * n];
                    let gab = &mut ga[t * m * k..(t + 1) * m * k];
                    if *trans_b {
                        gemm_nn(gc, bb, gab, m, n, k);
                    } else {
                        gemm_nt(gc, bb, gab, m, n, k);
                    }
                }
            }
            if nodes[*b].requires_grad {
                let av = nodes[*a].value.data();
                let gb = acc(nodes, grads, *b).unwrap();
                for t in 0..bt {
                    let gc = &g[t * m * n..(t + 1) * m * n];
                    let ab = &av[t * m * k..(t + 1) * m * k];
                    let gbb = &mut gb[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        gemm_tn(gc, ab, gbb, m, n, k);
                    } else {
                        gemm_tn(ab, gc, gbb, m, k, n);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for (idx, sign) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(ga) = acc(nodes, grads, idx) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
        }
        Op::Sub(a, b) => {
            for (idx, sign) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(ga) = acc(nodes, grads, idx) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let bv = nodes[*b].value.data();
                let ga = acc(nodes, grads, *a).unwrap();
                for ((x, y), z) in ga.iter_mut().zip(g).zip(bv) {
                    *x += y * z;
                }
            }
            if nodes[*b].requires_grad {
                let av = nodes[*a].value.data();
                let gb = acc(nodes, grads, *b).unwrap();
                for ((x, y), z) in gb.iter_mut().zip(g).zip(av) {
                    *x += y * z;
                }
            }
        }
        Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let is_min = matches!(op, Op::Minimum(..));
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let pick_a: Vec<bool> = av
                .iter()
                .zip(bv)
                .map(|(x, y)| if is_min { x <= y } else { x >= y })
                .collect();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((x, y), &p) in ga.iter_mut().zip(g).zip(pick_a.iter()) {
                    if p {
                        *x += y;
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for ((x, y), &p) in gb.iter_mut().zip(g).zip(pick_a.iter()) {
                    if !p {
                        *x += y;
                    }
                }
            }
        }
        Op::AddBroadcast(x, y) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Some(gy) = acc(nodes, grads, *y) {
                let n = gy.len();
                for chunk in g.chunks(n) {
                    gy.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Exp(a) | Op::Sigmoid(a) | Op::Tanh(a) => {
            let out = nodes[i].value.data();
            let kind = match op {
                Op::Exp(_) => 0,
                Op::Sigmoid(_) => 1,
                _ => 2,
            };
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                    let d = match kind {
                        0 => *o,
                        1 => o * (1.0 - o),
                        _ => 1.0 - o * o,
                    };
                    *x += y * d;
                }
            }
        }
        Op::Log(a) | Op::Square(a) | Op::Gelu(a) | Op::Elu(a) | Op::Clamp { a, .. } => {
            let input = nodes[*a].value.data();
            let deriv: Box<dyn Fn(f64) -> f64> = match op {
                Op::Log(_) => Box::new(|x| 1.0 / x),
                Op::Square(_) => Box::new(|x| 2.0 * x),
                Op::Gelu(_) => Box::new(|x| gelu_fwd(x).1),
                Op::Elu(_) => Box::new(|x| if x > 0.0 { 1.0 } else { x.exp() }),
                Op::Clamp { lo, hi, .. } => {
                    let (lo, hi) = (*lo, *hi);
                    Box::new(move |x| if x >= lo && x <= hi { 1.0 } else { 0.0 })
                }
                _ => unreachable!(),
            };
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((x, y), v) in ga.iter_mut().zip(g).zip(input) {
                    *x += y * deriv(*v);
                }
            }
        }
        Op::Softmax { a, axis } => {
            let shape = nodes[i].value.shape().to_vec();
            let (outer, len, inner) = split_axis(&shape, *axis);
            let y = nodes[i].value.data();
            if let Some(ga) = acc(nodes, grads, *a) {
                for o in 0..outer {
                    for t in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + t;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            ga[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let c = *nodes[i].value.shape().last().unwrap();
            let y = nodes[i].value.data();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((gr, yr), gar) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        gar[j] += gr[j] - yr[j].exp() * s;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = nodes[*gain].value.data().len();
            let gv = nodes[*gain].value.data();
            if let Some(gb) = acc(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gg) = acc(nodes, grads, *gain) {
                for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        gg[j] += row[j] * hrow[j];
                    }
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, ((row, hrow), gxr)) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        let dh = row[j] * gv[j];
                        m1 += dh;
                        m2 += dh * hrow[j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        let dh = row[j] * gv[j];
                        gxr[j] += rstd[r] * (dh - m1 - hrow[j] * m2);
                    }
                }
            }
        }
        Op::Permute { a, axes } => {
            let out_shape = nodes[i].value.shape().to_vec();
            let mut inv = vec![0; axes.len()];
            for (k, &ax) in axes.iter().enumerate() {
                inv[ax] = k;
            }
            let back = kernels::permute(g, &out_shape, &inv);
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(back.iter()).for_each(|(x, y)| *x += y);
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = nodes[i].value.shape().to_vec();
            let (outer, total, inner) = split_axis(&shape, *axis);
            let mut off = 0;
            for &v in inputs {
                let len = nodes[v].value.shape()[*axis];
                if let Some(gv) = acc(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[o * total * inner + off * inner..o * total * inner + (off + len) * inner];
                        let dst = &mut gv[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                off += len;
            }
        }
        Op::Narrow { a, axis, start } => {
            let in_shape = nodes[*a].value.shape().to_vec();
            let len = nodes[i].value.shape()[*axis];
            let (outer, full, inner) = split_axis(&in_shape, *axis);
            if let Some(ga) = acc(nodes, grads, *a) {
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    ga[base..base + len * inner].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::IndexSelect { a, axis, indices } => {
            let in_shape = nodes[*a].value.shape().to_vec();
            let (outer, len, inner) = split_axis(&in_shape, *axis);
            let k = indices.len();
            if let Some(ga) = acc(nodes, grads, *a) {
                for o in 0..outer {
                    for (j, &idx) in indices.iter().enumerate() {
                        let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                        let base = o * len * inner + idx * inner;
                        ga[base..base + inner].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        Op::GatherLast { a, indices } => {
            let c = *nodes[*a].value.shape().last().unwrap();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (r, &idx) in indices.iter().enumerate() {
                    ga[r * c + idx] += g[r];
                }
            }
        }
        Op::MaskFuture(a) => {
            let n = *nodes[i].value.shape().last().unwrap();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (gb, b) in ga.chunks_mut(n * n).zip(g.chunks(n * n)) {
                    for r in 0..n {
                        for c in 0..=r {
                            gb[r * n + c] += b[r * n + c];
                        }
                    }
                }
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            let n = nodes[*a].value.numel();
            let s = if matches!(op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::SumLast(a) => {
            let c = *nodes[*a].value.shape().last().unwrap();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (row, &gr) in ga.chunks_mut(c).zip(g) {
                    row.iter_mut().for_each(|x| *x += gr);
                }
            }
        }
        Op::Mse(p, t) => {
            let pv = nodes[*p].value.data();
            let tv = nodes[*t].value.data();
            let s = 2.0 * g[0] / pv.len() as f64;
            if let Some(gp) = acc(nodes, grads, *p) {
                for ((x, a), b) in gp.iter_mut().zip(pv).zip(tv) {
                    *x += s * (a - b);
                }
            }
            if let Some(gt) = acc(nodes, grads, *t) {
                for ((x, a), b) in gt.iter_mut().zip(pv).zip(tv) {
                    *x -= s * (a - b);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            row_weights,
            smoothing,
            probs,
        } => {
            let c = nodes[*logits].value.shape()[1];
            if let Some(gl) = acc(nodes, grads, *logits) {
                for (r, (row, prow)) in gl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                    let w = g[0] * row_weights[r];
                    for j in 0..c {
                        let q = smoothing / c as f64 + if j == targets[r] { 1.0 - smoothing } else { 0.0 };
                        row[j] += w * (prow[j] - q);
                    }
                }
            }
        }
    }
}


pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Returns (gelu(x), gelu'(x)).
fn gelu_fwd(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}
