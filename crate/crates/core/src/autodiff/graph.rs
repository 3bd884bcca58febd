use std::collections::HashMap;

use rand::Rng;

use super::real::gemm;
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Affine {
        x: Var,
        scale: F,
    },
    MulConst {
        x: Var,
        c: Vec<F>,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    StackSteps {
        steps: Vec<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Transpose {
        x: Var,
        batch: usize,
        m: usize,
        n: usize,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<F>,
        targets: Vec<usize>,
        floored: Vec<bool>,
    },
    KlDivergence {
        p: Var,
        q: Var,
        p_probs: Vec<F>,
        q_probs: Vec<F>,
        log_ratio: Vec<F>,
        q_floored: Vec<bool>,
        row_kl: Vec<F>,
    },
    BceWithLogits {
        x: Var,
        targets: Vec<F>,
        weights: Vec<F>,
    },
    Sum(Var),
    Reshape(Var),
    Gru {
        gi: Var,
        wh: Var,
        bh: Var,
        batch: usize,
        len: usize,
        hidden: usize,
        /// Reset, update and candidate activations and the hidden-side
        /// candidate pre-activation, each `[B, T, d]`.
        r: Vec<F>,
        z: Vec<F>,
        n: Vec<F>,
        ghn: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A recording tape for one forward/backward pass.
///
/// Values are appended in execution order, so a reverse sweep over the node
/// list is a reverse topological order.
pub struct Graph<'s, F: Real> {
    nodes: Vec<Node<F>>,
    store: Option<&'s ParamStore<F>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<F: Real> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, F: Real> Graph<'s, F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore<F>) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a leaf. Gradients are tracked for it when `requires_grad`.
    pub fn input(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.input(value, false)
    }

    /// The graph node of a stored parameter. Each parameter is recorded once
    /// per graph, so every use of the same id reads the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("graph was built without a parameter store");
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.param_vars.insert(id, v);
        v
    }

    /// A copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[.., k] · [k, n] → [.., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).rows();
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// `[B, m, k] · [B, k, n] → [B, m, n]`, or `a · bᵀ` for `b: [B, n, k]`
    /// when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(Error::shape("bmm", sa, sb));
        }
        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    false,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let (vx, vr) = (self.value(x), self.value(row));
        let c = vx.cols();
        if vr.numel() != c || vx.shape().is_empty() {
            return Err(Error::shape(op, vx.shape(), vr.shape()));
        }
        let r = vr.data();
        let data = vx
            .data()
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| f(a, b)))
            .collect();
        Tensor::new(vx.shape(), data)
    }

    /// Adds a `[C]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let v = self.row_broadcast("add_row", x, row, |a, b| a + b)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(v, Op::AddRow { x, row }, rg))
    }

    /// Multiplies every row of `x` elementwise by a `[C]` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let v = self.row_broadcast("mul_row", x, row, |a, b| a * b)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(v, Op::MulRow { x, row }, rg))
    }

    /// Scales row `r` of `x` by `s[r]`; `s` holds one value per row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let c = vx.cols();
        if vs.numel() != vx.rows() {
            return Err(Error::shape("scale_rows", vx.shape(), vs.shape()));
        }
        let data = vx
            .data()
            .chunks(c.max(1))
            .zip(vs.data())
            .flat_map(|(chunk, &k)| chunk.iter().map(move |&a| a * k))
            .collect();
        let v = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(v, Op::ScaleRows { x, s }, rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, c) = (F::of(scale), F::of(shift));
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| a * v + c).collect();
        let v = Tensor::new(vx.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(v, Op::Affine { x, scale: a }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Elementwise product with a constant buffer of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<F>) -> Result<Var> {
        let vx = self.value(x);
        if c.len() != vx.numel() {
            return Err(Error::shape("mul_const", vx.shape(), &[c.len()]));
        }
        let data = vx.data().iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let v = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::MulConst { x, c }, rg))
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(
                "dropout",
                format!("rate {p} outside [0, 1)"),
            ));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(x, mask)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if start + len > c {
            return Err(Error::shape("slice", vx.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(vx.rows() * len);
        for chunk in vx.data().chunks(c) {
            out.extend_from_slice(&chunk[start..start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, start, len }, rg))
    }

    /// Picks rows of `x` (viewed as `[R, C]`), giving `[idx.len(), C]`.
    /// This is also the embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::IndexOutOfRange { index: i, len: r });
            }
            out.extend_from_slice(&vx.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[idx.len(), c], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks `S` tensors of shape `[B, C]` into `[B, S, C]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::invalid("stack_steps", "no inputs"))?;
        let shape0 = self.shape(first).to_vec();
        if shape0.len() != 2 {
            return Err(Error::shape("stack_steps", &shape0, &[]));
        }
        let (b, c) = (shape0[0], shape0[1]);
        let s = steps.len();
        let mut out = vec![F::zero(); b * s * c];
        for (t, &v) in steps.iter().enumerate() {
            let vs = self.value(v);
            if vs.shape() != shape0.as_slice() {
                return Err(Error::shape("stack_steps", &shape0, vs.shape()));
            }
            for bi in 0..b {
                out[(bi * s + t) * c..(bi * s + t + 1) * c]
                    .copy_from_slice(&vs.data()[bi * c..(bi + 1) * c]);
            }
        }
        let rg = steps.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(&[b, s, c], out)?,
            Op::StackSteps {
                steps: steps.to_vec(),
            },
            rg,
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let vx = self.value(x);
        Tensor::new(vx.shape(), vx.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| if a > F::zero() { a } else { F::zero() });
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.tanh());
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("layer_norm", vx.shape(), self.shape(gamma)));
        }
        let eps = F::of(eps);
        let cf = F::of(c as f64);
        let rows = vx.rows();
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(rows);
        for chunk in vx.data().chunks(c) {
            let mean = chunk.iter().copied().sum::<F>() / cf;
            let var = chunk.iter().map(|&a| (a - mean) * (a - mean)).sum::<F>() / cf;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            xhat.extend(chunk.iter().map(|&a| (a - mean) * rs));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<F> = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(gv).zip(bv).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let shape = vx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// `[B, m, n] → [B, n, m]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 3 {
            return Err(Error::shape("transpose", vx.shape(), &[]));
        }
        let (batch, m, n) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let src = vx.data();
        let mut out = vec![F::zero(); src.len()];
        for b in 0..batch {
            let o = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[o + j * m + i] = src[o + i * n + j];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[batch, n, m], out)?,
            Op::Transpose { x, batch, m, n },
            rg,
        ))
    }

    /// Softmax over the last axis restricted to entries where `mask` is true;
    /// masked entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.numel() {
            return Err(Error::shape("masked_softmax", vx.shape(), &[mask.len()]));
        }
        let c = vx.cols();
        let mut out = vec![F::zero(); vx.numel()];
        for ((row, m), o) in vx
            .data()
            .chunks(c)
            .zip(mask.chunks(c))
            .zip(out.chunks_mut(c))
        {
            softmax_row(row, m, o)?;
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(x), rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, fused for stability.
    /// `logits` is `[R, C]`, `mask` flags valid entries, `targets` has one
    /// index per row and must hit a valid entry.
    pub fn cross_entropy(&mut self, logits: Var, mask: &[bool], targets: &[usize]) -> Result<Var> {
        let vx = self.value(logits);
        let (r, c) = (vx.rows(), vx.cols());
        if mask.len() != vx.numel() || targets.len() != r {
            return Err(Error::shape("cross_entropy", vx.shape(), &[targets.len()]));
        }
        let ln_floor = F::of(LOG_FLOOR.ln());
        let mut probs = vec![F::zero(); vx.numel()];
        let mut floored = Vec::with_capacity(r);
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &vx.data()[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            if t >= c {
                return Err(Error::IndexOutOfRange { index: t, len: c });
            }
            if !m[t] {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("target {t} is masked"),
                ));
            }
            let lse = log_sum_exp(row, m)?;
            let logp = row[t] - lse;
            let clamp = logp < ln_floor;
            floored.push(clamp);
            total -= if clamp { ln_floor } else { logp };
            for j in 0..c {
                if m[j] {
                    probs[i * c + j] = (row[j] - lse).exp();
                }
            }
        }
        let loss = total / F::of(r.max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                floored,
            },
            rg,
        ))
    }

    /// Mean over rows of `KL(softmax(p) ‖ softmax(q))`, both restricted to the
    /// same masked support.
    pub fn kl_divergence(&mut self, p: Var, q: Var, mask: &[bool]) -> Result<Var> {
        let (vp, vq) = (self.value(p), self.value(q));
        if vp.shape() != vq.shape() || mask.len() != vp.numel() {
            return Err(Error::shape("kl_divergence", vp.shape(), vq.shape()));
        }
        let (r, c) = (vp.rows(), vp.cols());
        let ln_floor = F::of(LOG_FLOOR.ln());
        let n = vp.numel();
        let mut p_probs = vec![F::zero(); n];
        let mut q_probs = vec![F::zero(); n];
        let mut log_ratio = vec![F::zero(); n];
        let mut q_floored = vec![false; n];
        let mut row_kl = Vec::with_capacity(r);
        for i in 0..r {
            let s = i * c..(i + 1) * c;
            let m = &mask[s.clone()];
            let (pr, qr) = (&vp.data()[s.clone()], &vq.data()[s.clone()]);
            let (lse_p, lse_q) = (log_sum_exp(pr, m)?, log_sum_exp(qr, m)?);
            let mut kl = F::zero();
            for j in 0..c {
                if !m[j] {
                    continue;
                }
                let k = i * c + j;
                let lp = pr[j] - lse_p;
                let mut lq = qr[j] - lse_q;
                p_probs[k] = lp.exp();
                q_probs[k] = lq.exp();
                if lq < ln_floor {
                    lq = ln_floor;
                    q_floored[k] = true;
                }
                log_ratio[k] = lp - lq;
                kl += p_probs[k] * log_ratio[k];
            }
            row_kl.push(kl);
        }
        let loss = row_kl.iter().copied().sum::<F>() / F::of(r.max(1) as f64);
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDivergence {
                p,
                q,
                p_probs,
                q_probs,
                log_ratio,
                q_floored,
                row_kl,
            },
            rg,
        ))
    }

    /// Binary cross-entropy on logits: mean over valid entries of each row,
    /// then mean over rows.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[F], mask: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        if targets.len() != vx.numel() || mask.len() != vx.numel() {
            return Err(Error::shape(
                "bce_with_logits",
                vx.shape(),
                &[targets.len()],
            ));
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut weights = vec![F::zero(); vx.numel()];
        let mut total = F::zero();
        for i in 0..r {
            let valid = mask[i * c..(i + 1) * c].iter().filter(|&&m| m).count();
            if valid == 0 {
                continue;
            }
            let w = F::one() / F::of((valid * r) as f64);
            for j in i * c..(i + 1) * c {
                if !mask[j] {
                    continue;
                }
                let (a, y) = (vx.data()[j], targets[j]);
                let l = a.max(F::zero()) - a * y + (-a.abs()).exp().ln_1p();
                total += w * l;
                weights[j] = w;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceWithLogits {
                x,
                targets: targets.to_vec(),
                weights,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// A GRU over `gi: [B, T, 3d]` (input projections, gate order r, z, n)
    /// from a zero state, recorded as a single node. Per step
    /// `gh = h·wh + bh`, `r, z = σ(gi_rz + gh_rz)`,
    /// `n = tanh(gi_n + r ⊙ gh_n)`, `h' = n + z ⊙ (h − n)`.
    /// Returns the states `[B, T, d]`.
    pub fn gru(&mut self, gi: Var, wh: Var, bh: Var) -> Result<Var> {
        let (sg, sw) = (self.shape(gi).to_vec(), self.shape(wh).to_vec());
        if sg.len() != 3 || sw.len() != 2 || sg[2] != sw[1] || sw[1] != 3 * sw[0] {
            return Err(Error::shape("gru", &sg, &sw));
        }
        let (b, t, d) = (sg[0], sg[1], sw[0]);
        if self.value(bh).numel() != 3 * d {
            return Err(Error::shape("gru", &sw, self.shape(bh)));
        }
        let giv = self.value(gi).data();
        let whv = self.value(wh).data();
        let bhv = self.value(bh).data();
        let size = b * t * d;
        let (mut out, mut r, mut z, mut n, mut ghn) = (
            vec![F::zero(); size],
            vec![F::zero(); size],
            vec![F::zero(); size],
            vec![F::zero(); size],
            vec![F::zero(); size],
        );
        let mut h = vec![F::zero(); b * d];
        let mut gh = vec![F::zero(); b * 3 * d];
        for step in 0..t {
            gemm(b, d, 3 * d, &h, false, whv, false, &mut gh, false);
            for bi in 0..b {
                let ghr = &mut gh[bi * 3 * d..(bi + 1) * 3 * d];
                for (x, &c) in ghr.iter_mut().zip(bhv) {
                    *x += c;
                }
                let gir = &giv[(bi * t + step) * 3 * d..(bi * t + step + 1) * 3 * d];
                let at = (bi * t + step) * d;
                for j in 0..d {
                    let rj = sigmoid(gir[j] + ghr[j]);
                    let zj = sigmoid(gir[d + j] + ghr[d + j]);
                    let hn = ghr[2 * d + j];
                    let nj = (gir[2 * d + j] + rj * hn).tanh();
                    let hj = nj + zj * (h[bi * d + j] - nj);
                    r[at + j] = rj;
                    z[at + j] = zj;
                    n[at + j] = nj;
                    ghn[at + j] = hn;
                    out[at + j] = hj;
                }
                h[bi * d..(bi + 1) * d].copy_from_slice(&out[at..at + d]);
            }
        }
        let rg = self.rg(gi) || self.rg(wh) || self.rg(bh);
        Ok(self.push(
            Tensor::new(&[b, t, d], out)?,
            Op::Gru {
                gi,
                wh,
                bh,
                batch: b,
                len: t,
                hidden: d,
                r,
                z,
                n,
                ghn,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let (before, _) = grads.split_at_mut(i);
            self.backprop_node(node, &g, before);
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Gru {
                gi,
                wh,
                bh,
                batch,
                len,
                hidden,
                r,
                z,
                n,
                ghn,
            } => self.backprop_gru(
                node,
                g,
                grads,
                (*gi, *wh, *bh),
                (*batch, *len, *hidden),
                (r.as_slice(), z.as_slice(), n.as_slice(), ghn.as_slice()),
            ),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, bv, true, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..*batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &bv[bi * k * n..(bi + 1) * k * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        // trans_b: a·bᵀ with b stored [n, k], so ∂a = g·b.
                        gemm(m, n, k, gs, false, bs, !*trans_b, out, true);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..*batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gs, true, as_, false, out, true);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, out, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let c = gr.len();
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::MulRow { x, row } => {
                let (xv, rv) = (self.value(*x).data(), self.value(*row).data());
                let c = rv.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (dchunk, gchunk) in gx.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, &s), &w) in dchunk.iter_mut().zip(gchunk).zip(rv) {
                            *d += s * w;
                        }
                    }
                }
                if let Some(gr) = self.slot(grads, *row) {
                    for (gchunk, xchunk) in g.chunks(c).zip(xv.chunks(c)) {
                        for ((d, &s), &a) in gr.iter_mut().zip(gchunk).zip(xchunk) {
                            *d += s * a;
                        }
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let sv = self.value(*s).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dchunk, gchunk), &k) in gx.chunks_mut(c).zip(g.chunks(c)).zip(sv) {
                        for (d, &v) in dchunk.iter_mut().zip(gchunk) {
                            *d += v * k;
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *s) {
                    for ((d, gchunk), xchunk) in
                        gs.iter_mut().zip(g.chunks(c)).zip(xv.data().chunks(c))
                    {
                        *d += gchunk.iter().zip(xchunk).map(|(&a, &b)| a * b).sum::<F>();
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += *scale * s;
                    }
                }
            }
            Op::MulConst { x, c } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &s), &k) in gx.iter_mut().zip(g).zip(c) {
                        *d += s * k;
                    }
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start, len } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (dchunk, gchunk) in gx.chunks_mut(c).zip(g.chunks(*len)) {
                        add_into(&mut dchunk[*start..start + len], gchunk);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::StackSteps { steps } => {
                let s = steps.len();
                let shape = self.shape(steps[0]);
                let (b, c) = (shape[0], shape[1]);
                for (t, &v) in steps.iter().enumerate() {
                    if let Some(gv) = self.slot(grads, v) {
                        for bi in 0..b {
                            add_into(
                                &mut gv[bi * c..(bi + 1) * c],
                                &g[(bi * s + t) * c..(bi * s + t + 1) * c],
                            );
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &s), &a) in gx.iter_mut().zip(g).zip(xv) {
                        if a > F::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &s), &o) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * o * (F::one() - o);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &s), &o) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * (F::one() - o * o);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let c = gv.len();
                let cf = F::of(c as f64);
                if let Some(gb) = self.slot(grads, *beta) {
                    for chunk in g.chunks(c) {
                        add_into(gb, chunk);
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gchunk, hchunk) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &s), &h) in gg.iter_mut().zip(gchunk).zip(hchunk) {
                            *d += s * h;
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for (((dchunk, gchunk), hchunk), &rs) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .zip(rstd)
                    {
                        let mut mean_g = F::zero();
                        let mut mean_gh = F::zero();
                        for ((&s, &w), &h) in gchunk.iter().zip(gv).zip(hchunk) {
                            let gh = s * w;
                            mean_g += gh;
                            mean_gh += gh * h;
                        }
                        mean_g = mean_g / cf;
                        mean_gh = mean_gh / cf;
                        for (((d, &s), &w), &h) in dchunk.iter_mut().zip(gchunk).zip(gv).zip(hchunk)
                        {
                            *d += rs * (s * w - mean_g - h * mean_gh);
                        }
                    }
                }
            }
            Op::Transpose { x, batch, m, n } => {
                let (m, n) = (*m, *n);
                if let Some(gx) = self.slot(grads, *x) {
                    for b in 0..*batch {
                        let o = b * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                gx[o + i * n + j] += g[o + j * m + i];
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dchunk, gchunk), ychunk) in
                        gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c))
                    {
                        let dot = gchunk.iter().zip(ychunk).map(|(&a, &b)| a * b).sum::<F>();
                        for ((d, &s), &o) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *d += o * (s - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                floored,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / F::of(targets.len().max(1) as f64);
                if let Some(gx) = self.slot(grads, *logits) {
                    for (i, (&t, &fl)) in targets.iter().zip(floored).enumerate() {
                        if fl {
                            continue;
                        }
                        for j in 0..c {
                            let k = i * c + j;
                            let onehot = if j == t { F::one() } else { F::zero() };
                            gx[k] += scale * (probs[k] - onehot);
                        }
                    }
                }
            }
            Op::KlDivergence {
                p,
                q,
                p_probs,
                q_probs,
                log_ratio,
                q_floored,
                row_kl,
            } => {
                let c = self.value(*p).cols();
                let scale = g[0] / F::of(row_kl.len().max(1) as f64);
                if let Some(gp) = self.slot(grads, *p) {
                    for (i, &kl) in row_kl.iter().enumerate() {
                        for k in i * c..(i + 1) * c {
                            gp[k] += scale * p_probs[k] * (log_ratio[k] - kl);
                        }
                    }
                }
                if let Some(gq) = self.slot(grads, *q) {
                    for i in 0..row_kl.len() {
                        let s = i * c..(i + 1) * c;
                        let mass: F = s
                            .clone()
                            .filter(|&k| !q_floored[k])
                            .map(|k| p_probs[k])
                            .sum();
                        for k in s {
                            let direct = if q_floored[k] { F::zero() } else { p_probs[k] };
                            gq[k] += scale * (q_probs[k] * mass - direct);
                        }
                    }
                }
            }
            Op::BceWithLogits {
                x,
                targets,
                weights,
            } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (((d, &a), &y), &w) in gx.iter_mut().zip(xv).zip(targets).zip(weights) {
                        *d += g[0] * w * (sigmoid(a) - y);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

/// Result of a backward sweep: gradients of every tracked leaf.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf, if it was reached by the sweep.
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

impl<F: Real> Graph<'_, F> {
    /// Backpropagation through time for [`Graph::gru`].
    #[allow(clippy::type_complexity)]
    fn backprop_gru(
        &self,
        node: &Node<F>,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        (gi, wh, bh): (Var, Var, Var),
        (b, t, d): (usize, usize, usize),
        (r, z, n, ghn): (&[F], &[F], &[F], &[F]),
    ) {
        let states = node.value.data();
        let whv = self.value(wh).data();
        let mut dgi = vec![F::zero(); b * t * 3 * d];
        let mut dwh = vec![F::zero(); d * 3 * d];
        let mut dbh = vec![F::zero(); 3 * d];
        let mut carry = vec![F::zero(); b * d];
        let mut dgh = vec![F::zero(); b * 3 * d];
        let mut hprev = vec![F::zero(); b * d];
        for step in (0..t).rev() {
            for bi in 0..b {
                let at = (bi * t + step) * d;
                let hp = &mut hprev[bi * d..(bi + 1) * d];
                if step == 0 {
                    hp.fill(F::zero());
                } else {
                    hp.copy_from_slice(&states[at - d..at]);
                }
                for j in 0..d {
                    let dh = g[at + j] + carry[bi * d + j];
                    let (rj, zj, nj) = (r[at + j], z[at + j], n[at + j]);
                    let dn = dh * (F::one() - zj);
                    let dz = dh * (hp[j] - nj);
                    let dan = dn * (F::one() - nj * nj);
                    let dr = dan * ghn[at + j];
                    let dar = dr * rj * (F::one() - rj);
                    let daz = dz * zj * (F::one() - zj);
                    let row = &mut dgh[bi * 3 * d..(bi + 1) * 3 * d];
                    row[j] = dar;
                    row[d + j] = daz;
                    row[2 * d + j] = dan * rj;
                    let gir = &mut dgi[(bi * t + step) * 3 * d..(bi * t + step + 1) * 3 * d];
                    gir[j] = dar;
                    gir[d + j] = daz;
                    gir[2 * d + j] = dan;
                    carry[bi * d + j] = dh * zj;
                }
            }
            gemm(b, 3 * d, d, &dgh, false, whv, true, &mut carry, true);
            gemm(d, b, 3 * d, &hprev, true, &dgh, false, &mut dwh, true);
            for row in dgh.chunks(3 * d) {
                add_into(&mut dbh, row);
            }
        }
        if let Some(dst) = self.slot(grads, gi) {
            add_into(dst, &dgi);
        }
        if let Some(dst) = self.slot(grads, wh) {
            add_into(dst, &dwh);
        }
        if let Some(dst) = self.slot(grads, bh) {
            add_into(dst, &dbh);
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<F: Real>(a: F) -> F {
    if a >= F::zero() {
        F::one() / (F::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (F::one() + e)
    }
}

fn log_sum_exp<F: Real>(row: &[F], mask: &[bool]) -> Result<F> {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(None, |acc: Option<F>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or(Error::DegenerateDistribution)?;
    let s: F = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| (v - max).exp())
        .sum();
    Ok(max + s.ln())
}

/// Max-shifted masked softmax of one row into `out`.
pub(crate) fn softmax_row<F: Real>(row: &[F], mask: &[bool], out: &mut [F]) -> Result<()> {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(None, |acc: Option<F>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or(Error::DegenerateDistribution)?;
    let mut total = F::zero();
    for ((o, &v), &m) in out.iter_mut().zip(row).zip(mask) {
        *o = if m { (v - max).exp() } else { F::zero() };
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
    Ok(())
}
