//! Tape-based reverse-mode differentiation over [`Tensor3`] values.
//!
//! Every op evaluates eagerly, stores its output on the tape and records
//! what the reverse pass needs. [`Tape::backward`] walks the nodes in exact
//! reverse order of execution and then marks the tape consumed; call
//! [`Tape::reset`] before recording the next step.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor3;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gaussian-kernel soft histogram grid: `bins` uniform bins on `[-range, range]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistGrid {
    pub bins: usize,
    pub range: f64,
    pub bandwidth: f64,
}

impl HistGrid {
    pub fn bin_width(&self) -> f64 {
        2.0 * self.range / self.bins as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        -self.range + (k as f64 + 0.5) * self.bin_width()
    }

    pub fn edge(&self, k: usize) -> f64 {
        -self.range + k as f64 * self.bin_width()
    }
}

/// Bins further than this many bin widths from a sample's nearest bin carry
/// weight below `exp(-112)` relative to it (at half-bin bandwidth) and are skipped.
const SOFT_HIST_WINDOW: usize = 8;

/// Batch statistics produced by a train-mode batch norm, per channel.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalisation.
    pub var: Vec<f64>,
    /// Number of values pooled per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    MulConst(Var, f64),
    Powf(Var, f64),
    Ln(Var),
    Relu(Var),
    Mean(Var),
    Sum(Var),
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, frozen: bool },
    AvgPool(Var),
    Upsample(Var),
    Cumsum(Var),
    Slice { x: Var, start: usize },
    Increments { x: Var, lag: usize },
    StructureFn { x: Var, lag: usize, order: i32 },
    SoftHist { x: Var, grid: HistGrid },
    Kl { p: Var, q: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor3,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Result of a reverse pass: gradients of leaves and parameters.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor3>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter node; `None` when the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor3> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(parameter index, gradient)` for every parameter node reached.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor3)> {
        self.params.iter().filter_map(|&(node, p)| self.grads[node].as_ref().map(|g| (p, g)))
    }
}

fn binary_shape(a: &Tensor3, b: &Tensor3) -> Result<(usize, usize, usize)> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape())
    } else if a.is_scalar() {
        Ok(b.shape())
    } else {
        Err(Error::Shape(format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))
    }
}

fn broadcast_zip(a: &Tensor3, b: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
    let (n0, n1, n2) = binary_shape(a, b)?;
    let len = n0 * n1 * n2;
    let ad = a.data();
    let bd = b.data();
    let data = (0..len)
        .map(|i| {
            let av = if ad.len() == 1 { ad[0] } else { ad[i] };
            let bv = if bd.len() == 1 { bd[0] } else { bd[i] };
            f(av, bv)
        })
        .collect();
    Tensor3::new(n0, n1, n2, data)
}

/// Reduce `g` to the shape of an operand that may have been broadcast.
fn unbroadcast(g: Tensor3, operand: &Tensor3) -> Tensor3 {
    if operand.is_scalar() && !g.is_scalar() {
        Tensor3::scalar(g.data().iter().sum())
    } else {
        g
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Drop every recorded node so the tape can record a fresh step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor3 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor3, op: Op, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::State("tape already consumed; reset before recording".into()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows to it.
    pub fn constant(&mut self, value: Tensor3) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, value: Tensor3) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf bound to parameter slot `index` of the caller's parameter set.
    pub fn param(&mut self, value: Tensor3, index: usize) -> Result<Var> {
        self.push(value, Op::Param(index), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a), ng)
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_const(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.powf(a, 2.0)
    }

    /// Elementwise `a^e`. Negative bases are accepted only for integer `e`;
    /// zero bases only for `e ≥ 1` so the derivative stays finite.
    pub fn powf(&mut self, a: Var, e: f64) -> Result<Var> {
        let integer = e.fract() == 0.0;
        for &x in self.value(a).data() {
            if (x < 0.0 && !integer) || (x == 0.0 && e < 1.0) {
                return Err(Error::Domain(format!("pow({x}, {e}) is not differentiable")));
            }
        }
        let v = if integer {
            let ei = e as i32;
            self.value(a).map(|x| x.powi(ei))
        } else {
            self.value(a).map(|x| x.powf(e))
        };
        let ng = self.ng(a);
        self.push(v, Op::Powf(a, e), ng)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(&x) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor3::scalar(m), Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        let ng = self.ng(a);
        self.push(Tensor3::scalar(s), Op::Sum(a), ng)
    }

    fn conv_geom(&self, x: Var, w: Var, b: Option<Var>, transpose: bool) -> Result<ConvGeom> {
        let xs = self.value(x);
        let ws = self.value(w);
        // weights are stored as (batch=dim0, channels=dim1, length=k)
        let (d0, d1, k) = ws.shape();
        let (cin, cout) = if transpose { (d0, d1) } else { (d1, d0) };
        if xs.channels() != cin {
            return Err(Error::Shape(format!("input has {} channels, kernel expects {cin}", xs.channels())));
        }
        let (pl, pr) = kernels::same_padding(k);
        if k > xs.length() + pl + pr {
            return Err(Error::Shape(format!("kernel {k} longer than padded input {}", xs.length() + pl + pr)));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::Shape(format!("bias has {} entries, expected {cout}", self.value(b).len())));
            }
        }
        Ok(ConvGeom { cin, cout, k, len: xs.length() })
    }

    /// Stride-1 "same" cross-correlation. `w` has shape `(cout, cin, k)`,
    /// `b` (any shape with `cout` entries) is optional.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let geom = self.conv_geom(x, w, b, false)?;
        let batch = self.value(x).batch();
        let y = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            batch,
            geom,
        );
        let v = Tensor3::new(batch, geom.cout, geom.len, y)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(v, Op::Conv1d { x, w, b, geom }, ng)
    }

    /// Transpose convolution, the exact adjoint of [`Tape::conv1d`] in its
    /// spatial part. `w` has shape `(cin, cout, k)`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let tg = self.conv_geom(x, w, b, true)?;
        let batch = self.value(x).batch();
        // as a conv, this op's output channels are the conv's inputs
        let cg = ConvGeom { cin: tg.cout, cout: tg.cin, k: tg.k, len: tg.len };
        let mut y = kernels::conv1d_adjoint(self.value(x).data(), self.value(w).data(), batch, cg);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (row, chunk) in y.chunks_mut(tg.len).enumerate() {
                let bo = bias[row % tg.cout];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
        let v = Tensor3::new(batch, tg.cout, tg.len, y)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(v, Op::ConvT1d { x, w, b, geom: tg }, ng)
    }

    /// Train-mode batch norm: normalise each channel over (batch, length)
    /// with its biased variance, then apply `gamma`, `beta`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xt = self.value(x);
        let (nb, nc, nl) = xt.shape();
        let count = nb * nl;
        if count < 2 {
            return Err(Error::Contract(format!("batch norm needs ≥ 2 values per channel, got {count}")));
        }
        self.check_affine(gamma, beta, nc)?;
        let mut mean = vec![0.0; nc];
        let mut var = vec![0.0; nc];
        for c in 0..nc {
            let s: f64 = (0..nb).map(|b| xt.row(b, c).iter().sum::<f64>()).sum();
            let m = s / count as f64;
            let ss: f64 = (0..nb).map(|b| xt.row(b, c).iter().map(|v| (v - m) * (v - m)).sum::<f64>()).sum();
            mean[c] = m;
            var[c] = ss / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, y) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let v = Tensor3::new(nb, nc, nl, y)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let out = self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std, frozen: false }, ng)?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Eval-mode batch norm with fixed per-channel statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (nb, nc, nl) = self.value(x).shape();
        self.check_affine(gamma, beta, nc)?;
        if running_mean.len() != nc || running_var.len() != nc {
            return Err(Error::Shape("running statistics do not match channel count".into()));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, y) = self.normalize(x, gamma, beta, running_mean, &inv_std);
        let v = Tensor3::new(nb, nc, nl, y)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        // frozen statistics: the map is affine in x with no batch coupling
        let xhat = if ng { xhat } else { Vec::new() };
        self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std, frozen: true }, ng)
    }

    fn check_affine(&self, gamma: Var, beta: Var, nc: usize) -> Result<()> {
        if self.value(gamma).len() != nc || self.value(beta).len() != nc {
            return Err(Error::Shape(format!("batch norm affine parameters must have {nc} entries")));
        }
        Ok(())
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let xt = self.value(x);
        let (nb, nc, nl) = xt.shape();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; nb * nc * nl];
        let mut y = vec![0.0; nb * nc * nl];
        for b in 0..nb {
            for c in 0..nc {
                let off = (b * nc + c) * nl;
                for (i, &v) in xt.row(b, c).iter().enumerate() {
                    let h = (v - mean[c]) * inv_std[c];
                    xhat[off + i] = h;
                    y[off + i] = g[c] * h + be[c];
                }
            }
        }
        (xhat, y)
    }

    /// Average pooling by 2 along the spatial axis.
    pub fn avg_pool1d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (nb, nc, nl) = t.shape();
        if nl % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool1d needs even length, got {nl}")));
        }
        let data = t.data().chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        let v = Tensor3::new(nb, nc, nl / 2, data)?;
        let ng = self.ng(x);
        self.push(v, Op::AvgPool(x), ng)
    }

    /// Nearest-neighbour upsampling by 2.
    pub fn upsample1d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (nb, nc, nl) = t.shape();
        let data = t.data().iter().flat_map(|&v| [v, v]).collect();
        let v = Tensor3::new(nb, nc, 2 * nl, data)?;
        let ng = self.ng(x);
        self.push(v, Op::Upsample(x), ng)
    }

    /// Inclusive cumulative sum along the spatial axis.
    pub fn cumsum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(t.length()) {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                acc += *v;
                *v = acc;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Cumsum(x), ng)
    }

    /// Spatial window `[start, start + len)`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (nb, nc, nl) = t.shape();
        if len == 0 || start + len > nl {
            return Err(Error::Shape(format!("slice [{start}, {}) outside length {nl}", start + len)));
        }
        let data = t.data().chunks(nl).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let v = Tensor3::new(nb, nc, len, data)?;
        let ng = self.ng(x);
        self.push(v, Op::Slice { x, start }, ng)
    }

    /// `out[x] = field[x + lag] − field[x]` along the spatial axis.
    pub fn increments(&mut self, x: Var, lag: usize) -> Result<Var> {
        let t = self.value(x);
        let (nb, nc, nl) = t.shape();
        if lag == 0 || lag >= nl {
            return Err(Error::Scale { scale: lag, len: nl });
        }
        let data = t.data().chunks(nl).flat_map(|r| (0..nl - lag).map(move |i| r[i + lag] - r[i])).collect();
        let v = Tensor3::new(nb, nc, nl - lag, data)?;
        let ng = self.ng(x);
        self.push(v, Op::Increments { x, lag }, ng)
    }

    /// Fused `mean((field[x+lag] − field[x])^order)`, pooled over every row.
    pub fn structure_function(&mut self, x: Var, lag: usize, order: i32) -> Result<Var> {
        let t = self.value(x);
        let nl = t.length();
        if lag == 0 || lag >= nl {
            return Err(Error::Scale { scale: lag, len: nl });
        }
        if order < 1 {
            return Err(Error::Contract(format!("structure function order must be ≥ 1, got {order}")));
        }
        let value = crate::mstats::structure_function_rows(t.data(), nl, lag, order);
        let ng = self.ng(x);
        self.push(Tensor3::scalar(value), Op::StructureFn { x, lag, order }, ng)
    }

    /// Soft histogram of every value of `x`, as a `(1, 1, bins)` probability vector.
    pub fn soft_histogram(&mut self, x: Var, grid: HistGrid) -> Result<Var> {
        if grid.bins == 0 || grid.range <= 0.0 || grid.bandwidth <= 0.0 {
            return Err(Error::Contract("soft histogram needs bins > 0, range > 0, bandwidth > 0".into()));
        }
        let sample = self.value(x).data();
        let n = sample.len() as f64;
        let mut p = vec![0.0; grid.bins];
        let mut w = Vec::with_capacity(2 * SOFT_HIST_WINDOW + 1);
        for &z in sample {
            let (lo, _) = soft_weights(z, grid, &mut w);
            for (k, a) in w.iter().enumerate() {
                p[lo + k] += a / n;
            }
        }
        let v = Tensor3::from_vec(p)?;
        let ng = self.ng(x);
        self.push(v, Op::SoftHist { x, grid }, ng)
    }

    /// `Σ p·ln(p/q)` with `q` floored at `floor` and `0·ln 0 = 0`.
    pub fn kl_divergence(&mut self, p: Var, q: &[f64], floor: f64) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != q.len() {
            return Err(Error::Shape(format!("p has {} entries, q has {}", pv.len(), q.len())));
        }
        if pv.iter().chain(q).any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Contract("probability vectors must be finite and non-negative".into()));
        }
        let q: Vec<f64> = q.iter().map(|&v| v.max(floor)).collect();
        let kl = pv.iter().zip(&q).map(|(&pk, &qk)| if pk > 0.0 { pk * (pk / qk).ln() } else { 0.0 }).sum();
        let ng = self.ng(p);
        self.push(Tensor3::scalar(kl), Op::Kl { p, q }, ng)
    }

    /// Reverse pass from the scalar `loss`; consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("tape already consumed".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor3>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor3::scalar(1.0));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => continue,
                Op::Param(p) => {
                    params.push((i, p));
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            for (var, contrib) in self.node_backward(i, &g) {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn node_backward(&self, i: usize, g: &Tensor3) -> Vec<(Var, Tensor3)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Add(a, b) => vec![(*a, unbroadcast(g.clone(), val(*a))), (*b, unbroadcast(g.clone(), val(*b)))],
            Op::Sub(a, b) => vec![(*a, unbroadcast(g.clone(), val(*a))), (*b, unbroadcast(g.map(|x| -x), val(*b)))],
            Op::Mul(a, b) => {
                let ga = broadcast_zip(g, val(*b), |g, y| g * y).expect("shape checked at record time");
                let gb = broadcast_zip(g, val(*a), |g, x| g * x).expect("shape checked at record time");
                vec![(*a, unbroadcast(ga, val(*a))), (*b, unbroadcast(gb, val(*b)))]
            }
            Op::Div(a, b) => {
                let ga = broadcast_zip(g, val(*b), |g, y| g / y).expect("shape checked at record time");
                // d(a/b)/db = −(a/b)/b
                let q = &node.value;
                let gq = broadcast_zip(g, q, |g, q| g * q).expect("same shape");
                let gb = broadcast_zip(&gq, val(*b), |gq, y| -gq / y).expect("shape checked at record time");
                vec![(*a, unbroadcast(ga, val(*a))), (*b, unbroadcast(gb, val(*b)))]
            }
            Op::AddConst(a) => vec![(*a, g.clone())],
            Op::MulConst(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::Powf(a, e) => {
                let e = *e;
                let ga = broadcast_zip(g, val(*a), |g, x| {
                    if e.fract() == 0.0 {
                        g * e * x.powi(e as i32 - 1)
                    } else {
                        g * e * x.powf(e - 1.0)
                    }
                })
                .expect("same shape");
                vec![(*a, ga)]
            }
            Op::Ln(a) => vec![(*a, broadcast_zip(g, val(*a), |g, x| g / x).expect("same shape"))],
            Op::Relu(a) => {
                vec![(*a, broadcast_zip(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }).expect("same shape"))]
            }
            Op::Mean(a) => {
                let t = val(*a);
                let (nb, nc, nl) = t.shape();
                vec![(*a, Tensor3::filled(nb, nc, nl, g.item() / t.len() as f64))]
            }
            Op::Sum(a) => {
                let (nb, nc, nl) = val(*a).shape();
                vec![(*a, Tensor3::filled(nb, nc, nl, g.item()))]
            }
            Op::Conv1d { x, w, b, geom } => {
                let batch = val(*x).batch();
                let mut out = Vec::new();
                if self.ng(*x) {
                    let gx = kernels::conv1d_adjoint(g.data(), val(*w).data(), batch, *geom);
                    out.push((*x, Tensor3::new(batch, geom.cin, geom.len, gx).expect("shape")));
                }
                if self.ng(*w) {
                    let gw = kernels::conv1d_weight_grad(val(*x).data(), g.data(), batch, *geom);
                    let (d0, d1, d2) = val(*w).shape();
                    out.push((*w, Tensor3::new(d0, d1, d2, gw).expect("shape")));
                }
                if let Some(b) = b {
                    out.push((*b, bias_grad(g, val(*b), batch, geom.cout, geom.len)));
                }
                out
            }
            Op::ConvT1d { x, w, b, geom } => {
                let batch = val(*x).batch();
                let cg = ConvGeom { cin: geom.cout, cout: geom.cin, k: geom.k, len: geom.len };
                let mut out = Vec::new();
                if self.ng(*x) {
                    let gx = kernels::conv1d_forward(g.data(), val(*w).data(), None, batch, cg);
                    out.push((*x, Tensor3::new(batch, geom.cin, geom.len, gx).expect("shape")));
                }
                if self.ng(*w) {
                    // w[c][o][j] pairs input channel c with output channel o, which
                    // is the conv weight gradient with the roles of x and gy swapped
                    let wg = ConvGeom { cin: geom.cout, cout: geom.cin, k: geom.k, len: geom.len };
                    let gw = kernels::conv1d_weight_grad(g.data(), val(*x).data(), batch, wg);
                    let (d0, d1, d2) = val(*w).shape();
                    out.push((*w, Tensor3::new(d0, d1, d2, gw).expect("shape")));
                }
                if let Some(b) = b {
                    out.push((*b, bias_grad(g, val(*b), batch, geom.cout, geom.len)));
                }
                out
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, frozen } => {
                bn_backward(g, (val(*x), val(*gamma), val(*beta)), (*x, *gamma, *beta), xhat, inv_std, *frozen)
            }
            Op::AvgPool(a) => {
                let (nb, nc, nl) = val(*a).shape();
                let data = g.data().iter().flat_map(|&v| [0.5 * v, 0.5 * v]).collect();
                vec![(*a, Tensor3::new(nb, nc, nl, data).expect("shape"))]
            }
            Op::Upsample(a) => {
                let (nb, nc, nl) = val(*a).shape();
                let data = g.data().chunks_exact(2).map(|p| p[0] + p[1]).collect();
                vec![(*a, Tensor3::new(nb, nc, nl, data).expect("shape"))]
            }
            Op::Cumsum(a) => {
                let mut ga = g.clone();
                let nl = ga.length();
                for row in ga.data_mut().chunks_mut(nl) {
                    let mut acc = 0.0;
                    for v in row.iter_mut().rev() {
                        acc += *v;
                        *v = acc;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Slice { x, start } => {
                let xt = val(*x);
                let mut ga = Tensor3::zeros_like(xt);
                let (gl, nl) = (g.length(), xt.length());
                for (dst, src) in ga.data_mut().chunks_mut(nl).zip(g.data().chunks(gl)) {
                    dst[*start..*start + gl].copy_from_slice(src);
                }
                vec![(*x, ga)]
            }
            Op::Increments { x, lag } => {
                let xt = val(*x);
                let mut ga = Tensor3::zeros_like(xt);
                let (gl, nl) = (g.length(), xt.length());
                for (dst, src) in ga.data_mut().chunks_mut(nl).zip(g.data().chunks(gl)) {
                    for (i, &gv) in src.iter().enumerate() {
                        dst[i + lag] += gv;
                        dst[i] -= gv;
                    }
                }
                vec![(*x, ga)]
            }
            Op::StructureFn { x, lag, order } => {
                let xt = val(*x);
                let nl = xt.length();
                let rows = xt.len() / nl;
                let count = (rows * (nl - lag)) as f64;
                let scale = g.item() * *order as f64 / count;
                let mut ga = Tensor3::zeros_like(xt);
                for (dst, src) in ga.data_mut().chunks_mut(nl).zip(xt.data().chunks(nl)) {
                    for i in 0..nl - lag {
                        let d = src[i + lag] - src[i];
                        let gv = scale * d.powi(order - 1);
                        dst[i + lag] += gv;
                        dst[i] -= gv;
                    }
                }
                vec![(*x, ga)]
            }
            Op::SoftHist { x, grid } => {
                let xt = val(*x);
                let n = xt.len() as f64;
                let gp = g.data();
                let h2 = grid.bandwidth * grid.bandwidth;
                let mut w = Vec::with_capacity(2 * SOFT_HIST_WINDOW + 1);
                let data = xt
                    .data()
                    .iter()
                    .map(|&z| {
                        let (lo, _) = soft_weights(z, *grid, &mut w);
                        // d a_k / dz = a_k (s_k − Σ_m a_m s_m), s_k = −(z − c_k)/h²
                        let s = |k: usize| -(z - grid.center(lo + k)) / h2;
                        let sbar: f64 = w.iter().enumerate().map(|(k, a)| a * s(k)).sum();
                        w.iter().enumerate().map(|(k, a)| gp[lo + k] * a * (s(k) - sbar)).sum::<f64>() / n
                    })
                    .collect();
                let (nb, nc, nl) = xt.shape();
                vec![(*x, Tensor3::new(nb, nc, nl, data).expect("shape"))]
            }
            Op::Kl { p, q } => {
                let gv = g.item();
                let data: Vec<f64> = val(*p)
                    .data()
                    .iter()
                    .zip(q)
                    .map(|(&pk, &qk)| if pk > 0.0 { gv * ((pk / qk).ln() + 1.0) } else { 0.0 })
                    .collect();
                let (nb, nc, nl) = val(*p).shape();
                vec![(*p, Tensor3::new(nb, nc, nl, data).expect("shape"))]
            }
        }
    }
}

/// Normalised Gaussian-kernel weights of `z` over the bins near it.
/// Returns the first bin index covered; `w` holds the weights.
pub(crate) fn soft_weights(z: f64, grid: HistGrid, w: &mut Vec<f64>) -> (usize, usize) {
    let width = grid.bin_width();
    let nearest = (((z + grid.range) / width).floor().max(0.0) as usize).min(grid.bins - 1);
    let lo = nearest.saturating_sub(SOFT_HIST_WINDOW);
    let hi = (nearest + SOFT_HIST_WINDOW).min(grid.bins - 1);
    let two_h2 = 2.0 * grid.bandwidth * grid.bandwidth;
    w.clear();
    let logits = (lo..=hi).map(|k| {
        let d = z - grid.center(k);
        -d * d / two_h2
    });
    w.extend(logits);
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in w.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    (lo, hi)
}

fn bias_grad(g: &Tensor3, b: &Tensor3, batch: usize, cout: usize, len: usize) -> Tensor3 {
    let sums = kernels::channel_sums(g.data(), batch, cout, len);
    let (d0, d1, d2) = b.shape();
    Tensor3::new(d0, d1, d2, sums).expect("bias shape")
}

fn bn_backward(
    g: &Tensor3,
    (x, gamma, beta): (&Tensor3, &Tensor3, &Tensor3),
    (xv, gv, bv): (Var, Var, Var),
    xhat: &[f64],
    inv_std: &[f64],
    frozen: bool,
) -> Vec<(Var, Tensor3)> {
    let (nb, nc, nl) = x.shape();
    let gam = gamma.data();
    let gd = g.data();
    let mut g_gamma = vec![0.0; nc];
    let mut g_beta = vec![0.0; nc];
    for b in 0..nb {
        for c in 0..nc {
            let off = (b * nc + c) * nl;
            for i in 0..nl {
                g_beta[c] += gd[off + i];
                g_gamma[c] += gd[off + i] * xhat[off + i];
            }
        }
    }
    let count = (nb * nl) as f64;
    let mut gx = vec![0.0; nb * nc * nl];
    for b in 0..nb {
        for c in 0..nc {
            let off = (b * nc + c) * nl;
            if frozen {
                let s = inv_std[c] * gam[c];
                for i in 0..nl {
                    gx[off + i] = s * gd[off + i];
                }
            } else {
                let s = gam[c] * inv_std[c] / count;
                for i in 0..nl {
                    gx[off + i] = s * (count * gd[off + i] - g_beta[c] - xhat[off + i] * g_gamma[c]);
                }
            }
        }
    }
    let shape_of = |t: &Tensor3, d: Vec<f64>| {
        let (a, b, c) = t.shape();
        Tensor3::new(a, b, c, d).expect("affine shape")
    };
    vec![
        (xv, Tensor3::new(nb, nc, nl, gx).expect("shape")),
        (gv, shape_of(gamma, g_gamma)),
        (bv, shape_of(beta, g_beta)),
    ]
}
