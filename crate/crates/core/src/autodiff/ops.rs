use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::tape::Node;
use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// User-supplied backward rule for [`Tape::custom_unary`]:
/// `(input, output, grad_output) -> grad_input`.
pub type CustomBackward<T> = Arc<dyn Fn(&[T], &[T], &[T]) -> Vec<T> + Send + Sync>;

/// Per-channel batch statistics computed by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowVector {
        x: usize,
        bias: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
        batch: usize,
        cols: Vec<Vec<T>>,
    },
    Relu(usize),
    Sigmoid(usize),
    Sum(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    MeanAxis {
        x: usize,
        axis: usize,
    },
    SqNorm(usize),
    Norm(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        map: Vec<usize>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Squash(usize),
    CapsPredict {
        u: usize,
        w: usize,
    },
    RoutingCombine {
        c: usize,
        uhat: usize,
    },
    Agreement {
        uhat: usize,
        v: usize,
    },
    Custom {
        x: usize,
        backward: CustomBackward<T>,
    },
}

/// Squash epsilon inside the norm; keeps the zero vector differentiable.
pub(crate) const SQUASH_EPS: f64 = 1e-8;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

/// For each output position of a permuted tensor, the linear index it reads
/// from in the source.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn squash_factor<T: Real>(q: T) -> (T, T) {
    let one = T::one();
    let den = (q + T::from_f64(SQUASH_EPS)).sqrt();
    let g = q / ((one + q) * den);
    let gp = one / ((one + q) * den)
        - q / ((one + q) * (one + q) * den)
        - q / (T::from_f64(2.0) * (one + q) * den * den * den);
    (g, gp)
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::AddRowVector { .. } => "add_row_vector",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sum(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::SqNorm(_) => "sq_l2_norm",
            Op::Norm(_) => "l2_norm",
            Op::Softmax { .. } => "softmax",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Squash(_) => "squash",
            Op::CapsPredict { .. } => "caps_predict",
            Op::RoutingCombine { .. } => "routing_combine",
            Op::Agreement { .. } => "agreement",
            Op::Custom { .. } => "custom",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Sum(x)
            | Op::SqNorm(x)
            | Op::Norm(x)
            | Op::Reshape(x)
            | Op::Squash(x) => vec![*x],
            Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::Custom { x, .. } => vec![*x],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::AddRowVector { x, bias } => vec![*x, *bias],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat { xs, .. } => xs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CapsPredict { u, w } => vec![*u, *w],
            Op::RoutingCombine { c, uhat } => vec![*c, *uhat],
            Op::Agreement { uhat, v } => vec![*uhat, *v],
        }
    }
}

impl<T: Real> Op<T> {
    /// Gradient contributions `(input id, d loss / d input)` given the
    /// upstream gradient `g` of node `id`.
    pub(crate) fn backward(&self, nodes: &[Node<T>], id: usize, g: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
        let val = |i: usize| nodes[i].value.data();
        let shape = |i: usize| nodes[i].value.shape();
        let needs = |i: usize| nodes[i].requires_grad;
        let out = val(id);
        let mut res = Vec::new();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    res.push((*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect()));
                }
                if needs(*b) {
                    res.push((*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect()));
                }
            }
            Op::Scale(x, s) => res.push((*x, g.iter().map(|&v| v * *s).collect())),
            Op::AddScalar(x) => res.push((*x, g.to_vec())),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    let bt = kernels::transpose(k, n, val(*b));
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm_acc(m, n, k, g, &bt, &mut ga);
                    res.push((*a, ga));
                }
                if needs(*b) {
                    let at = kernels::transpose(m, k, val(*a));
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm_acc(k, m, n, &at, g, &mut gb);
                    res.push((*b, gb));
                }
            }
            Op::AddRowVector { x, bias } => {
                res.push((*x, g.to_vec()));
                if needs(*bias) {
                    let n = val(*bias).len();
                    let mut gb = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                    res.push((*bias, gb));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cols,
            } => {
                let grads = kernels::conv2d_backward(geom, *batch, cols, val(*w), g, needs(*x));
                if needs(*x) {
                    res.push((*x, grads.dx));
                }
                res.push((*w, grads.dw));
                if let Some(b) = b {
                    res.push((*b, grads.db));
                }
            }
            Op::Relu(x) => res.push((
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )),
            Op::Sigmoid(x) => res.push((
                *x,
                g.iter().zip(out).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
            )),
            Op::Sum(x) => res.push((*x, vec![g[0]; val(*x).len()])),
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(shape(*x), *axis);
                let scale = if matches!(self, Op::MeanAxis { .. }) {
                    T::one() / T::from_f64(len as f64)
                } else {
                    T::one()
                };
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::SqNorm(x) => {
                let d = last_dim(shape(*x));
                let xv = val(*x);
                let gx = xv
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| T::from_f64(2.0) * v * g[i / d])
                    .collect();
                res.push((*x, gx));
            }
            Op::Norm(x) => {
                let d = last_dim(shape(*x));
                let xv = val(*x);
                let gx = xv
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let n = out[i / d];
                        if n > T::zero() {
                            g[i / d] * v / n
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                res.push((*x, gx));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(shape(*x), *axis);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Permute { x, map } => {
                let mut gx = vec![T::zero(); g.len()];
                for (o, &src) in map.iter().enumerate() {
                    gx[src] = g[o];
                }
                res.push((*x, gx));
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = split_axis(shape(*x), *axis);
                let len = shape(id)[*axis];
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(src);
                }
                res.push((*x, gx));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(shape(id), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = shape(x)[*axis];
                    if needs(x) {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[s..s + len * inner]);
                        }
                        res.push((x, gx));
                    }
                    offset += len;
                }
            }
            Op::GatherRows { table, indices } => {
                let width = last_dim(shape(*table));
                let mut gt = vec![T::zero(); val(*table).len()];
                for (r, &src) in indices.iter().enumerate() {
                    let dst = &mut gt[src * width..(src + 1) * width];
                    dst.iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(a, b)| *a += *b);
                }
                res.push((*table, gt));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let gam = val(*gamma);
                let m = T::from_f64((n * s) as f64);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        for i in base..base + s {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if needs(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * s;
                            let k = gam[ch] * inv_std[ch];
                            for i in base..base + s {
                                gx[i] = if *train {
                                    k / m * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                res.push((*gamma, sum_gx));
                res.push((*beta, sum_g));
            }
            Op::Squash(x) => {
                let d = last_dim(shape(*x));
                let xv = val(*x);
                let mut gx = vec![T::zero(); xv.len()];
                for (r, (srow, grow)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                    let q: T = srow.iter().map(|&v| v * v).sum();
                    let dot: T = srow.iter().zip(grow).map(|(&s, &g)| s * g).sum();
                    let (f, fp) = squash_factor(q);
                    let two = T::from_f64(2.0);
                    for k in 0..d {
                        gx[r * d + k] = grow[k] * f + two * srow[k] * fp * dot;
                    }
                }
                res.push((*x, gx));
            }
            Op::CapsPredict { u, w } => {
                let ws = shape(*w);
                let (ni, nj, dout, din) = (ws[0], ws[1], ws[2], ws[3]);
                let batch = shape(*u)[0];
                let (uv, wv) = (val(*u), val(*w));
                if needs(*u) {
                    let mut gu = vec![T::zero(); uv.len()];
                    for b in 0..batch {
                        for i in 0..ni {
                            let gu_row = &mut gu[(b * ni + i) * din..(b * ni + i + 1) * din];
                            for j in 0..nj {
                                for o in 0..dout {
                                    let gv = g[((b * ni + i) * nj + j) * dout + o];
                                    let wrow = &wv[((i * nj + j) * dout + o) * din..][..din];
                                    gu_row.iter_mut().zip(wrow).for_each(|(a, &w)| *a += gv * w);
                                }
                            }
                        }
                    }
                    res.push((*u, gu));
                }
                if needs(*w) {
                    let mut gw = vec![T::zero(); wv.len()];
                    for b in 0..batch {
                        for i in 0..ni {
                            let u_row = &uv[(b * ni + i) * din..(b * ni + i + 1) * din];
                            for j in 0..nj {
                                for o in 0..dout {
                                    let gv = g[((b * ni + i) * nj + j) * dout + o];
                                    let wrow = &mut gw[((i * nj + j) * dout + o) * din..][..din];
                                    wrow.iter_mut().zip(u_row).for_each(|(a, &u)| *a += gv * u);
                                }
                            }
                        }
                    }
                    res.push((*w, gw));
                }
            }
            Op::RoutingCombine { c, uhat } => {
                let us = shape(*uhat);
                let (batch, ni, nj, d) = (us[0], us[1], us[2], us[3]);
                let (cv, uv) = (val(*c), val(*uhat));
                if needs(*c) {
                    let mut gc = vec![T::zero(); cv.len()];
                    for b in 0..batch {
                        for i in 0..ni {
                            for j in 0..nj {
                                let urow = &uv[((b * ni + i) * nj + j) * d..][..d];
                                let grow = &g[(b * nj + j) * d..][..d];
                                gc[(b * ni + i) * nj + j] = urow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                            }
                        }
                    }
                    res.push((*c, gc));
                }
                if needs(*uhat) {
                    let mut gu = vec![T::zero(); uv.len()];
                    for b in 0..batch {
                        for i in 0..ni {
                            for j in 0..nj {
                                let cij = cv[(b * ni + i) * nj + j];
                                let grow = &g[(b * nj + j) * d..][..d];
                                let dst = &mut gu[((b * ni + i) * nj + j) * d..][..d];
                                dst.iter_mut().zip(grow).for_each(|(a, &g)| *a = cij * g);
                            }
                        }
                    }
                    res.push((*uhat, gu));
                }
            }
            Op::Agreement { uhat, v } => {
                let us = shape(*uhat);
                let (batch, ni, nj, d) = (us[0], us[1], us[2], us[3]);
                let (uv, vv) = (val(*uhat), val(*v));
                if needs(*uhat) {
                    let mut gu = vec![T::zero(); uv.len()];
                    for b in 0..batch {
                        for i in 0..ni {
                            for j in 0..nj {
                                let gij = g[(b * ni + i) * nj + j];
                                let vrow = &vv[(b * nj + j) * d..][..d];
                                let dst = &mut gu[((b * ni + i) * nj + j) * d..][..d];
                                dst.iter_mut().zip(vrow).for_each(|(a, &v)| *a = gij * v);
                            }
                        }
                    }
                    res.push((*uhat, gu));
                }
                if needs(*v) {
                    let mut gv = vec![T::zero(); vv.len()];
                    for b in 0..batch {
                        for i in 0..ni {
                            for j in 0..nj {
                                let gij = g[(b * ni + i) * nj + j];
                                let urow = &uv[((b * ni + i) * nj + j) * d..][..d];
                                let dst = &mut gv[(b * nj + j) * d..][..d];
                                dst.iter_mut().zip(urow).for_each(|(a, &u)| *a += gij * u);
                            }
                        }
                    }
                    res.push((*v, gv));
                }
            }
            Op::Custom { x, backward } => {
                let gx = backward(val(*x), out, g);
                if gx.len() != g.len() {
                    return Err(Error::Backward(format!(
                        "custom backward returned {} values for {} inputs",
                        gx.len(),
                        g.len()
                    )));
                }
                res.push((*x, gx));
            }
        }
        Ok(res)
    }
}

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape(op.name(), a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data)?;
        self.push(t, op)
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect())?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a.id, b.id), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a.id, b.id), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a.id, b.id), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        self.map(x, Op::Scale(x.id, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        self.map(x, Op::AddScalar(x.id), |v| v + s)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x.id), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// `max(0, x)`; identical to [`Tape::relu`].
    pub fn max0(&mut self, x: Var) -> Result<Var> {
        self.relu(x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x.id), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        kernels::gemm_acc(m, k, n, self.value(a).data(), self.value(b).data(), &mut c);
        let t = Tensor::new(&[m, n], c)?;
        self.push(
            t,
            Op::MatMul {
                a: a.id,
                b: b.id,
                m,
                k,
                n,
            },
        )
    }

    /// Adds `bias [n]` to every length-`n` row along the last axis.
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || last_dim(sx) != sb[0] || sx.is_empty() {
            return Err(Error::shape("add_row_vector", format!("{sx:?} + {sb:?}")));
        }
        let bv = self.value(bias).data();
        let n = bv.len();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let t = Tensor::new(xv.shape(), data)?;
        self.push(t, Op::AddRowVector { x: x.id, bias: bias.id })
    }

    /// 2-D convolution of `x [N, C, H, W]` with `w [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", format!("input {sx:?}, kernel {sw:?}, stride {stride}")));
        }
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(Error::shape("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}")));
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} filters", self.shape(b), sw[0])));
            }
        }
        let geom = ConvGeometry {
            in_channels: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
        };
        let batch = sx[0];
        let bias = b.map(|b| self.value(b).data());
        let (y, cols) = kernels::conv2d_forward(&geom, batch, self.value(x).data(), self.value(w).data(), bias);
        let t = Tensor::new(&[batch, geom.out_channels, geom.out_h(), geom.out_w()], y)?;
        self.push(
            t,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
                batch,
                cols,
            },
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.id))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("reduce_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let scale = if mean { T::one() / T::from_f64(len as f64) } else { T::one() };
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * len + k) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let op = if mean {
            Op::MeanAxis { x: x.id, axis }
        } else {
            Op::SumAxis { x: x.id, axis }
        };
        self.push(Tensor::new(&out_shape, out)?, op)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn norm_like(&mut self, x: Var, squared: bool) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|row| {
                let q: T = row.iter().map(|&v| v * v).sum();
                if squared {
                    q
                } else {
                    q.sqrt()
                }
            })
            .collect();
        let out_shape = &shape[..shape.len().saturating_sub(1)];
        let op = if squared { Op::SqNorm(x.id) } else { Op::Norm(x.id) };
        self.push(Tensor::new(out_shape, out)?, op)
    }

    /// Squared L2 norm along the last axis.
    pub fn sq_l2_norm(&mut self, x: Var) -> Result<Var> {
        self.norm_like(x, true)
    }

    /// L2 norm along the last axis. The gradient at the zero vector is zero.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        self.norm_like(x, false)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xv[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..len {
                    let e = (xv[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / total;
                }
            }
        }
        self.push(Tensor::new(&shape, out)?, Op::Softmax { x: x.id, axis })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(x.id))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for shape {shape:?}")));
        }
        let map = permute_map(&shape, perm);
        let xv = self.value(x).data();
        let data = map.iter().map(|&i| xv[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.push(Tensor::new(&out_shape, data)?, Op::Permute { x: x.id, map })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("axis {axis} [{start}, +{len}) of {shape:?}")));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&xv[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Tensor::new(&out_shape, data)?, Op::Slice { x: x.id, axis, start })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        for &x in xs {
            self.check(x)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let v = self.value(x).data();
                data.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        self.push(
            Tensor::new(&out_shape, data)?,
            Op::Concat {
                xs: xs.iter().map(|v| v.id).collect(),
                axis,
            },
        )
    }

    /// Selects rows of a `[rows, width]` table; gradients scatter-add back.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.check(table)?;
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(Error::shape("gather_rows", format!("indices {indices:?} into {shape:?}")));
        }
        let w = shape[1];
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(&tv[i * w..(i + 1) * w]);
        }
        self.push(
            Tensor::new(&[indices.len(), w], data)?,
            Op::GatherRows {
                table: table.id,
                indices: indices.to_vec(),
            },
        )
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let sx = self.shape(x);
        if sx.len() < 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(Error::shape(
                "batch_norm",
                format!("input {sx:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok((sx[0], sx[1], sx[2..].iter().product()))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: Vec<T>, train: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, s) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    y[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        self.push(
            Tensor::new(&shape, y)?,
            Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// Train-mode batch normalization over every axis except axis 1.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchNormStats<T>)> {
        let (n, c, s) = self.check_bn(x, gamma, beta)?;
        let xv = self.value(x).data();
        let count = n * s;
        let m = T::from_f64(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                mean[ch] += xv[base..base + s].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / m);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                var[ch] += xv[base..base + s].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / m);
        let inv_std = var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
        let y = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((y, BatchNormStats { mean, var, count }))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let (_, c, _) = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats for {} channels, input has {c}", mean.len())));
        }
        let inv_std = var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    /// Capsule squash along the last axis: `s · ‖s‖² / ((1 + ‖s‖²) · ‖s‖)`.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(d) {
            let q: T = row.iter().map(|&v| v * v).sum();
            let (f, _) = squash_factor(q);
            out.extend(row.iter().map(|&v| v * f));
        }
        self.push(Tensor::new(&shape, out)?, Op::Squash(x.id))
    }

    /// Capsule prediction vectors `û[n,i,j] = W[i,j] · u[n,i]` for
    /// `u [N, I, Din]` and `W [I, J, Dout, Din]`; result `[N, I, J, Dout]`.
    pub fn caps_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        self.check(u)?;
        self.check(w)?;
        let (su, sw) = (self.shape(u).to_vec(), self.shape(w).to_vec());
        if su.len() != 3 || sw.len() != 4 || su[1] != sw[0] || su[2] != sw[3] {
            return Err(Error::shape("caps_predict", format!("u {su:?}, W {sw:?}")));
        }
        let (batch, ni, nj, dout, din) = (su[0], sw[0], sw[1], sw[2], sw[3]);
        let (uv, wv) = (self.value(u).data(), self.value(w).data());
        let mut out = vec![T::zero(); batch * ni * nj * dout];
        for b in 0..batch {
            for i in 0..ni {
                let urow = &uv[(b * ni + i) * din..][..din];
                for j in 0..nj {
                    for o in 0..dout {
                        let wrow = &wv[((i * nj + j) * dout + o) * din..][..din];
                        out[((b * ni + i) * nj + j) * dout + o] = wrow.iter().zip(urow).map(|(&w, &u)| w * u).sum();
                    }
                }
            }
        }
        self.push(Tensor::new(&[batch, ni, nj, dout], out)?, Op::CapsPredict { u: u.id, w: w.id })
    }

    /// `s[n,j] = Σ_i c[n,i,j] · û[n,i,j]` for `c [N, I, J]`, `û [N, I, J, D]`.
    pub fn routing_combine(&mut self, c: Var, uhat: Var) -> Result<Var> {
        self.check(c)?;
        self.check(uhat)?;
        let (sc, su) = (self.shape(c).to_vec(), self.shape(uhat).to_vec());
        if su.len() != 4 || sc != su[..3] {
            return Err(Error::shape("routing_combine", format!("c {sc:?}, uhat {su:?}")));
        }
        let (batch, ni, nj, d) = (su[0], su[1], su[2], su[3]);
        let (cv, uv) = (self.value(c).data(), self.value(uhat).data());
        let mut out = vec![T::zero(); batch * nj * d];
        for b in 0..batch {
            for i in 0..ni {
                for j in 0..nj {
                    let cij = cv[(b * ni + i) * nj + j];
                    let urow = &uv[((b * ni + i) * nj + j) * d..][..d];
                    let dst = &mut out[(b * nj + j) * d..][..d];
                    dst.iter_mut().zip(urow).for_each(|(a, &u)| *a += cij * u);
                }
            }
        }
        self.push(Tensor::new(&[batch, nj, d], out)?, Op::RoutingCombine { c: c.id, uhat: uhat.id })
    }

    /// Agreement `a[n,i,j] = û[n,i,j] · v[n,j]`.
    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        self.check(uhat)?;
        self.check(v)?;
        let (su, sv) = (self.shape(uhat).to_vec(), self.shape(v).to_vec());
        if su.len() != 4 || sv != [su[0], su[2], su[3]] {
            return Err(Error::shape("agreement", format!("uhat {su:?}, v {sv:?}")));
        }
        let (batch, ni, nj, d) = (su[0], su[1], su[2], su[3]);
        let (uv, vv) = (self.value(uhat).data(), self.value(v).data());
        let mut out = vec![T::zero(); batch * ni * nj];
        for b in 0..batch {
            for i in 0..ni {
                for j in 0..nj {
                    let urow = &uv[((b * ni + i) * nj + j) * d..][..d];
                    let vrow = &vv[(b * nj + j) * d..][..d];
                    out[(b * ni + i) * nj + j] = urow.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                }
            }
        }
        self.push(Tensor::new(&[batch, ni, nj], out)?, Op::Agreement { uhat: uhat.id, v: v.id })
    }

    /// Elementwise op with a caller-provided backward rule.
    pub fn custom_unary(&mut self, x: Var, forward: impl Fn(T) -> T, backward: CustomBackward<T>) -> Result<Var> {
        self.map(x, Op::Custom { x: x.id, backward }, forward)
    }
}
