//! Layers of the diffusion transformer with hand-written reverse passes.
//!
//! Every forward returns a cache holding what its backward needs. Backward
//! functions take `Option<&mut Grads>` so frozen parameters can be skipped
//! while still propagating the input gradient.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{gemm_into, matmul, matmul_nt, matmul_tn_acc, round_to_f32, Mat, View};

const LN_EPS: f64 = 1e-5;

/// Collects `(name, shape, values)` for every tensor of a parameter set.
pub type TensorList<'a> = Vec<(String, Vec<usize>, &'a [f64])>;

/// Uniform access to the tensors of a parameter structure, in a fixed order.
pub trait ParamSet {
    fn tensors(&self, prefix: &str) -> TensorList<'_>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors("").iter().map(|(_, _, v)| v.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Draws `n` values from N(0, std²), rounded to the f32 grid.
pub fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| round_to_f32(dist.sample(rng))).collect()
}

/// Affine map `y = x W + b` applied to every row of `x`; `w` is `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Mat::zeros(fan_in, fan_out),
            b: vec![0.0; fan_out],
        }
    }

    /// Weights from N(0, gain² / fan_in), zero bias.
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        Self {
            w: Mat::from_vec(fan_in, fan_out, normal_vec(rng, fan_in * fan_out, std)),
            b: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = matmul(x, &self.w);
        y.add_row_vector(&self.b);
        y
    }

    /// Returns `dx`; accumulates `dW`, `db` into `grad` when given.
    pub fn backward(&self, x: &Mat, dy: &Mat, grad: Option<&mut Linear>) -> Mat {
        if let Some(g) = grad {
            matmul_tn_acc(x, dy, &mut g.w);
            dy.sum_rows_into(&mut g.b);
        }
        matmul_nt(dy, &self.w)
    }
}

impl ParamSet for Linear {
    fn tensors(&self, prefix: &str) -> TensorList<'_> {
        vec![
            (join(prefix, "weight"), vec![self.w.rows, self.w.cols], &self.w.data[..]),
            (join(prefix, "bias"), vec![self.b.len()], &self.b[..]),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w.data[..], &mut self.b[..]]
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise layer norm without affine parameters. Returns `(normalized, rstd)`.
pub fn layer_norm(x: &Mat) -> (Mat, Vec<f64>) {
    let d = x.cols as f64;
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    (out, rstd)
}

pub fn layer_norm_backward(normed: &Mat, rstd: &[f64], dy: &Mat) -> Mat {
    let d = normed.cols as f64;
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    for (r, &s) in rstd.iter().enumerate().take(dy.rows) {
        let n = normed.row(r);
        let g = dy.row(r);
        let mean_g = g.iter().sum::<f64>() / d;
        let mean_gn = g.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d;
        for ((o, gi), ni) in dx.row_mut(r).iter_mut().zip(g).zip(n) {
            *o = s * (gi - mean_g - ni * mean_gn);
        }
    }
    dx
}

/// `n * (1 + scale) + shift`, broadcast over rows.
fn modulate(n: &Mat, shift: &[f64], scale: &[f64]) -> Mat {
    let mut out = n.clone();
    for row in out.data.chunks_exact_mut(n.cols) {
        for ((v, sh), sc) in row.iter_mut().zip(shift).zip(scale) {
            *v = *v * (1.0 + sc) + sh;
        }
    }
    out
}

/// Backward of [`modulate`]: returns `dn`, accumulates into `dshift`, `dscale`.
fn modulate_backward(n: &Mat, scale: &[f64], da: &Mat, dshift: &mut [f64], dscale: &mut [f64]) -> Mat {
    let mut dn = da.clone();
    for r in 0..da.rows {
        let nr = n.row(r);
        let dr = da.row(r);
        for c in 0..da.cols {
            dshift[c] += dr[c];
            dscale[c] += dr[c] * nr[c];
        }
        for (v, sc) in dn.row_mut(r).iter_mut().zip(scale) {
            *v *= 1.0 + sc;
        }
    }
    dn
}

/// Sinusoidal embedding of a flow step: `[cos(w_i s), sin(w_i s)]`, `s = 1000 t`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let s = 1000.0 * t;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (s * freq).cos();
        out[half + i] = (s * freq).sin();
    }
    out
}

/// Sinusoid followed by a two-layer SiLU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbed {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct TimeCache {
    sinusoid: Mat,
    pre1: Mat,
    act1: Mat,
    /// Output of `fc2` before the shared SiLU.
    pub cond: Mat,
    /// `silu(cond)`, the vector every block's modulation reads.
    pub cond_act: Vec<f64>,
}

impl TimeCache {
    pub(crate) fn empty() -> Self {
        Self {
            sinusoid: Mat::zeros(0, 0),
            pre1: Mat::zeros(0, 0),
            act1: Mat::zeros(0, 0),
            cond: Mat::zeros(0, 0),
            cond_act: Vec::new(),
        }
    }
}

impl TimeEmbed {
    pub fn init(rng: &mut impl Rng, width: usize) -> Self {
        Self {
            fc1: Linear::init(rng, width, width, 1.0),
            fc2: Linear::init(rng, width, width, 1.0),
        }
    }

    pub fn forward(&self, t: f64) -> TimeCache {
        let width = self.fc1.fan_in();
        let sinusoid = Mat::from_vec(1, width, timestep_embedding(t, width));
        let pre1 = self.fc1.forward(&sinusoid);
        let act1 = Mat::from_vec(1, width, pre1.data.iter().map(|&v| silu(v)).collect());
        let cond = self.fc2.forward(&act1);
        let cond_act = cond.data.iter().map(|&v| silu(v)).collect();
        TimeCache {
            sinusoid,
            pre1,
            act1,
            cond,
            cond_act,
        }
    }

    pub fn backward(&self, cache: &TimeCache, d_cond_act: &[f64], grad: &mut TimeEmbed) {
        let width = cache.cond.cols;
        let dcond = Mat::from_vec(
            1,
            width,
            d_cond_act
                .iter()
                .zip(&cache.cond.data)
                .map(|(g, &c)| g * silu_grad(c))
                .collect(),
        );
        let dact1 = self.fc2.backward(&cache.act1, &dcond, Some(&mut grad.fc2));
        let dpre1 = Mat::from_vec(
            1,
            width,
            dact1
                .data
                .iter()
                .zip(&cache.pre1.data)
                .map(|(g, &p)| g * silu_grad(p))
                .collect(),
        );
        self.fc1.backward(&cache.sinusoid, &dpre1, Some(&mut grad.fc1));
    }
}

impl ParamSet for TimeEmbed {
    fn tensors(&self, prefix: &str) -> TensorList<'_> {
        let mut v = self.fc1.tensors(&join(prefix, "fc1"));
        v.extend(self.fc2.tensors(&join(prefix, "fc2")));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.fc1.tensors_mut();
        v.extend(self.fc2.tensors_mut());
        v
    }
}

/// One pre-norm transformer block with adaptive (time-modulated) layer norms.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// `D -> 4D`: shift/scale for the attention norm, then for the MLP norm.
    pub modulation: Linear,
    /// `D -> 3D`: fused query, key, value.
    pub qkv: Linear,
    pub attn_out: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

pub struct BlockCache {
    modv: Vec<f64>,
    n1: Mat,
    rstd1: Vec<f64>,
    a1: Mat,
    qkv: Mat,
    probs: Vec<Mat>,
    attn: Mat,
    n2: Mat,
    rstd2: Vec<f64>,
    a2: Mat,
    pre_gelu: Mat,
    act: Mat,
}

impl BlockParams {
    pub fn init(rng: &mut impl Rng, width: usize, mlp_ratio: usize) -> Self {
        Self {
            modulation: Linear::init(rng, width, 4 * width, 0.1),
            qkv: Linear::init(rng, width, 3 * width, 1.0),
            attn_out: Linear::init(rng, width, width, 0.5),
            mlp_in: Linear::init(rng, width, mlp_ratio * width, 1.0),
            mlp_out: Linear::init(rng, mlp_ratio * width, width, 0.5),
        }
    }

    pub fn zeros(width: usize, mlp_ratio: usize) -> Self {
        Self {
            modulation: Linear::zeros(width, 4 * width),
            qkv: Linear::zeros(width, 3 * width),
            attn_out: Linear::zeros(width, width),
            mlp_in: Linear::zeros(width, mlp_ratio * width),
            mlp_out: Linear::zeros(mlp_ratio * width, width),
        }
    }

    pub fn width(&self) -> usize {
        self.attn_out.fan_in()
    }

    fn modulation_vector(&self, cond_act: &[f64]) -> Vec<f64> {
        let c = Mat::from_vec(1, cond_act.len(), cond_act.to_vec());
        self.modulation.forward(&c).data
    }

    pub fn forward(&self, h: &Mat, cond_act: &[f64], heads: usize) -> (Mat, BlockCache) {
        let d = self.width();
        let t = h.rows;
        let modv = self.modulation_vector(cond_act);
        let (shift1, rest) = modv.split_at(d);
        let (scale1, rest) = rest.split_at(d);
        let (shift2, scale2) = rest.split_at(d);

        let (n1, rstd1) = layer_norm(h);
        let a1 = modulate(&n1, shift1, scale1);
        let qkv = self.qkv.forward(&a1);

        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Mat::zeros(t, d);
        let mut probs = Vec::with_capacity(heads);
        for head in 0..heads {
            let q = View::cols_of(&qkv, head * dh, dh);
            let k = View::cols_of(&qkv, d + head * dh, dh);
            let v = View::cols_of(&qkv, 2 * d + head * dh, dh);
            let mut s = Mat::zeros(t, t);
            gemm_into(scale, q, k.t(), 0.0, &mut s, 0);
            softmax_rows(&mut s);
            gemm_into(1.0, View::of(&s), v, 0.0, &mut attn, head * dh);
            probs.push(s);
        }
        let mut h2 = self.attn_out.forward(&attn);
        h2.add_assign(h);

        let (n2, rstd2) = layer_norm(&h2);
        let a2 = modulate(&n2, shift2, scale2);
        let pre_gelu = self.mlp_in.forward(&a2);
        let act = Mat::from_vec(
            pre_gelu.rows,
            pre_gelu.cols,
            pre_gelu.data.iter().map(|&v| gelu(v)).collect(),
        );
        let mut out = self.mlp_out.forward(&act);
        out.add_assign(&h2);

        let cache = BlockCache {
            modv,
            n1,
            rstd1,
            a1,
            qkv,
            probs,
            attn,
            n2,
            rstd2,
            a2,
            pre_gelu,
            act,
        };
        (out, cache)
    }

    /// Returns the gradient w.r.t. the block input. Accumulates the gradient
    /// w.r.t. the shared time vector into `d_cond_act`.
    pub fn backward(
        &self,
        cache: &BlockCache,
        cond_act: &[f64],
        dout: &Mat,
        heads: usize,
        mut grad: Option<&mut BlockParams>,
        d_cond_act: &mut [f64],
    ) -> Mat {
        let d = self.width();
        let t = dout.rows;
        let (_, rest) = cache.modv.split_at(d);
        let (scale1, rest) = rest.split_at(d);
        let (_, scale2) = rest.split_at(d);
        let mut dmod = vec![0.0; 4 * d];

        // MLP branch
        let dact = self
            .mlp_out
            .backward(&cache.act, dout, grad.as_deref_mut().map(|g| &mut g.mlp_out));
        let dpre = Mat::from_vec(
            dact.rows,
            dact.cols,
            dact.data
                .iter()
                .zip(&cache.pre_gelu.data)
                .map(|(g, &u)| g * gelu_grad(u))
                .collect(),
        );
        let da2 = self
            .mlp_in
            .backward(&cache.a2, &dpre, grad.as_deref_mut().map(|g| &mut g.mlp_in));
        let dn2 = {
            let (_, rest) = dmod.split_at_mut(2 * d);
            let (dshift2, dscale2) = rest.split_at_mut(d);
            modulate_backward(&cache.n2, scale2, &da2, dshift2, dscale2)
        };
        let mut dh2 = layer_norm_backward(&cache.n2, &cache.rstd2, &dn2);
        dh2.add_assign(dout);

        // attention branch
        let dattn = self
            .attn_out
            .backward(&cache.attn, &dh2, grad.as_deref_mut().map(|g| &mut g.attn_out));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = Mat::zeros(t, 3 * d);
        for head in 0..heads {
            let p = &cache.probs[head];
            let q = View::cols_of(&cache.qkv, head * dh, dh);
            let k = View::cols_of(&cache.qkv, d + head * dh, dh);
            let v = View::cols_of(&cache.qkv, 2 * d + head * dh, dh);
            let d_o = View::cols_of(&dattn, head * dh, dh);
            // dV = P^T dO
            gemm_into(1.0, View::of(p).t(), d_o, 0.0, &mut dqkv, 2 * d + head * dh);
            // dP = dO V^T, then softmax backward in place
            let mut ds = Mat::zeros(t, t);
            gemm_into(1.0, d_o, v.t(), 0.0, &mut ds, 0);
            for r in 0..t {
                let pr = p.row(r);
                let dr = ds.row_mut(r);
                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (g, pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            // dQ = dS K * scale, dK = dS^T Q * scale
            gemm_into(scale, View::of(&ds), k, 0.0, &mut dqkv, head * dh);
            gemm_into(scale, View::of(&ds).t(), q, 0.0, &mut dqkv, d + head * dh);
        }
        let da1 = self
            .qkv
            .backward(&cache.a1, &dqkv, grad.as_deref_mut().map(|g| &mut g.qkv));
        let dn1 = {
            let (dshift1, rest) = dmod.split_at_mut(d);
            let (dscale1, _) = rest.split_at_mut(d);
            modulate_backward(&cache.n1, scale1, &da1, dshift1, dscale1)
        };
        let mut dx = layer_norm_backward(&cache.n1, &cache.rstd1, &dn1);
        dx.add_assign(&dh2);

        // modulation
        let c = Mat::from_vec(1, cond_act.len(), cond_act.to_vec());
        let dm = Mat::from_vec(1, 4 * d, dmod);
        let dc = self.modulation.backward(&c, &dm, grad.map(|g| &mut g.modulation));
        for (a, b) in d_cond_act.iter_mut().zip(&dc.data) {
            *a += b;
        }
        dx
    }
}

impl ParamSet for BlockParams {
    fn tensors(&self, prefix: &str) -> TensorList<'_> {
        let mut v = self.modulation.tensors(&join(prefix, "modulation"));
        v.extend(self.qkv.tensors(&join(prefix, "qkv")));
        v.extend(self.attn_out.tensors(&join(prefix, "attn_out")));
        v.extend(self.mlp_in.tensors(&join(prefix, "mlp_in")));
        v.extend(self.mlp_out.tensors(&join(prefix, "mlp_out")));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.modulation.tensors_mut();
        v.extend(self.qkv.tensors_mut());
        v.extend(self.attn_out.tensors_mut());
        v.extend(self.mlp_in.tensors_mut());
        v.extend(self.mlp_out.tensors_mut());
        v
    }
}

fn softmax_rows(s: &mut Mat) {
    for row in s.data.chunks_exact_mut(s.cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
