//! Noise-prediction MLP with manual reverse-mode gradients.
//!
//! Input row: `[x (D), sinusoidal timestep embedding (2F), prompt embedding (E)]`.
//! Two tanh hidden layers of width H, linear output of width D.
//!
//! All parameters live in one flat vector. Layer order (row-major weights,
//! `out x in`): W1, b1, W2, b2, W3, b3, then the prompt embedding table with
//! `num_prompts + 1` rows, the last being the null prompt.

mod checkpoint;
mod gemm;
mod optim;

use std::ops::{Deref, Range};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{self, tag};
use crate::sceneworld::PromptId;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use optim::{opt_step, AdamW, OptState};

use gemm::{gemm, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    /// Flattened tile size.
    pub d: usize,
    pub hidden: usize,
    pub emb_dim: usize,
    /// Sinusoid frequency count; the embedding has 2F entries.
    pub freqs: usize,
    pub num_prompts: usize,
}

impl Arch {
    pub fn new(d: usize, hidden: usize, emb_dim: usize, freqs: usize, num_prompts: usize) -> Result<Self> {
        if d == 0 || hidden == 0 || emb_dim == 0 || num_prompts == 0 {
            return Err(Error::InvalidConfig("architecture dimensions must be positive".into()));
        }
        Ok(Self { d, hidden, emb_dim, freqs, num_prompts })
    }

    /// Default sizes for a given view resolution.
    pub fn for_view_res(view_res: usize, num_prompts: usize) -> Result<Self> {
        Self::new((2 * view_res).pow(2), 256, 16, 8, num_prompts)
    }

    pub fn input_dim(&self) -> usize {
        self.d + 2 * self.freqs + self.emb_dim
    }

    pub fn layout(&self) -> Layout {
        let (i, h, d) = (self.input_dim(), self.hidden, self.d);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let w1 = take(h * i);
        let b1 = take(h);
        let w2 = take(h * h);
        let b2 = take(h);
        let w3 = take(d * h);
        let b3 = take(d);
        let emb = take((self.num_prompts + 1) * self.emb_dim);
        Layout { w1, b1, w2, b2, w3, b3, emb }
    }

    pub fn num_params(&self) -> usize {
        self.layout().emb.end
    }
}

/// Offsets of each block in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub w3: Range<usize>,
    pub b3: Range<usize>,
    pub emb: Range<usize>,
}

impl Layout {
    pub fn blocks(&self) -> [(&'static str, Range<usize>); 7] {
        [
            ("w1", self.w1.clone()),
            ("b1", self.b1.clone()),
            ("w2", self.w2.clone()),
            ("b2", self.b2.clone()),
            ("w3", self.w3.clone()),
            ("b3", self.b3.clone()),
            ("emb", self.emb.clone()),
        ]
    }
}

/// Prompt conditioning: a catalog prompt or the null embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Prompt(PromptId),
    Null,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    arch: Arch,
    data: Vec<f64>,
}

impl DenoiserParams {
    pub fn zeros(arch: Arch) -> Self {
        Self { arch, data: vec![0.0; arch.num_params()] }
    }

    pub fn from_vec(arch: Arch, data: Vec<f64>) -> Result<Self> {
        if data.len() != arch.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for an architecture of {}",
                data.len(),
                arch.num_params()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(Self { arch, data })
    }

    /// Scaled-normal initialization keyed by `seed`. The output layer starts
    /// small so the untrained model predicts near-zero noise.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let lay = arch.layout();
        let mut p = Self::zeros(arch);
        let mut r = rng::stream(&[tag::INIT, seed]);
        let mut fill = |range: Range<usize>, scale: f64, data: &mut [f64]| {
            for v in &mut data[range] {
                let z: f64 = r.sample(StandardNormal);
                *v = z * scale;
            }
        };
        fill(lay.w1.clone(), 1.0 / (arch.input_dim() as f64).sqrt(), &mut p.data);
        fill(lay.w2.clone(), 1.0 / (arch.hidden as f64).sqrt(), &mut p.data);
        fill(lay.w3.clone(), 0.1 / (arch.hidden as f64).sqrt(), &mut p.data);
        fill(lay.emb.clone(), 1.0, &mut p.data);
        p
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn emb_row(&self, c: Cond) -> Result<usize> {
        match c {
            Cond::Null => Ok(self.arch.num_prompts),
            Cond::Prompt(PromptId(p)) if (p as usize) < self.arch.num_prompts => Ok(p as usize),
            Cond::Prompt(p) => Err(Error::DimensionMismatch(format!(
                "prompt {} outside a table of {}",
                p.0, self.arch.num_prompts
            ))),
        }
    }
}

/// Read-only base model. Shares storage; no mutable access exists.
#[derive(Debug, Clone)]
pub struct FrozenDenoiser(Arc<DenoiserParams>);

impl FrozenDenoiser {
    pub fn freeze(params: DenoiserParams) -> Self {
        Self(Arc::new(params))
    }

    /// A fresh trainable copy.
    pub fn thaw(&self) -> DenoiserParams {
        (*self.0).clone()
    }
}

impl Deref for FrozenDenoiser {
    type Target = DenoiserParams;
    fn deref(&self) -> &DenoiserParams {
        &self.0
    }
}

/// `[sin(t w_k), cos(t w_k)]` with `w_k = 10000^(-k/F)`.
pub fn timestep_embedding(t: usize, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * freqs);
    for k in 0..freqs {
        let w = (-(10000f64).ln() * k as f64 / freqs as f64).exp();
        out.push((t as f64 * w).sin());
    }
    for k in 0..freqs {
        let w = (-(10000f64).ln() * k as f64 / freqs as f64).exp();
        out.push((t as f64 * w).cos());
    }
    out
}

/// One network input: latent, timestep and conditioning.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub x: &'a [f64],
    pub t: usize,
    pub cond: Cond,
}

/// Saved activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    n: usize,
    rows: Vec<usize>,
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    out: Vec<f64>,
}

impl Activations {
    pub fn rows(&self) -> usize {
        self.n
    }

    /// Predicted noise, `n x D` row-major.
    pub fn output(&self) -> &[f64] {
        &self.out
    }

    pub fn into_output(self) -> Vec<f64> {
        self.out
    }
}

/// Batched forward pass.
pub fn forward_batch(params: &DenoiserParams, queries: &[Query]) -> Result<Activations> {
    let arch = params.arch;
    let (d, h, ni) = (arch.d, arch.hidden, arch.input_dim());
    let lay = arch.layout();
    let n = queries.len();
    let mut input = vec![0.0; n * ni];
    let mut rows = Vec::with_capacity(n);
    for (q, row) in queries.iter().zip(input.chunks_mut(ni.max(1))) {
        if q.x.len() != d {
            return Err(Error::DimensionMismatch(format!("input has {} entries, expected {d}", q.x.len())));
        }
        let e = params.emb_row(q.cond)?;
        rows.push(e);
        row[..d].copy_from_slice(q.x);
        row[d..d + 2 * arch.freqs].copy_from_slice(&timestep_embedding(q.t, arch.freqs));
        row[d + 2 * arch.freqs..].copy_from_slice(&params.data[lay.emb.start + e * arch.emb_dim..][..arch.emb_dim]);
    }
    let p = &params.data;
    let mut a1 = bias_rows(&p[lay.b1.clone()], n);
    gemm(n, ni, h, &input, Trans::No, &p[lay.w1.clone()], Trans::Yes, 1.0, &mut a1);
    a1.iter_mut().for_each(|v| *v = v.tanh());
    let mut a2 = bias_rows(&p[lay.b2.clone()], n);
    gemm(n, h, h, &a1, Trans::No, &p[lay.w2.clone()], Trans::Yes, 1.0, &mut a2);
    a2.iter_mut().for_each(|v| *v = v.tanh());
    let mut out = bias_rows(&p[lay.b3.clone()], n);
    gemm(n, h, d, &a2, Trans::No, &p[lay.w3.clone()], Trans::Yes, 1.0, &mut out);
    Ok(Activations { n, rows, input, a1, a2, out })
}

fn bias_rows(b: &[f64], n: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(n * b.len());
    for _ in 0..n {
        v.extend_from_slice(b);
    }
    v
}

/// Predicted noise for a single input.
pub fn forward(params: &DenoiserParams, x: &[f64], t: usize, cond: Cond) -> Result<Vec<f64>> {
    Ok(forward_batch(params, &[Query { x, t, cond }])?.into_output())
}

/// Adds the gradient of `sum_rows <out_row, upstream_row>` to `grad`.
/// `upstream` is `n x D` row-major, matching `acts`.
pub fn backward_batch(params: &DenoiserParams, acts: &Activations, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
    let arch = params.arch;
    let (d, h, ni, n) = (arch.d, arch.hidden, arch.input_dim(), acts.n);
    if upstream.len() != n * d {
        return Err(Error::DimensionMismatch(format!("upstream has {} entries, expected {}", upstream.len(), n * d)));
    }
    if grad.len() != params.len() {
        return Err(Error::DimensionMismatch("gradient buffer size".into()));
    }
    if n == 0 {
        return Ok(());
    }
    let lay = arch.layout();
    let p = &params.data;

    gemm(d, n, h, upstream, Trans::Yes, &acts.a2, Trans::No, 1.0, &mut grad[lay.w3.clone()]);
    col_sums_into(upstream, d, &mut grad[lay.b3.clone()]);
    let mut dz2 = vec![0.0; n * h];
    gemm(n, d, h, upstream, Trans::No, &p[lay.w3.clone()], Trans::No, 0.0, &mut dz2);
    tanh_back(&mut dz2, &acts.a2);

    gemm(h, n, h, &dz2, Trans::Yes, &acts.a1, Trans::No, 1.0, &mut grad[lay.w2.clone()]);
    col_sums_into(&dz2, h, &mut grad[lay.b2.clone()]);
    let mut dz1 = vec![0.0; n * h];
    gemm(n, h, h, &dz2, Trans::No, &p[lay.w2.clone()], Trans::No, 0.0, &mut dz1);
    tanh_back(&mut dz1, &acts.a1);

    gemm(h, n, ni, &dz1, Trans::Yes, &acts.input, Trans::No, 1.0, &mut grad[lay.w1.clone()]);
    col_sums_into(&dz1, h, &mut grad[lay.b1.clone()]);

    // Embedding rows: d(input[emb cols]) = dz1 * W1[:, emb cols].
    let e0 = d + 2 * arch.freqs;
    let w1 = &p[lay.w1.clone()];
    let mut demb = vec![0.0; arch.emb_dim];
    for (r, &row) in acts.rows.iter().enumerate() {
        demb.iter_mut().for_each(|v| *v = 0.0);
        let dz = &dz1[r * h..(r + 1) * h];
        for (j, &g) in dz.iter().enumerate() {
            let wrow = &w1[j * ni + e0..j * ni + e0 + arch.emb_dim];
            for (acc, &w) in demb.iter_mut().zip(wrow) {
                *acc += g * w;
            }
        }
        let dst = &mut grad[lay.emb.start + row * arch.emb_dim..][..arch.emb_dim];
        for (a, b) in dst.iter_mut().zip(&demb) {
            *a += b;
        }
    }
    Ok(())
}

/// Gradient of `<forward(x, t, c), upstream>` for one input.
pub fn backward(params: &DenoiserParams, x: &[f64], t: usize, cond: Cond, upstream: &[f64]) -> Result<Vec<f64>> {
    let acts = forward_batch(params, &[Query { x, t, cond }])?;
    let mut g = vec![0.0; params.len()];
    backward_batch(params, &acts, upstream, &mut g)?;
    Ok(g)
}

fn col_sums_into(m: &[f64], cols: usize, out: &mut [f64]) {
    for row in m.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn tanh_back(dz: &mut [f64], a: &[f64]) {
    for (g, &y) in dz.iter_mut().zip(a) {
        *g *= 1.0 - y * y;
    }
}

/// Max relative error between `grad_fn` and central differences on
/// `n_samples` random parameters of `<forward, u>` for a random unit-scale
/// projection `u`.
pub fn fd_check_with<F>(
    params: &DenoiserParams,
    x: &[f64],
    t: usize,
    cond: Cond,
    n_samples: usize,
    h: f64,
    seed: u64,
    grad_fn: F,
) -> Result<f64>
where
    F: Fn(&DenoiserParams, &[f64]) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step {h} must be positive")));
    }
    if n_samples == 0 {
        return Ok(0.0);
    }
    let mut r = rng::stream(&[tag::FDCHECK, seed]);
    let u: Vec<f64> = (0..params.arch.d).map(|_| r.sample(StandardNormal)).collect();
    let analytic = grad_fn(params, &u)?;
    let proj = |p: &DenoiserParams| -> Result<f64> {
        Ok(forward(p, x, t, cond)?.iter().zip(&u).map(|(a, b)| a * b).sum())
    };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        let k = r.random_range(0..params.len());
        let orig = probe.data[k];
        probe.data[k] = orig + h;
        let plus = proj(&probe)?;
        probe.data[k] = orig - h;
        let minus = proj(&probe)?;
        probe.data[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[k];
        let scale = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / scale);
    }
    Ok(worst)
}

/// [`fd_check_with`] against [`backward`].
pub fn fd_check(
    params: &DenoiserParams,
    x: &[f64],
    t: usize,
    cond: Cond,
    n_samples: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    fd_check_with(params, x, t, cond, n_samples, h, seed, |p, u| backward(p, x, t, cond, u))
}
