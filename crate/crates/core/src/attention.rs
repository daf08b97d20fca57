//! Toy cross-attention layer and deterministic sampler.
//!
//! The attention map of token `l` is a softmax over grid cells of
//! `<emb_l, z[:, r, c]> / sqrt(C)`. The sampler is the exact probability-flow
//! map for Gaussian data `N(mean, s^2 I)` under a variance-exploding noise
//! schedule: each step contracts the latent toward `mean` by a scalar
//! coefficient, so guidance deltas survive to the end, attenuated.

use ndarray::{Array2, Array3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Error, Result};

/// Latent tensor, shape `(C, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(pub Array3<f64>);

impl Latent {
    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        Self(Array3::zeros((channels, h, w)))
    }

    pub fn gaussian<R: Rng + ?Sized>(
        channels: usize,
        h: usize,
        w: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self(Array3::from_shape_simple_fn((channels, h, w), || {
            let v: f64 = StandardNormal.sample(rng);
            std * v
        }))
    }

    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dim();
        (h, w)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// One fixed vector per prompt token, shape `(L, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding(pub Array2<f64>);

impl TokenEmbedding {
    /// Seeded random unit vectors.
    pub fn random_unit<R: Rng + ?Sized>(n_tokens: usize, channels: usize, rng: &mut R) -> Self {
        let mut emb = Array2::zeros((n_tokens, channels));
        for mut row in emb.rows_mut() {
            loop {
                row.mapv_inplace(|_: f64| StandardNormal.sample(rng));
                let norm = row.dot(&row).sqrt();
                if norm > 1e-6 {
                    row /= norm;
                    break;
                }
            }
        }
        Self(emb)
    }

    pub fn n_tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn channels(&self) -> usize {
        self.0.ncols()
    }
}

/// Per-token spatial distributions, shape `(L, h, w)`. Each map sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack(pub Array3<f64>);

impl AttentionStack {
    pub fn n_tokens(&self) -> usize {
        self.0.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dim();
        (h, w)
    }

    pub fn map(&self, token: usize) -> ndarray::ArrayView2<'_, f64> {
        self.0.index_axis(Axis(0), token)
    }
}

fn check_channels(z: &Latent, emb: &TokenEmbedding) -> Result<()> {
    if z.channels() != emb.channels() {
        return Err(contract(format!(
            "embedding dimension {} does not match latent channels {}",
            emb.channels(),
            z.channels()
        )));
    }
    Ok(())
}

/// Scores `<emb_l, z[:, r, c]> / sqrt(C)`, shape `(L, h, w)`.
fn scores(z: &Latent, emb: &TokenEmbedding) -> Array3<f64> {
    let (c, h, w) = z.0.dim();
    let flat = z.0.view().into_shape_with_order((c, h * w)).unwrap();
    let s = emb.0.dot(&flat) / (c as f64).sqrt();
    s.into_shape_with_order((emb.n_tokens(), h, w)).unwrap()
}

pub fn compute_attention(z: &Latent, emb: &TokenEmbedding) -> Result<AttentionStack> {
    check_channels(z, emb)?;
    let mut a = scores(z, emb);
    for mut map in a.outer_iter_mut() {
        let max = map.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        map.mapv_inplace(|v| (v - max).exp());
        let total = map.sum();
        map /= total;
    }
    Ok(AttentionStack(a))
}

/// Reverse-mode product `(dA/dz)^T * cotangent` through the softmax attention.
pub fn attention_jacobian_vector(
    z: &Latent,
    emb: &TokenEmbedding,
    cotangent: &Array3<f64>,
) -> Result<Latent> {
    let attn = compute_attention(z, emb)?;
    attention_vjp(&attn, emb, cotangent)
}

/// Same as [`attention_jacobian_vector`] but reuses an attention stack already
/// computed at the point of differentiation.
pub fn attention_vjp(
    attn: &AttentionStack,
    emb: &TokenEmbedding,
    cotangent: &Array3<f64>,
) -> Result<Latent> {
    if cotangent.dim() != attn.0.dim() {
        return Err(contract(format!(
            "cotangent shape {:?} does not match attention shape {:?}",
            cotangent.dim(),
            attn.0.dim()
        )));
    }
    if emb.n_tokens() != attn.n_tokens() {
        return Err(contract(format!(
            "embedding has {} tokens, attention has {}",
            emb.n_tokens(),
            attn.n_tokens()
        )));
    }
    let (l, h, w) = attn.0.dim();
    let channels = emb.channels();

    // softmax backward: ds = A * (g - <A, g>)
    let mut dscore = Array3::zeros((l, h, w));
    for ((mut ds, a), g) in dscore
        .outer_iter_mut()
        .zip(attn.0.outer_iter())
        .zip(cotangent.outer_iter())
    {
        let mean = (&a * &g).sum();
        Zip::from(&mut ds)
            .and(&a)
            .and(&g)
            .for_each(|d, &a, &g| *d = a * (g - mean));
    }
    let flat = dscore.into_shape_with_order((l, h * w)).unwrap();
    let grad = emb.0.t().dot(&flat) / (channels as f64).sqrt();
    Ok(Latent(grad.into_shape_with_order((channels, h, w)).unwrap()))
}

/// Variance-exploding noise levels `sigma_0 = 0 < sigma_1 < ... < sigma_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    data_std: f64,
}

impl NoiseSchedule {
    /// `sigma_t = sigma_max * t / T`.
    pub fn linear(total_steps: usize, sigma_max: f64, data_std: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(contract("total_steps must be at least 1"));
        }
        if !(sigma_max > 0.0 && sigma_max.is_finite()) || !(data_std > 0.0 && data_std.is_finite())
        {
            return Err(contract("sigma_max and data_std must be positive and finite"));
        }
        let sigmas = (0..=total_steps)
            .map(|t| sigma_max * t as f64 / total_steps as f64)
            .collect();
        Ok(Self { sigmas, data_std })
    }

    pub fn total_steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn data_std(&self) -> f64 {
        self.data_std
    }

    /// Standard deviation of a pure-noise latent at `t = T`.
    pub fn initial_std(&self) -> f64 {
        let s = self.data_std;
        (s * s + self.sigma(self.total_steps()).powi(2)).sqrt()
    }

    /// Contraction coefficient of the step `t -> t - 1`, in `(0, 1]`.
    pub fn coefficient(&self, t: usize) -> f64 {
        let s2 = self.data_std * self.data_std;
        ((s2 + self.sigma(t - 1).powi(2)) / (s2 + self.sigma(t).powi(2))).sqrt()
    }

    /// Coefficients for `t = 1..=T` (index `t - 1`).
    pub fn coefficients(&self) -> Vec<f64> {
        (1..=self.total_steps()).map(|t| self.coefficient(t)).collect()
    }
}

/// Position in the denoising chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    /// Steps remaining; `T` at the start, `0` once sampling has finished.
    pub t: usize,
    pub latent: Latent,
    pub seed: u64,
    /// Step coefficients for `t = 1..=T` (index `t - 1`).
    pub coefficients: Vec<f64>,
    /// Mean the chain contracts toward.
    pub mean: Latent,
}

impl SamplerState {
    pub fn new(initial: Latent, schedule: &NoiseSchedule, seed: u64) -> Self {
        let (c, h, w) = initial.0.dim();
        Self {
            t: schedule.total_steps(),
            mean: Latent::zeros(c, h, w),
            latent: initial,
            seed,
            coefficients: schedule.coefficients(),
        }
    }

    /// Draws `z_T` from the schedule's initial distribution with `rng`.
    pub fn from_rng<R: Rng + ?Sized>(
        channels: usize,
        h: usize,
        w: usize,
        schedule: &NoiseSchedule,
        seed: u64,
        rng: &mut R,
    ) -> Self {
        let initial = Latent::gaussian(channels, h, w, schedule.initial_std(), rng);
        Self::new(initial, schedule, seed)
    }

    /// Latent the chain reaches from here when no further guidance is applied.
    pub fn endpoint(&self) -> Latent {
        let factor: f64 = self.coefficients[..self.t].iter().product();
        let mut out = self.mean.0.clone();
        Zip::from(&mut out)
            .and(&self.latent.0)
            .for_each(|o, &z| *o += factor * (z - *o));
        Latent(out)
    }

    /// Adds `guidance_delta` (if any) and advances one step toward `mean`.
    pub fn denoise_step(mut self, guidance_delta: Option<&Latent>) -> Result<Self> {
        if self.t == 0 {
            return Err(contract("sampling already finished (t = 0)"));
        }
        if let Some(delta) = guidance_delta {
            if delta.0.dim() != self.latent.0.dim() {
                return Err(contract("guidance delta shape does not match latent"));
            }
            self.latent.0 += &delta.0;
        }
        let a = self.coefficients[self.t - 1];
        Zip::from(&mut self.latent.0)
            .and(&self.mean.0)
            .for_each(|z, &m| *z = m + a * (*z - m));
        if !self.latent.is_finite() {
            return Err(Error::Numerical {
                term: "denoise_step".into(),
                timestep: Some(self.t),
            });
        }
        self.t -= 1;
        Ok(self)
    }
}
