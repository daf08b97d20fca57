//! Reward-gradient latent steering inside the denoising loop.
//!
//! At every scheduled timestep the attention stack is read from the current
//! latent, the scene reward is evaluated, and the latent is moved along the
//! reward gradient (`z' = z + gamma * grad R`) before the denoise step.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_vjp, compute_attention, AttentionStack, Latent, NoiseSchedule, SamplerState,
    TokenEmbedding,
};
use crate::error::{contract, Error, Result};
use crate::layout::{build_object_masks, LayoutSpec, ObjectMasks};
use crate::rewards::{total_reward, total_reward_cotangent, RewardReport, RewardWeights};
use crate::seeding::{rng_for, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Reward step size.
    pub gamma: f64,
    pub weights: RewardWeights,
    pub n_sliding: usize,
    pub total_steps: usize,
    /// Timesteps (in `1..=total_steps`) at which the latent is steered.
    pub guided_steps: BTreeSet<usize>,
    pub seed: u64,
    pub max_backtracks: usize,
    /// When false the literal update `z + gamma * grad` is applied unconditionally.
    pub backtrack: bool,
    /// Noise level at `t = T` of the toy sampler.
    pub sigma_max: f64,
    /// Spread of the toy data distribution.
    pub data_std: f64,
}

/// Attention maps carry ~1/(h*w) mass per cell, so reward gradients are tiny
/// and the step size is correspondingly large.
pub const DEFAULT_GAMMA: f64 = 3000.0;
pub const DEFAULT_LAMBDA_IOU: f64 = 0.02;
pub const DEFAULT_LAMBDA_A: f64 = 0.05;
pub const DEFAULT_MAX_BACKTRACKS: usize = 8;
pub const DEFAULT_N_SLIDING: usize = 4;
pub const DEFAULT_TOTAL_STEPS: usize = 50;
pub const DEFAULT_GUIDED_FRACTION: f64 = 1.0;
pub const DEFAULT_SIGMA_MAX: f64 = 2.0;
pub const DEFAULT_DATA_STD: f64 = 1.0;

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            weights: RewardWeights {
                lambda_iou: DEFAULT_LAMBDA_IOU,
                lambda_a: DEFAULT_LAMBDA_A,
                ..Default::default()
            },
            n_sliding: DEFAULT_N_SLIDING,
            total_steps: DEFAULT_TOTAL_STEPS,
            guided_steps: leading_steps(DEFAULT_TOTAL_STEPS, DEFAULT_GUIDED_FRACTION),
            seed: 0,
            max_backtracks: DEFAULT_MAX_BACKTRACKS,
            backtrack: true,
            sigma_max: DEFAULT_SIGMA_MAX,
            data_std: DEFAULT_DATA_STD,
        }
    }
}

/// The first `round(fraction * T)` timesteps of the chain, i.e. `T, T-1, ...`.
pub fn leading_steps(total_steps: usize, fraction: f64) -> BTreeSet<usize> {
    let count = ((fraction.clamp(0.0, 1.0) * total_steps as f64).round() as usize).min(total_steps);
    (total_steps + 1 - count..=total_steps).collect()
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            problems.push(format!("gamma must be > 0, got {}", self.gamma));
        }
        if self.n_sliding == 0 {
            problems.push("n_sliding must be >= 1".into());
        }
        if self.total_steps == 0 {
            problems.push("total_steps must be >= 1".into());
        }
        if let Some(bad) = self
            .guided_steps
            .iter()
            .find(|&&t| t == 0 || t > self.total_steps)
        {
            problems.push(format!(
                "guided step {bad} outside 1..={}",
                self.total_steps
            ));
        }
        if let Err(e) = self.weights.validate() {
            problems.push(e.to_string());
        }
        if !(self.sigma_max > 0.0 && self.sigma_max.is_finite()) {
            problems.push("sigma_max must be > 0".into());
        }
        if !(self.data_std > 0.0 && self.data_std.is_finite()) {
            problems.push("data_std must be > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.total_steps, self.sigma_max, self.data_std)
    }
}

/// One steered timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub timestep: usize,
    pub before: RewardReport,
    pub after: RewardReport,
    pub grad_norm: f64,
    pub backtracks: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrace {
    pub entries: Vec<TraceEntry>,
}

#[derive(Serialize)]
struct TraceRow {
    timestep: usize,
    r_mainbox_pre: f64,
    r_outbox_pre: f64,
    r_iou_pre: f64,
    r_kl_pre: f64,
    r_mainbox_post: f64,
    r_outbox_post: f64,
    r_iou_post: f64,
    r_kl_post: f64,
    grad_norm: f64,
    backtracks: usize,
}

impl GuidanceTrace {
    /// One CSV row per steered timestep; reward columns are summed over objects
    /// (mainbox, outbox, iou) or attributes (kl).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for e in &self.entries {
            out.serialize(TraceRow {
                timestep: e.timestep,
                r_mainbox_pre: e.before.sum_mainbox(),
                r_outbox_pre: e.before.sum_outbox(),
                r_iou_pre: e.before.sum_iou(),
                r_kl_pre: e.before.sum_kl(),
                r_mainbox_post: e.after.sum_mainbox(),
                r_outbox_post: e.after.sum_outbox(),
                r_iou_post: e.after.sum_iou(),
                r_kl_post: e.after.sum_kl(),
                grad_norm: e.grad_norm,
                backtracks: e.backtracks,
            })
            .map_err(csv_error)?;
        }
        if self.entries.is_empty() {
            out.write_record(TRACE_HEADER).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub const TRACE_HEADER: [&str; 11] = [
    "timestep",
    "r_mainbox_pre",
    "r_outbox_pre",
    "r_iou_pre",
    "r_kl_pre",
    "r_mainbox_post",
    "r_outbox_post",
    "r_iou_post",
    "r_kl_post",
    "grad_norm",
    "backtracks",
];

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn reward_at(
    z: &Latent,
    emb: &TokenEmbedding,
    layout: &LayoutSpec,
    masks: &[ObjectMasks],
    weights: &RewardWeights,
) -> Result<RewardReport> {
    let attn = compute_attention(z, emb)?;
    total_reward(&attn, layout, masks, weights)
}

/// Gradient of the scene reward with respect to the latent.
pub fn reward_gradient(
    z: &Latent,
    emb: &TokenEmbedding,
    layout: &LayoutSpec,
    masks: &[ObjectMasks],
    weights: &RewardWeights,
) -> Result<Latent> {
    let attn = compute_attention(z, emb)?;
    let cot = total_reward_cotangent(&attn, layout, masks, weights)?;
    if cot.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            term: "reward derivative with respect to attention".into(),
            timestep: None,
        });
    }
    let grad = attention_vjp(&attn, emb, &cot)?;
    if !grad.is_finite() {
        return Err(Error::Numerical {
            term: "attention backward pass".into(),
            timestep: None,
        });
    }
    Ok(grad)
}

fn l2_norm(z: &Latent) -> f64 {
    z.0.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn step(z: &Latent, gradient: &Latent, size: f64) -> Latent {
    let mut out = z.0.clone();
    out.scaled_add(size, &gradient.0);
    Latent(out)
}

/// Ascent step with step halving.
///
/// Tries `gamma * 2^-b` for `b = 0..=max_backtracks` and keeps the first step
/// whose reward is not below the starting reward. When every trial fails the
/// latent is returned unchanged with `max_backtracks + 1` backtracks.
pub fn guided_update<F>(
    z: &Latent,
    gradient: &Latent,
    gamma: f64,
    max_backtracks: usize,
    mut reward_fn: F,
) -> Result<(Latent, usize)>
where
    F: FnMut(&Latent) -> Result<f64>,
{
    if !(gamma > 0.0) {
        return Err(contract(format!("gamma must be > 0, got {gamma}")));
    }
    if gradient.0.dim() != z.0.dim() {
        return Err(contract("gradient shape does not match latent"));
    }
    let base = reward_fn(z)?;
    let mut size = gamma;
    for b in 0..=max_backtracks {
        let candidate = step(z, gradient, size);
        let r = reward_fn(&candidate)?;
        if r >= base {
            return Ok((candidate, b));
        }
        size *= 0.5;
    }
    Ok((z.clone(), max_backtracks + 1))
}

/// Literal `z + gamma * gradient`.
pub fn plain_update(z: &Latent, gradient: &Latent, gamma: f64) -> Latent {
    step(z, gradient, gamma)
}

/// Output of a sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedRun {
    pub final_latent: Latent,
    pub attention: AttentionStack,
    pub trace: GuidanceTrace,
    pub masks: Vec<ObjectMasks>,
    /// Latent at the start of each timestep, `T` first, then the final latent.
    pub trajectory: Vec<Latent>,
}

/// Runs the denoising chain from `initial`, steering at `config.guided_steps`.
///
/// Masks and sliding boxes are drawn once from `config.seed` and reused at
/// every steered step.
pub fn run_guided_sampling(
    config: &GuidanceConfig,
    layout: &LayoutSpec,
    emb: &TokenEmbedding,
    initial: &Latent,
) -> Result<GuidedRun> {
    config.validate()?;
    layout.validate()?;
    if emb.n_tokens() != layout.n_tokens() {
        return Err(contract(format!(
            "embedding has {} tokens, layout has {}",
            emb.n_tokens(),
            layout.n_tokens()
        )));
    }
    if !initial.is_finite() {
        return Err(Error::Numerical {
            term: "initial latent".into(),
            timestep: Some(config.total_steps),
        });
    }
    let (h, w) = initial.grid();
    let mut rng = rng_for(config.seed, Stream::SlidingBoxes);
    let masks = build_object_masks(layout, h, w, config.n_sliding, &mut rng)?;
    let schedule = config.schedule()?;

    let mut state = SamplerState::new(initial.clone(), &schedule, config.seed);
    let mut trace = GuidanceTrace::default();
    let mut trajectory = Vec::with_capacity(config.total_steps + 1);
    let weights = &config.weights;
    while state.t > 0 {
        let t = state.t;
        trajectory.push(state.latent.clone());
        let mut delta = None;
        if config.guided_steps.contains(&t) {
            let z = &state.latent;
            let before = reward_at(z, emb, layout, &masks, weights).map_err(|e| at_step(e, t))?;
            let grad = reward_gradient(z, emb, layout, &masks, weights).map_err(|e| at_step(e, t))?;
            let (next, backtracks) = if config.backtrack {
                guided_update(z, &grad, config.gamma, config.max_backtracks, |c| {
                    Ok(reward_at(c, emb, layout, &masks, weights)?.grand_total)
                })
                .map_err(|e| at_step(e, t))?
            } else {
                (plain_update(z, &grad, config.gamma), 0)
            };
            if !next.is_finite() {
                return Err(Error::Numerical {
                    term: "guided latent".into(),
                    timestep: Some(t),
                });
            }
            let after = reward_at(&next, emb, layout, &masks, weights).map_err(|e| at_step(e, t))?;
            trace.entries.push(TraceEntry {
                timestep: t,
                before,
                after,
                grad_norm: l2_norm(&grad),
                backtracks,
            });
            let mut d = next.0;
            d -= &z.0;
            delta = Some(Latent(d));
        }
        state = state.denoise_step(delta.as_ref())?;
    }
    trajectory.push(state.latent.clone());
    let attention = compute_attention(&state.latent, emb)?;
    Ok(GuidedRun {
        final_latent: state.latent,
        attention,
        trace,
        masks,
        trajectory,
    })
}

fn at_step(e: Error, t: usize) -> Error {
    match e {
        Error::Numerical { term, timestep: None } => Error::Numerical {
            term,
            timestep: Some(t),
        },
        other => other,
    }
}
