//! Finite-difference check of the latent reward gradient on random scenes.

use rand::Rng;

use crate::attention::{compute_attention, Latent, TokenEmbedding};
use crate::error::Result;
use crate::guidance::reward_gradient;
use crate::layout::{build_object_masks, AttributeSpec, BoundingBox, LayoutSpec, ObjectMasks, ObjectSpec};
use crate::rewards::{total_reward, RewardWeights};
use crate::seeding::{rng_for, Stream};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// A random scene: one object, one attribute, `C <= 4`, grid up to 8x8, `L <= 4`.
#[derive(Debug, Clone)]
pub struct Instance {
    pub layout: LayoutSpec,
    pub emb: TokenEmbedding,
    pub latent: Latent,
    pub masks: Vec<ObjectMasks>,
    pub weights: RewardWeights,
}

impl Instance {
    /// The weight pair cycles through `{0, 1} x {0, 1}` with the seed.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, Stream::GradCheck);
        let channels = rng.random_range(1..=4);
        let h = rng.random_range(4..=8);
        let w = rng.random_range(4..=8);
        let n_tokens = rng.random_range(2..=4);
        let object = rng.random_range(0..n_tokens);
        let attribute = (object + rng.random_range(1..n_tokens)) % n_tokens;
        let x0 = rng.random_range(0.0..0.45);
        let y0 = rng.random_range(0.0..0.45);
        let bbox = BoundingBox::new(
            x0,
            y0,
            rng.random_range(x0 + 0.3..=0.95),
            rng.random_range(y0 + 0.3..=0.95),
        )?;
        let layout = LayoutSpec {
            prompt: String::new(),
            prompt_tokens: (0..n_tokens).map(|i| format!("t{i}")).collect(),
            objects: vec![ObjectSpec {
                token_index: object,
                bbox,
            }],
            attributes: vec![AttributeSpec {
                token_index: attribute,
                parent_object: 0,
            }],
        };
        layout.validate()?;
        let emb = TokenEmbedding::random_unit(n_tokens, channels, &mut rng);
        let latent = Latent::gaussian(channels, h, w, 1.5, &mut rng);
        let masks = build_object_masks(&layout, h, w, 2, &mut rng)?;
        let weights = RewardWeights {
            lambda_iou: (seed % 2) as f64,
            lambda_a: ((seed / 2) % 2) as f64,
            ..Default::default()
        };
        Ok(Self {
            layout,
            emb,
            latent,
            masks,
            weights,
        })
    }

    pub fn reward(&self, z: &Latent) -> Result<f64> {
        let attn = compute_attention(z, &self.emb)?;
        Ok(total_reward(&attn, &self.layout, &self.masks, &self.weights)?.grand_total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub seed: u64,
    /// `max |analytic - fd| / max |fd|` over all latent coordinates.
    pub max_rel_error: f64,
    /// `(channel, row, col)` of the worst coordinate.
    pub worst: (usize, usize, usize),
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn check_seed(seed: u64) -> Result<CheckResult> {
    let inst = Instance::random(seed)?;
    let analytic = reward_gradient(&inst.latent, &inst.emb, &inst.layout, &inst.masks, &inst.weights)?;
    let mut fd = analytic.0.clone();
    for (idx, slot) in fd.indexed_iter_mut() {
        let mut plus = inst.latent.clone();
        plus.0[idx] += FD_STEP;
        let mut minus = inst.latent.clone();
        minus.0[idx] -= FD_STEP;
        *slot = (inst.reward(&plus)? - inst.reward(&minus)?) / (2.0 * FD_STEP);
    }
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let (mut worst, mut max_err) = ((0, 0, 0), 0.0);
    for ((idx, &a), &b) in analytic.0.indexed_iter().zip(fd.iter()) {
        let err = (a - b).abs() / scale;
        if err > max_err {
            max_err = err;
            worst = idx;
        }
    }
    Ok(CheckResult {
        seed,
        max_rel_error: max_err,
        worst,
    })
}
