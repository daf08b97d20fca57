//! Run configuration file and seeded construction of run inputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{Latent, TokenEmbedding};
use crate::error::{Error, Result};
use crate::guidance::{self, leading_steps, GuidanceConfig};
use crate::layout::LayoutSpec;
use crate::rewards::RewardWeights;
use crate::seeding::{rng_for, Stream};

/// JSON run configuration. Every field is optional; omitted fields take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gamma: f64,
    pub lambda_a: f64,
    pub lambda_iou: f64,
    pub mainbox_weight: f64,
    pub outbox_weight: f64,
    pub n_sliding: usize,
    pub total_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guided_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guided_steps: Option<Vec<usize>>,
    /// Attention grid `[h_a, w_a]`.
    pub grid: [usize; 2],
    pub channels: usize,
    pub seed: u64,
    pub max_backtracks: usize,
    pub backtrack: bool,
    pub sigma_max: f64,
    pub data_std: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gamma: guidance::DEFAULT_GAMMA,
            lambda_a: guidance::DEFAULT_LAMBDA_A,
            lambda_iou: guidance::DEFAULT_LAMBDA_IOU,
            mainbox_weight: 1.0,
            outbox_weight: 1.0,
            n_sliding: guidance::DEFAULT_N_SLIDING,
            total_steps: guidance::DEFAULT_TOTAL_STEPS,
            guided_fraction: None,
            guided_steps: None,
            grid: [16, 16],
            channels: 4,
            seed: 0,
            max_backtracks: guidance::DEFAULT_MAX_BACKTRACKS,
            backtrack: true,
            sigma_max: guidance::DEFAULT_SIGMA_MAX,
            data_std: guidance::DEFAULT_DATA_STD,
        }
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Parse {
            field: if path == "." { "<document>".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

impl RunConfig {
    pub fn weights(&self) -> RewardWeights {
        RewardWeights {
            lambda_iou: self.lambda_iou,
            lambda_a: self.lambda_a,
            mainbox: self.mainbox_weight,
            outbox: self.outbox_weight,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        let guided_steps = match (&self.guided_steps, self.guided_fraction) {
            (Some(steps), _) => steps.iter().copied().collect(),
            (None, Some(f)) => leading_steps(self.total_steps, f),
            (None, None) => leading_steps(self.total_steps, guidance::DEFAULT_GUIDED_FRACTION),
        };
        GuidanceConfig {
            gamma: self.gamma,
            weights: self.weights(),
            n_sliding: self.n_sliding,
            total_steps: self.total_steps,
            guided_steps,
            seed: self.seed,
            max_backtracks: self.max_backtracks,
            backtrack: self.backtrack,
            sigma_max: self.sigma_max,
            data_std: self.data_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.grid[0] == 0 || self.grid[1] == 0 {
            problems.push(format!("grid must be at least 1x1, got {:?}", self.grid));
        }
        if self.channels == 0 {
            problems.push("channels must be >= 1".into());
        }
        if self.guided_fraction.is_some() && self.guided_steps.is_some() {
            problems.push("give either guided_fraction or guided_steps, not both".into());
        }
        if let Some(f) = self.guided_fraction {
            if !(0.0..=1.0).contains(&f) {
                problems.push(format!("guided_fraction must lie in [0, 1], got {f}"));
            }
        }
        if let Err(Error::Validation(v)) = self.guidance().validate() {
            problems.extend(v);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Seeded token embeddings and initial latent for `layout`.
    pub fn prepare(&self, layout: &LayoutSpec) -> Result<(TokenEmbedding, Latent)> {
        let [h, w] = self.grid;
        let emb = TokenEmbedding::random_unit(
            layout.n_tokens(),
            self.channels,
            &mut rng_for(self.seed, Stream::Embedding),
        );
        let schedule = self.guidance().schedule()?;
        let initial = Latent::gaussian(
            self.channels,
            h,
            w,
            schedule.initial_std(),
            &mut rng_for(self.seed, Stream::InitialLatent),
        );
        Ok((emb, initial))
    }
}
