//! Reward-component on/off grids.
//!
//! Grid A toggles the three object terms one at a time; grid B mixes the object
//! terms with the attribute-binding term. Disabled terms get weight zero and
//! every combination reuses the same seed.

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::guidance::{run_guided_sampling, GuidedRun};
use crate::layout::LayoutSpec;
use crate::metrics::{compute_metrics, RunMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Combination {
    /// `"object"` for the object-term grid, `"binding"` for the grid with the attribute term.
    pub grid: &'static str,
    pub mainbox: bool,
    pub outbox: bool,
    pub iou: bool,
    pub attribute: bool,
}

impl Combination {
    const fn new(grid: &'static str, mainbox: bool, outbox: bool, iou: bool, attribute: bool) -> Self {
        Self {
            grid,
            mainbox,
            outbox,
            iou,
            attribute,
        }
    }

    /// e.g. `mainbox+outbox+iou`, or `none`.
    pub fn name(&self) -> String {
        let parts: Vec<&str> = [
            (self.mainbox, "mainbox"),
            (self.outbox, "outbox"),
            (self.iou, "iou"),
            (self.attribute, "attribute"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|&(_, n)| n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    /// `base` with the disabled terms' weights set to zero.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        if !self.mainbox {
            c.mainbox_weight = 0.0;
        }
        if !self.outbox {
            c.outbox_weight = 0.0;
        }
        if !self.iou {
            c.lambda_iou = 0.0;
        }
        if !self.attribute {
            c.lambda_a = 0.0;
        }
        c
    }
}

pub const OBJECT_GRID: [Combination; 5] = [
    Combination::new("object", false, false, false, false),
    Combination::new("object", true, false, false, false),
    Combination::new("object", false, true, false, false),
    Combination::new("object", false, false, true, false),
    Combination::new("object", true, true, true, false),
];

pub const BINDING_GRID: [Combination; 5] = [
    Combination::new("binding", false, false, false, false),
    Combination::new("binding", false, true, true, false),
    Combination::new("binding", true, true, true, false),
    Combination::new("binding", false, true, true, true),
    Combination::new("binding", true, true, true, true),
];

pub fn all_combinations() -> impl Iterator<Item = Combination> {
    OBJECT_GRID.into_iter().chain(BINDING_GRID)
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub combination: Combination,
    pub metrics: RunMetrics,
    pub run: GuidedRun,
}

/// Runs one combination from the config's seed.
pub fn run_combination(
    combination: Combination,
    layout: &LayoutSpec,
    base: &RunConfig,
    scenario: &str,
) -> Result<AblationResult> {
    let config = combination.apply(base);
    let (emb, initial) = config.prepare(layout)?;
    let run = run_guided_sampling(&config.guidance(), layout, &emb, &initial)?;
    let metrics = compute_metrics(&run.attention, layout, &run.masks, scenario, true)?;
    Ok(AblationResult {
        combination,
        metrics,
        run,
    })
}

/// Both grids, in table order.
pub fn run_ablation(layout: &LayoutSpec, base: &RunConfig, scenario: &str) -> Result<Vec<AblationResult>> {
    all_combinations()
        .map(|c| run_combination(c, layout, base, scenario))
        .collect()
}

/// One CSV row of an ablation run.
#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub grid: &'static str,
    pub combination: String,
    pub mainbox: bool,
    pub outbox: bool,
    pub iou: bool,
    pub attribute: bool,
    pub mean_inbox_fraction: f64,
    pub mean_centroid_offset: f64,
    pub mean_kl: f64,
}

impl From<&AblationResult> for AblationRow {
    fn from(r: &AblationResult) -> Self {
        let c = r.combination;
        Self {
            grid: c.grid,
            combination: c.name(),
            mainbox: c.mainbox,
            outbox: c.outbox,
            iou: c.iou,
            attribute: c.attribute,
            mean_inbox_fraction: r.metrics.mean_inbox_fraction(),
            mean_centroid_offset: r.metrics.mean_centroid_offset(),
            mean_kl: r.metrics.mean_kl(),
        }
    }
}
