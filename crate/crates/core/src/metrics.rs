//! Attention-level run metrics: in-box mass, centroid offset, binding KL.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionStack;
use crate::error::Result;
use crate::layout::{BoundingBox, GridMask, LayoutSpec, ObjectMasks};
use crate::rewards::attribute_reward;

pub const METRICS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub token_index: usize,
    pub token: String,
    /// Attention mass inside the box over total mass.
    pub inbox_fraction: f64,
    /// Distance in cells between the attention centroid and the box center.
    pub centroid_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub token_index: usize,
    pub token: String,
    pub parent_object: usize,
    /// KL(attribute || parent object) on the parent's box, in nats.
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema: u32,
    pub scenario: String,
    pub guided: bool,
    pub objects: Vec<ObjectMetrics>,
    pub attributes: Vec<AttributeMetrics>,
}

impl RunMetrics {
    pub fn mean_inbox_fraction(&self) -> f64 {
        mean(self.objects.iter().map(|o| o.inbox_fraction))
    }

    pub fn mean_centroid_offset(&self) -> f64 {
        mean(self.objects.iter().map(|o| o.centroid_offset))
    }

    pub fn mean_kl(&self) -> f64 {
        mean(self.attributes.iter().map(|a| a.kl))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn inbox_fraction(map: ArrayView2<f64>, inbox: &GridMask) -> f64 {
    let total: f64 = map.sum();
    if total <= 0.0 {
        return 0.0;
    }
    let inside: f64 = map
        .indexed_iter()
        .filter(|((r, c), _)| inbox.get(*r, *c))
        .map(|(_, v)| v)
        .sum();
    (inside / total).clamp(0.0, 1.0)
}

pub fn centroid_offset(map: ArrayView2<f64>, bbox: &BoundingBox) -> f64 {
    let (h, w) = map.dim();
    let total: f64 = map.sum();
    let (cx, cy) = bbox.center();
    let (bx, by) = (cx * w as f64, cy * h as f64);
    if total <= 0.0 {
        return 0.0;
    }
    let (mut mx, mut my) = (0.0, 0.0);
    for ((r, c), &v) in map.indexed_iter() {
        mx += v * (c as f64 + 0.5);
        my += v * (r as f64 + 0.5);
    }
    ((mx / total - bx).powi(2) + (my / total - by).powi(2)).sqrt()
}

pub fn compute_metrics(
    attn: &AttentionStack,
    layout: &LayoutSpec,
    masks: &[ObjectMasks],
    scenario: &str,
    guided: bool,
) -> Result<RunMetrics> {
    let objects = layout
        .objects
        .iter()
        .zip(masks)
        .map(|(o, m)| ObjectMetrics {
            token_index: o.token_index,
            token: layout.prompt_tokens[o.token_index].clone(),
            inbox_fraction: inbox_fraction(attn.map(o.token_index), &m.inbox),
            centroid_offset: centroid_offset(attn.map(o.token_index), &o.bbox),
        })
        .collect();
    let attributes = layout
        .attributes
        .iter()
        .map(|a| {
            let parent = &layout.objects[a.parent_object];
            let reward = attribute_reward(
                attn.map(a.token_index),
                attn.map(parent.token_index),
                &masks[a.parent_object].inbox,
            )?;
            Ok(AttributeMetrics {
                token_index: a.token_index,
                token: layout.prompt_tokens[a.token_index].clone(),
                parent_object: a.parent_object,
                kl: (-reward).max(0.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunMetrics {
        schema: METRICS_SCHEMA,
        scenario: scenario.to_string(),
        guided,
        objects,
        attributes,
    })
}
