//! Object-generation and attribute-binding rewards over attention maps, with
//! their analytic derivatives with respect to the maps.
//!
//! Object reward for object `i` with map `A`, inbox mask `m` and `N` sliding masks `s_k`:
//!
//! ```text
//! R_o = mean(A | m) - mean(A | !m) + lambda_iou / N * sum_k soft_iou(A*m, A*s_k)
//! ```
//!
//! Attribute reward for attribute `j` bound to object `i`:
//!
//! ```text
//! R_a = -KL( norm(A_a | m_i) || norm(A_o | m_i) )
//! ```
//!
//! and the scene total is `sum_i R_o + lambda_a * sum_j R_a`.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionStack;
use crate::error::{contract, Result};
use crate::layout::{GridMask, LayoutSpec, ObjectMasks};

/// Denominator guard of the soft IoU.
pub const IOU_EPS: f64 = 1e-8;
/// Additive smoothing applied to every retained cell before the KL.
pub const KL_EPS: f64 = 1e-10;

/// Term weights. `mainbox` and `outbox` are 1 in the full reward; setting one
/// to zero disables that term for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_iou: f64,
    pub lambda_a: f64,
    #[serde(default = "one")]
    pub mainbox: f64,
    #[serde(default = "one")]
    pub outbox: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_iou: 1.0,
            lambda_a: 1.0,
            mainbox: 1.0,
            outbox: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_iou", self.lambda_iou),
            ("lambda_a", self.lambda_a),
            ("mainbox", self.mainbox),
            ("outbox", self.outbox),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(contract(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectReward {
    pub mainbox: f64,
    pub outbox: f64,
    pub iou: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeReward {
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub objects: Vec<ObjectReward>,
    pub attributes: Vec<AttributeReward>,
    pub grand_total: f64,
}

impl RewardReport {
    pub fn sum_mainbox(&self) -> f64 {
        self.objects.iter().map(|o| o.mainbox).sum()
    }

    pub fn sum_outbox(&self) -> f64 {
        self.objects.iter().map(|o| o.outbox).sum()
    }

    pub fn sum_iou(&self) -> f64 {
        self.objects.iter().map(|o| o.iou).sum()
    }

    pub fn sum_kl(&self) -> f64 {
        self.attributes.iter().map(|a| a.kl).sum()
    }
}

fn check_dims(map: &ArrayView2<f64>, mask: &GridMask) -> Result<()> {
    if map.dim() != mask.dim() {
        return Err(contract(format!(
            "map is {:?} but mask is {:?}",
            map.dim(),
            mask.dim()
        )));
    }
    Ok(())
}

/// Mean of `map` over the set cells of `mask`; 0 for an empty mask.
pub fn masked_mean(map: ArrayView2<f64>, mask: &GridMask) -> Result<f64> {
    check_dims(&map, mask)?;
    let n = mask.count();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = Zip::from(&map)
        .and(mask.cells())
        .fold(0.0, |acc, &v, &m| if m { acc + v } else { acc });
    Ok(sum / n as f64)
}

/// `sum(min(x, y)) / (sum(max(x, y)) + 1e-8)` for nonnegative maps.
pub fn soft_iou(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(contract(format!("soft_iou shapes differ: {:?} vs {:?}", x.dim(), y.dim())));
    }
    if x.iter().chain(y.iter()).any(|&v| v < 0.0 || v.is_nan()) {
        return Err(contract("soft_iou requires nonnegative entries"));
    }
    let (mut inter, mut union) = (0.0, 0.0);
    Zip::from(&x).and(&y).for_each(|&a, &b| {
        inter += a.min(b);
        union += a.max(b);
    });
    Ok(inter / (union + IOU_EPS))
}

/// Computes the object reward and its parts.
pub fn object_reward(
    map: ArrayView2<f64>,
    inbox: &GridMask,
    sliding: &[GridMask],
    weights: &RewardWeights,
) -> Result<ObjectReward> {
    if sliding.is_empty() {
        return Err(contract("object_reward needs at least one sliding mask"));
    }
    let mainbox = masked_mean(map, inbox)?;
    let outbox = masked_mean(map, &inbox.complement())?;
    let inside = &map * &inbox.to_f64();
    let mut iou = 0.0;
    for s in sliding {
        check_dims(&map, s)?;
        iou += soft_iou(inside.view(), (&map * &s.to_f64()).view())?;
    }
    iou /= sliding.len() as f64;
    let total = weights.mainbox * mainbox - weights.outbox * outbox + weights.lambda_iou * iou;
    Ok(ObjectReward {
        mainbox,
        outbox,
        iou,
        total,
    })
}

/// Derivative of `object_reward(..).total` with respect to each cell of `map`.
///
/// The IoU derivative uses the fact that both arguments are `map` times a 0/1
/// mask, so `min` and `max` reduce to masked sums over the intersection and
/// union of the two masks.
pub fn object_reward_grad(
    map: ArrayView2<f64>,
    inbox: &GridMask,
    sliding: &[GridMask],
    weights: &RewardWeights,
) -> Result<Array2<f64>> {
    check_dims(&map, inbox)?;
    if sliding.is_empty() {
        return Err(contract("object_reward needs at least one sliding mask"));
    }
    let n_in = inbox.count();
    let n_out = inbox.dim().0 * inbox.dim().1 - n_in;
    let mut grad = Array2::zeros(map.dim());
    Zip::from(&mut grad).and(inbox.cells()).for_each(|g, &m| {
        if m {
            *g = weights.mainbox / n_in as f64;
        } else if n_out > 0 {
            *g = -weights.outbox / n_out as f64;
        }
    });
    if weights.lambda_iou != 0.0 {
        let scale = weights.lambda_iou / sliding.len() as f64;
        for s in sliding {
            check_dims(&map, s)?;
            let (mut inter, mut union) = (0.0, 0.0);
            Zip::from(&map)
                .and(inbox.cells())
                .and(s.cells())
                .for_each(|&a, &i, &k| {
                    if i && k {
                        inter += a;
                    }
                    if i || k {
                        union += a;
                    }
                });
            let union = union + IOU_EPS;
            Zip::from(&mut grad)
                .and(inbox.cells())
                .and(s.cells())
                .for_each(|g, &i, &k| {
                    let d_inter = if i && k { 1.0 / union } else { 0.0 };
                    let d_union = if i || k { inter / (union * union) } else { 0.0 };
                    *g += scale * (d_inter - d_union);
                });
        }
    }
    Ok(grad)
}

/// Restricts `map` to the set cells of `mask` (row-major order), adds 1e-10 to
/// each and renormalizes.
pub fn normalize_masked(map: ArrayView2<f64>, mask: &GridMask) -> Result<Vec<f64>> {
    check_dims(&map, mask)?;
    let mut p: Vec<f64> = Zip::from(&map)
        .and(mask.cells())
        .fold(Vec::new(), |mut acc, &v, &m| {
            if m {
                acc.push(v + KL_EPS);
            }
            acc
        });
    if p.is_empty() {
        return Err(contract("normalize_masked needs a nonempty mask"));
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a * (a / b).ln()).sum()
}

/// `-KL(attr || obj)` on the inbox, after restriction and smoothing.
pub fn attribute_reward(
    attr_map: ArrayView2<f64>,
    obj_map: ArrayView2<f64>,
    inbox: &GridMask,
) -> Result<f64> {
    let p = normalize_masked(attr_map, inbox)?;
    let q = normalize_masked(obj_map, inbox)?;
    Ok(-kl(&p, &q))
}

/// Derivatives of `attribute_reward` with respect to `(attr_map, obj_map)`.
pub fn attribute_reward_grad(
    attr_map: ArrayView2<f64>,
    obj_map: ArrayView2<f64>,
    inbox: &GridMask,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let p = normalize_masked(attr_map, inbox)?;
    let q = normalize_masked(obj_map, inbox)?;
    let divergence = kl(&p, &q);
    let n = p.len() as f64;
    let attr_mass: f64 = masked_sum(attr_map, inbox) + n * KL_EPS;
    let obj_mass: f64 = masked_sum(obj_map, inbox) + n * KL_EPS;

    let mut d_attr = Array2::zeros(attr_map.dim());
    let mut d_obj = Array2::zeros(obj_map.dim());
    let set = inbox
        .cells()
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|(idx, _)| idx);
    for (k, idx) in set.enumerate() {
        // through p = (x + eps) / S_x and q = (y + eps) / S_y
        d_attr[idx] = (divergence - (p[k] / q[k]).ln()) / attr_mass;
        d_obj[idx] = (p[k] / q[k] - 1.0) / obj_mass;
    }
    Ok((d_attr, d_obj))
}

fn masked_sum(map: ArrayView2<f64>, mask: &GridMask) -> f64 {
    Zip::from(&map)
        .and(mask.cells())
        .fold(0.0, |acc, &v, &m| if m { acc + v } else { acc })
}

fn check_layout(attn: &AttentionStack, layout: &LayoutSpec, masks: &[ObjectMasks]) -> Result<()> {
    if masks.len() != layout.objects.len() {
        return Err(contract(format!(
            "{} objects but {} mask sets",
            layout.objects.len(),
            masks.len()
        )));
    }
    let l = attn.n_tokens();
    let indices = layout
        .objects
        .iter()
        .map(|o| o.token_index)
        .chain(layout.attributes.iter().map(|a| a.token_index));
    for idx in indices {
        if idx >= l {
            return Err(contract(format!(
                "token index {idx} has no attention map (L = {l})"
            )));
        }
    }
    for a in &layout.attributes {
        if a.parent_object >= masks.len() {
            return Err(contract(format!("attribute parent {} has no mask", a.parent_object)));
        }
    }
    Ok(())
}

/// Evaluates every object and attribute reward and the scene total.
pub fn total_reward(
    attn: &AttentionStack,
    layout: &LayoutSpec,
    masks: &[ObjectMasks],
    weights: &RewardWeights,
) -> Result<RewardReport> {
    check_layout(attn, layout, masks)?;
    let objects = layout
        .objects
        .iter()
        .zip(masks)
        .map(|(o, m)| object_reward(attn.map(o.token_index), &m.inbox, &m.sliding.masks, weights))
        .collect::<Result<Vec<_>>>()?;
    let attributes = layout
        .attributes
        .iter()
        .map(|a| {
            let parent = &layout.objects[a.parent_object];
            let total = attribute_reward(
                attn.map(a.token_index),
                attn.map(parent.token_index),
                &masks[a.parent_object].inbox,
            )?;
            Ok(AttributeReward { kl: -total, total })
        })
        .collect::<Result<Vec<_>>>()?;
    let object_sum: f64 = objects.iter().map(|o| o.total).sum();
    let attribute_sum: f64 = attributes.iter().map(|a| a.total).sum();
    Ok(RewardReport {
        objects,
        attributes,
        grand_total: object_sum + weights.lambda_a * attribute_sum,
    })
}

/// Derivative of `total_reward(..).grand_total` with respect to the attention stack.
pub fn total_reward_cotangent(
    attn: &AttentionStack,
    layout: &LayoutSpec,
    masks: &[ObjectMasks],
    weights: &RewardWeights,
) -> Result<Array3<f64>> {
    check_layout(attn, layout, masks)?;
    let mut cot = Array3::zeros(attn.0.dim());
    for (o, m) in layout.objects.iter().zip(masks) {
        let g = object_reward_grad(attn.map(o.token_index), &m.inbox, &m.sliding.masks, weights)?;
        let mut slot = cot.index_axis_mut(Axis(0), o.token_index);
        slot += &g;
    }
    if weights.lambda_a != 0.0 {
        for a in &layout.attributes {
            let parent = &layout.objects[a.parent_object];
            let (d_attr, d_obj) = attribute_reward_grad(
                attn.map(a.token_index),
                attn.map(parent.token_index),
                &masks[a.parent_object].inbox,
            )?;
            let mut slot = cot.index_axis_mut(Axis(0), a.token_index);
            slot.scaled_add(weights.lambda_a, &d_attr);
            let mut slot = cot.index_axis_mut(Axis(0), parent.token_index);
            slot.scaled_add(weights.lambda_a, &d_obj);
        }
    }
    Ok(cot)
}
