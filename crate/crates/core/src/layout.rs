//! Layout documents, box rasterization and sliding-box sampling.
//!
//! Boxes live on the unit square of the attention grid. A cell `(r, c)` of an
//! `h x w` grid belongs to a box when its center `((c + 0.5) / w, (r + 0.5) / h)`
//! falls inside the half-open box `[x0, x1) x [y0, y1)`.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Axis-aligned box in normalized grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x0, y0, x1, y1]: [f64; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BoundingBox {
    /// Builds a box, rejecting anything outside `0 <= x0 < x1 <= 1`, `0 <= y0 < y1 <= 1`.
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        let problems = b.violations();
        if problems.is_empty() {
            Ok(b)
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Center in normalized coordinates `(x, y)`.
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let coords = [self.x0, self.y0, self.x1, self.y1];
        if coords.iter().any(|v| !v.is_finite()) {
            out.push(format!("box {coords:?} has non-finite coordinates"));
            return out;
        }
        if coords.iter().any(|v| !(0.0..=1.0).contains(v)) {
            out.push(format!("box {coords:?} leaves the unit square"));
        }
        if self.x0 >= self.x1 {
            out.push(format!("box {coords:?} has x0 >= x1 (zero or negative width)"));
        }
        if self.y0 >= self.y1 {
            out.push(format!("box {coords:?} has y0 >= y1 (zero or negative height)"));
        }
        out
    }
}

/// Boolean `h x w` grid; row index first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMask {
    cells: Array2<bool>,
}

impl GridMask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            cells: Array2::from_elem((h, w), false),
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            cells: Array2::from_elem((h, w), true),
        }
    }

    pub fn from_cells(cells: Array2<bool>) -> Self {
        Self { cells }
    }

    pub fn height(&self) -> usize {
        self.cells.nrows()
    }

    pub fn width(&self) -> usize {
        self.cells.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.cells.dim()
    }

    pub fn cells(&self) -> &Array2<bool> {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[[r, c]]
    }

    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        self.cells[[r, c]] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn complement(&self) -> Self {
        Self {
            cells: self.cells.mapv(|v| !v),
        }
    }

    /// `true` when every set cell of `other` is also set here.
    pub fn contains(&self, other: &GridMask) -> bool {
        self.dim() == other.dim()
            && self
                .cells
                .iter()
                .zip(other.cells.iter())
                .all(|(&a, &b)| a || !b)
    }

    /// Inclusive `(row_min, row_max, col_min, col_max)` of the set cells.
    pub fn extent(&self) -> Option<(usize, usize, usize, usize)> {
        let mut ext: Option<(usize, usize, usize, usize)> = None;
        for ((r, c), &v) in self.cells.indexed_iter() {
            if !v {
                continue;
            }
            ext = Some(match ext {
                None => (r, r, c, c),
                Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
            });
        }
        ext
    }

    /// Shifts every set cell by `(dx, dy)` cells (columns, rows). Cells pushed off the
    /// grid are dropped.
    pub fn translate(&self, dx: i64, dy: i64) -> Self {
        let (h, w) = self.dim();
        let mut out = Self::empty(h, w);
        for ((r, c), &v) in self.cells.indexed_iter() {
            if !v {
                continue;
            }
            let (nr, nc) = (r as i64 + dy, c as i64 + dx);
            if (0..h as i64).contains(&nr) && (0..w as i64).contains(&nc) {
                out.cells[[nr as usize, nc as usize]] = true;
            }
        }
        out
    }

    /// Cells as `f64` (1.0 set, 0.0 unset).
    pub fn to_f64(&self) -> Array2<f64> {
        self.cells.mapv(|v| if v { 1.0 } else { 0.0 })
    }
}

/// Rasterizes `bbox` onto an `h x w` grid using the cell-center rule.
///
/// A box too small to capture any cell center snaps to the single cell that
/// contains the box center.
pub fn rasterize_mask(bbox: &BoundingBox, h: usize, w: usize) -> Result<GridMask> {
    if h == 0 || w == 0 {
        return Err(contract(format!("grid must be at least 1x1, got {h}x{w}")));
    }
    let mut mask = GridMask::empty(h, w);
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            if bbox.contains_point(x, y) {
                mask.set(r, c, true);
            }
        }
    }
    if mask.is_empty() {
        let (cx, cy) = bbox.center();
        let c = ((cx * w as f64).floor() as i64).clamp(0, w as i64 - 1) as usize;
        let r = ((cy * h as f64).floor() as i64).clamp(0, h as i64 - 1) as usize;
        mask.set(r, c, true);
    }
    Ok(mask)
}

/// Sliding masks for one object, plus the integer offsets that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingBoxes {
    pub masks: Vec<GridMask>,
    /// `(dx, dy)` in cells, one per mask.
    pub offsets: Vec<(i64, i64)>,
    /// Set when the main box spans the whole grid, so no shift of at least one cell fits.
    pub degenerate: bool,
}

/// Inclusive range of integer offset magnitudes, `[0.10, 0.20] * min(h, w)` rounded, floor 1.
pub fn offset_magnitude_range(h: usize, w: usize) -> (f64, f64) {
    let m = h.min(w) as f64;
    (0.10 * m, 0.20 * m)
}

/// Samples `n` translated copies of the rasterized `bbox`.
///
/// Per axis an offset magnitude is drawn uniformly from `[0.1, 0.2] * min(h, w)`,
/// rounded to the nearest integer (minimum 1) and given a random sign. The
/// translation is clamped so the shifted mask stays on the grid; if the chosen
/// direction has no room the opposite direction is used instead.
pub fn sample_sliding_boxes<R: Rng + ?Sized>(
    bbox: &BoundingBox,
    n: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<SlidingBoxes> {
    if n == 0 {
        return Err(contract("number of sliding boxes must be at least 1"));
    }
    let main = rasterize_mask(bbox, h, w)?;
    let (r0, r1, c0, c1) = main
        .extent()
        .ok_or_else(|| contract("main box rasterized to an empty mask"))?;
    let (lo, hi) = offset_magnitude_range(h, w);

    // room[0] = toward negative index, room[1] = toward positive index
    let room_x = [c0 as i64, (w - 1 - c1) as i64];
    let room_y = [r0 as i64, (h - 1 - r1) as i64];
    let degenerate = room_x == [0, 0] && room_y == [0, 0];

    let mut masks = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    for _ in 0..n {
        let dx = axis_offset(rng, lo, hi, room_x);
        let dy = axis_offset(rng, lo, hi, room_y);
        masks.push(main.translate(dx, dy));
        offsets.push((dx, dy));
    }
    Ok(SlidingBoxes {
        masks,
        offsets,
        degenerate,
    })
}

fn axis_offset<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64, room: [i64; 2]) -> i64 {
    let magnitude = (rng.random_range(lo..=hi).round() as i64).max(1);
    let positive = rng.random_bool(0.5);
    let (first, second) = if positive { (1, 0) } else { (0, 1) };
    let sign = |side: usize| if side == 1 { 1 } else { -1 };
    if room[first] > 0 {
        sign(first) * magnitude.min(room[first])
    } else if room[second] > 0 {
        sign(second) * magnitude.min(room[second])
    } else {
        0
    }
}

/// An object token together with its box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub token_index: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// An attribute token bound to one object (index into `LayoutSpec::objects`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub token_index: usize,
    pub parent_object: usize,
}

/// Prompt tokens, object boxes and attribute links for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    #[serde(default)]
    pub prompt: String,
    #[serde(rename = "tokens")]
    pub prompt_tokens: Vec<String>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub attributes: Vec<AttributeSpec>,
}

impl LayoutSpec {
    pub fn n_tokens(&self) -> usize {
        self.prompt_tokens.len()
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let l = self.n_tokens();
        let mut problems = Vec::new();
        let mut seen = vec![false; l];
        let mut check_index = |what: String, idx: usize, problems: &mut Vec<String>| {
            if idx >= l {
                problems.push(format!("{what}: token_index {idx} out of range (L = {l})"));
            } else if seen[idx] {
                problems.push(format!("{what}: token_index {idx} used more than once"));
            } else {
                seen[idx] = true;
            }
        };
        for (i, o) in self.objects.iter().enumerate() {
            check_index(format!("objects[{i}]"), o.token_index, &mut problems);
            for v in o.bbox.violations() {
                problems.push(format!("objects[{i}].box: {v}"));
            }
        }
        for (j, a) in self.attributes.iter().enumerate() {
            check_index(format!("attributes[{j}]"), a.token_index, &mut problems);
            if a.parent_object >= self.objects.len() {
                problems.push(format!(
                    "attributes[{j}].parent_object: {} is not a valid object index ({} objects)",
                    a.parent_object,
                    self.objects.len()
                ));
            }
        }
        if self.objects.len() + self.attributes.len() > l {
            problems.push(format!(
                "n_o + n_a = {} exceeds the number of tokens L = {l}",
                self.objects.len() + self.attributes.len()
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }
}

/// Decodes and validates a layout document.
pub fn parse_layout(text: &str) -> Result<LayoutSpec> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let de = &mut serde_json::Deserializer::from_str(text);
    let layout: LayoutSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Parse {
            field: if path == "." { "<document>".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })?;
    layout.validate()?;
    Ok(layout)
}

pub fn load_layout(path: &Path) -> Result<LayoutSpec> {
    parse_layout(&std::fs::read_to_string(path)?)
}

/// Inbox and sliding masks for one object, computed once per run.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMasks {
    pub inbox: GridMask,
    pub sliding: SlidingBoxes,
}

/// Rasterizes every object box and samples its sliding boxes, in object order.
pub fn build_object_masks<R: Rng + ?Sized>(
    layout: &LayoutSpec,
    h: usize,
    w: usize,
    n_sliding: usize,
    rng: &mut R,
) -> Result<Vec<ObjectMasks>> {
    layout
        .objects
        .iter()
        .map(|o| {
            Ok(ObjectMasks {
                inbox: rasterize_mask(&o.bbox, h, w)?,
                sliding: sample_sliding_boxes(&o.bbox, n_sliding, h, w, rng)?,
            })
        })
        .collect()
}
