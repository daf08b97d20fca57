//! Binary PGM heatmaps.
//!
//! Each map is min-max rescaled to 0..=255. The original range is kept in a
//! header comment (`# range <min> <max>`) so readers can undo the rescale.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
    pub pixels: Vec<u8>,
}

impl Heatmap {
    pub fn from_map(map: ArrayView2<f64>) -> Self {
        let (height, width) = map.dim();
        let min = map.fold(f64::INFINITY, |m, &v| m.min(v));
        let max = map.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let span = max - min;
        let pixels = map
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        Self {
            width,
            height,
            min,
            max,
            pixels,
        }
    }

    /// Pixel values scaled back to `[0, 1]`.
    pub fn normalized(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.height, self.width), |(r, c)| {
            self.pixels[r * self.width + c] as f64 / 255.0
        })
    }

    /// Pixel values mapped back to the original range.
    pub fn to_map(&self) -> Array2<f64> {
        self.normalized().mapv(|v| self.min + v * (self.max - self.min))
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!(
            "P5\n# range {} {}\n{} {}\n255\n",
            self.min, self.max, self.width, self.height
        )
        .into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            field: "pgm".into(),
            message: msg.into(),
        };
        let mut pos = 0;
        let mut range = None;
        let mut fields = Vec::new();
        // magic, width, height, maxval; comments may sit between them
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos >= bytes.len() {
                return Err(bad("truncated header"));
            }
            if bytes[pos] == b'#' {
                let end = bytes[pos..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map_or(bytes.len(), |e| pos + e);
                let line = std::str::from_utf8(&bytes[pos + 1..end]).map_err(|_| bad("comment"))?;
                let parts: Vec<&str> = line.split_whitespace().collect();
                if let ["range", lo, hi] = parts[..] {
                    range = Some((
                        lo.parse::<f64>().map_err(|_| bad("range min"))?,
                        hi.parse::<f64>().map_err(|_| bad("range max"))?,
                    ));
                }
                pos = end;
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary PGM (P5)"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        if fields[3] != "255" {
            return Err(bad("only maxval 255 is supported"));
        }
        // single whitespace byte separates header from raster
        pos += 1;
        let pixels = bytes
            .get(pos..pos + width * height)
            .ok_or_else(|| bad("truncated raster"))?
            .to_vec();
        let (min, max) = range.unwrap_or((0.0, 1.0));
        Ok(Self {
            width,
            height,
            min,
            max,
            pixels,
        })
    }
}

/// `attn_<token>.pgm` per token; tokens are reduced to `[A-Za-z0-9_-]` and
/// tokens that collide get their index appended.
pub fn heatmap_file_names(tokens: &[String]) -> Vec<String> {
    let clean: Vec<String> = tokens
        .iter()
        .map(|t| {
            let s: String = t
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            if s.is_empty() {
                "_".into()
            } else {
                s
            }
        })
        .collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &clean {
        *counts.entry(s.as_str()).or_default() += 1;
    }
    clean
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if counts[s.as_str()] > 1 {
                format!("attn_{s}_{i}.pgm")
            } else {
                format!("attn_{s}.pgm")
            }
        })
        .collect()
}
