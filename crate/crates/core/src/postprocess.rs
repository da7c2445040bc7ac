//! From a dense RoI map to token boxes: Gaussian smoothing, thresholding,
//! 4-connected components, and the two upscaling geometries (one box per
//! region, or one union box plus the mask inside it).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo_label::{min_enclosing_box, TokenBox};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    sigma: f64,
    radius: usize,
    weights: Vec<f64>,
}

impl GaussianKernel {
    /// Normalized 1-D kernel with `radius = ceil(3 sigma)`. A non-positive
    /// sigma yields the identity kernel.
    pub fn new(sigma: f64) -> Self {
        let radius = if sigma > 0.0 { (3.0 * sigma).ceil() as usize } else { 0 };
        Self::with_radius(sigma, radius)
    }

    pub fn with_radius(sigma: f64, radius: usize) -> Self {
        if sigma <= 0.0 {
            return Self {
                sigma,
                radius: 0,
                weights: vec![1.0],
            };
        }
        let raw: Vec<f64> = (-(radius as i64)..=radius as i64)
            .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        Self {
            sigma,
            radius,
            weights: raw.into_iter().map(|w| w / sum).collect(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_identity(&self) -> bool {
        self.sigma <= 0.0
    }
}

impl Default for GaussianKernel {
    fn default() -> Self {
        Self::new(1.0)
    }
}

/// Half-sample symmetric reflection (`c b a | a b c | c b a`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Separable 2-D Gaussian filter with symmetric reflect padding.
pub fn gaussian_smooth(map: &[f64], height: usize, width: usize, k: &GaussianKernel) -> Result<Vec<f64>> {
    if height == 0 || width == 0 || map.len() != height * width {
        return Err(Error::shape("smoothing input", height * width, map.len()));
    }
    if k.is_identity() {
        return Ok(map.to_vec());
    }
    let r = k.radius as i64;
    let w = &k.weights;
    let mut horiz = vec![0.0; map.len()];
    for row in 0..height {
        let src = &map[row * width..(row + 1) * width];
        for c in 0..width {
            horiz[row * width + c] = (-r..=r)
                .map(|o| w[(o + r) as usize] * src[reflect(c as i64 + o, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; map.len()];
    for row in 0..height {
        for c in 0..width {
            out[row * width + c] = (-r..=r)
                .map(|o| w[(o + r) as usize] * horiz[reflect(row as i64 + o, height) * width + c])
                .sum();
        }
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Strict `value > tau` thresholding.
pub fn binarize(map: &[f64], tau: f64) -> Vec<u8> {
    map.iter().map(|&v| u8::from(v > tau)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    /// Row-major token indices, ascending.
    pub tokens: Vec<usize>,
    pub bbox: TokenBox,
}

/// 4-connected components of the 1-tokens, ordered by their first token.
pub fn connected_components(mask: &[u8], height: usize, width: usize) -> Result<Vec<Region>> {
    if mask.len() != height * width {
        return Err(Error::shape("binary mask", height * width, mask.len()));
    }
    let mut seen = vec![false; mask.len()];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut tokens = Vec::new();
        while let Some(j) = queue.pop_front() {
            tokens.push(j);
            let (r, c) = (j / width, j % width);
            let mut visit = |n: usize| {
                if mask[n] != 0 && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if r > 0 {
                visit(j - width);
            }
            if r + 1 < height {
                visit(j + width);
            }
            if c > 0 {
                visit(j - 1);
            }
            if c + 1 < width {
                visit(j + 1);
            }
        }
        tokens.sort_unstable();
        let bbox = min_enclosing_box(tokens.iter().map(|&j| (j / width, j % width)))?;
        regions.push(Region { tokens, bbox });
    }
    Ok(regions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpscaleMode {
    Box,
    Mask,
}

impl std::str::FromStr for UpscaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(UpscaleMode::Box),
            "mask" => Ok(UpscaleMode::Mask),
            other => Err(Error::Config(format!("unknown mode {other:?}, expected box or mask"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CroppedMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoIResult {
    pub mode: UpscaleMode,
    /// Box mode: one box per region, in region order.
    pub boxes: Vec<TokenBox>,
    /// Mask mode: box around the union of all regions.
    pub union_box: Option<TokenBox>,
    #[serde(skip)]
    pub cropped_mask: Option<CroppedMask>,
    pub regions: usize,
    /// No token survived binarization.
    pub empty: bool,
}

impl RoIResult {
    fn empty(mode: UpscaleMode) -> Self {
        Self {
            mode,
            boxes: Vec::new(),
            union_box: None,
            cropped_mask: None,
            regions: 0,
            empty: true,
        }
    }

    /// The tokens a second stage would re-encode: filled boxes in box mode,
    /// the filled union box in mask mode.
    pub fn covered_tokens(&self, height: usize, width: usize) -> Vec<u8> {
        let mut out = vec![0u8; height * width];
        let fill = |b: &TokenBox, out: &mut Vec<u8>| {
            for r in b.r0..=b.r1 {
                out[r * width + b.c0..=r * width + b.c1].fill(1);
            }
        };
        match self.mode {
            UpscaleMode::Box => self.boxes.iter().for_each(|b| fill(b, &mut out)),
            UpscaleMode::Mask => {
                if let Some(b) = &self.union_box {
                    fill(b, &mut out);
                }
            }
        }
        out
    }

    /// Tokens actually kept: filled boxes in box mode, the cropped mask
    /// pasted back into the grid in mask mode.
    pub fn selected_tokens(&self, height: usize, width: usize) -> Vec<u8> {
        match (&self.union_box, &self.cropped_mask) {
            (Some(b), Some(m)) if self.mode == UpscaleMode::Mask => {
                let mut out = vec![0u8; height * width];
                for (i, r) in (b.r0..=b.r1).enumerate() {
                    out[r * width + b.c0..=r * width + b.c1].copy_from_slice(&m.values[i * m.width..(i + 1) * m.width]);
                }
                out
            }
            _ => self.covered_tokens(height, width),
        }
    }
}

pub fn box_upscale(regions: &[Region]) -> RoIResult {
    if regions.is_empty() {
        return RoIResult::empty(UpscaleMode::Box);
    }
    RoIResult {
        mode: UpscaleMode::Box,
        boxes: regions.iter().map(|r| r.bbox).collect(),
        union_box: None,
        cropped_mask: None,
        regions: regions.len(),
        empty: false,
    }
}

pub fn masked_upscale(regions: &[Region], mask: &[u8], width: usize) -> RoIResult {
    let Some(all) = regions.iter().map(|r| r.bbox).reduce(|a, b| a.union(&b)) else {
        return RoIResult::empty(UpscaleMode::Mask);
    };
    let values = (all.r0..=all.r1)
        .flat_map(|r| mask[r * width + all.c0..=r * width + all.c1].iter().copied())
        .collect();
    RoIResult {
        mode: UpscaleMode::Mask,
        boxes: Vec::new(),
        union_box: Some(all),
        cropped_mask: Some(CroppedMask {
            height: all.height(),
            width: all.width(),
            values,
        }),
        regions: regions.len(),
        empty: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

/// Inclusive pixel rectangle covered by a token box, clamped to the image.
pub fn token_box_to_pixel_box(b: &TokenBox, patch: usize, image_height: usize, image_width: usize) -> Result<PixelBox> {
    if patch == 0 || image_height == 0 || image_width == 0 {
        return Err(Error::Config("patch size and image dims must be >= 1".into()));
    }
    let clamp_y = |v: usize| v.min(image_height - 1);
    let clamp_x = |v: usize| v.min(image_width - 1);
    Ok(PixelBox {
        y0: clamp_y(b.r0 * patch),
        x0: clamp_x(b.c0 * patch),
        y1: clamp_y((b.r1 + 1) * patch - 1),
        x1: clamp_x((b.c1 + 1) * patch - 1),
    })
}

pub fn iou_boxes(a: &TokenBox, b: &TokenBox) -> f64 {
    let r0 = a.r0.max(b.r0);
    let c0 = a.c0.max(b.c0);
    let r1 = a.r1.min(b.r1);
    let c1 = a.c1.min(b.c1);
    let inter = if r0 <= r1 && c0 <= c1 { (r1 - r0 + 1) * (c1 - c0 + 1) } else { 0 };
    inter as f64 / (a.area() + b.area() - inter) as f64
}

pub fn iou_masks(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("iou mask", a.len(), b.len()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Smoothing, strict thresholding and upscaling of a probability map.
pub fn roi_from_map(
    probs: &[f64],
    height: usize,
    width: usize,
    kernel: &GaussianKernel,
    tau: f64,
    mode: UpscaleMode,
) -> Result<RoIResult> {
    let smooth = gaussian_smooth(probs, height, width, kernel)?;
    let mask = binarize(&smooth, tau);
    let regions = connected_components(&mask, height, width)?;
    Ok(match mode {
        UpscaleMode::Box => box_upscale(&regions),
        UpscaleMode::Mask => masked_upscale(&regions, &mask, width),
    })
}
