//! Synthetic stand-in for the frozen teacher: planted regions, token
//! features with high-norm sink tokens, and noisy response-to-image
//! attention aggregated into a per-token RoI map.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{write_grid, Grid};
use crate::manifest::{DatasetManifest, SampleRecord};
use crate::pseudo_label::{self, AttentionRows};
use crate::rng::RngStream;

const TAG_REGION: u64 = 1;
const TAG_FEATURES: u64 = 2;
const TAG_ATTENTION: u64 = 3;

/// Attention-logit noise layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNoise {
    /// Fresh noise for every (head, response) row; averages out in the map.
    Independent,
    /// Half of the variance is a per-sample field shared by all rows, so it
    /// survives aggregation as spurious background attention.
    Persistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub response_tokens: usize,
    pub sink_count: usize,
    pub sink_multiplier: f64,
    /// Attention logit added on activated foreground tokens.
    pub signal: f64,
    /// Attention logit added on sink tokens.
    pub sink_boost: f64,
    /// Mean shift of foreground token features along a fixed direction.
    pub feature_shift: f64,
    /// Fraction of foreground tokens whose attention signal is suppressed.
    pub drop_fraction: f64,
    pub noise_scale: f64,
    pub noise: AttentionNoise,
    pub regions: usize,
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
    pub turns: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            feature_dim: 16,
            heads: 4,
            response_tokens: 8,
            sink_count: 3,
            sink_multiplier: 8.0,
            signal: 3.0,
            sink_boost: 3.0,
            feature_shift: 4.0,
            drop_fraction: 0.3,
            noise_scale: 1.0,
            noise: AttentionNoise::Persistent,
            regions: 1,
            min_area_fraction: 0.04,
            max_area_fraction: 0.25,
            turns: 1,
            seed: 1,
        }
    }
}

impl TeacherConfig {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 4 || self.width < 4 {
            return bad(format!(
                "grid {}x{} is smaller than the 4x4 minimum",
                self.height, self.width
            ));
        }
        if self.feature_dim < 2 {
            return bad(format!("feature_dim {} < 2", self.feature_dim));
        }
        if self.heads == 0 || self.response_tokens == 0 || self.turns == 0 || self.regions == 0 {
            return bad("heads, response_tokens, turns and regions must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return bad(format!("drop_fraction {} not in [0, 1)", self.drop_fraction));
        }
        if self.sink_count >= self.tokens() {
            return bad(format!(
                "sink_count {} must be below the token count {}",
                self.sink_count,
                self.tokens()
            ));
        }
        if self.sink_multiplier <= 0.0 || !self.sink_multiplier.is_finite() {
            return bad(format!("sink_multiplier {} must be positive", self.sink_multiplier));
        }
        if self.noise_scale < 0.0 {
            return bad(format!("noise_scale {} < 0", self.noise_scale));
        }
        if !(0.0 < self.min_area_fraction && self.min_area_fraction <= self.max_area_fraction && self.max_area_fraction <= 1.0) {
            return bad(format!(
                "area fractions must satisfy 0 < min <= max <= 1, got {} / {}",
                self.min_area_fraction, self.max_area_fraction
            ));
        }
        if self.feasible_shapes().is_empty() {
            return bad(format!(
                "no rectangle fits area bounds [{}, {}] tokens on a {}x{} grid",
                self.min_area(),
                self.max_area(),
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    fn min_area(&self) -> usize {
        ((self.min_area_fraction * self.tokens() as f64).ceil() as usize).max(1)
    }

    fn max_area(&self) -> usize {
        (self.max_area_fraction * self.tokens() as f64).floor() as usize
    }

    /// All (rows, cols) rectangle shapes whose area lies within the bounds.
    fn feasible_shapes(&self) -> Vec<(usize, usize)> {
        let (lo, hi) = (self.min_area(), self.max_area());
        (1..=self.height)
            .flat_map(|h| (1..=self.width).map(move |w| (h, w)))
            .filter(|&(h, w)| (lo..=hi).contains(&(h * w)))
            .collect()
    }
}

/// A generated sample: ground truth plus everything the teacher would expose.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub sample_id: u64,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    /// Ground-truth foreground, row-major, values {0, 1}.
    pub gt_mask: Vec<u8>,
    /// `tokens x feature_dim`, row-major.
    pub features: Vec<f64>,
    pub sinks: Vec<usize>,
    pub attention: AttentionRows,
    /// Mean of all attention rows.
    pub roi_map: Vec<f64>,
}

impl SyntheticSample {
    pub fn token_norms(&self) -> Vec<f64> {
        feature_norms(&self.features, self.feature_dim)
    }
}

pub fn feature_norms(features: &[f64], dim: usize) -> Vec<f64> {
    features
        .chunks_exact(dim)
        .map(|f| f.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Plants `cfg.regions` axis-aligned rectangles of foreground tokens.
pub fn plant_region(cfg: &TeacherConfig, rng: &mut RngStream) -> Result<Vec<u8>> {
    cfg.validate()?;
    let shapes = cfg.feasible_shapes();
    let mut mask = vec![0u8; cfg.tokens()];
    for _ in 0..cfg.regions {
        let (h, w) = shapes[rng.below(shapes.len())];
        let r0 = rng.below(cfg.height - h + 1);
        let c0 = rng.below(cfg.width - w + 1);
        for r in r0..r0 + h {
            mask[r * cfg.width + c0..r * cfg.width + c0 + w].fill(1);
        }
    }
    Ok(mask)
}

/// Fixed unit direction along which foreground features are shifted.
fn foreground_direction(dim: usize) -> Vec<f64> {
    let s = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|i| if i % 2 == 0 { s } else { -s }).collect()
}

/// Draws per-token features and marks `cfg.sink_count` high-norm sink tokens.
///
/// Returns `(features, sorted sink indices)`.
pub fn make_features(
    cfg: &TeacherConfig,
    mask: &[u8],
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<usize>)> {
    cfg.validate()?;
    let n = cfg.tokens();
    let d = cfg.feature_dim;
    if mask.len() != n {
        return Err(Error::shape("ground-truth mask", n, mask.len()));
    }
    let dir = foreground_direction(d);
    let mut features: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    for (j, f) in features.chunks_exact_mut(d).enumerate() {
        if mask[j] == 1 {
            f.iter_mut().zip(&dir).for_each(|(x, u)| *x += cfg.feature_shift * u);
        }
    }
    let mut sinks = rng.choose_distinct(n, cfg.sink_count);
    sinks.sort_unstable();
    let base: Vec<Vec<f64>> = sinks
        .iter()
        .map(|&j| features[j * d..(j + 1) * d].to_vec())
        .collect();
    for (&j, b) in sinks.iter().zip(&base) {
        features[j * d..(j + 1) * d]
            .iter_mut()
            .zip(b)
            .for_each(|(x, v)| *x = v * cfg.sink_multiplier);
    }
    if cfg.sink_multiplier >= 4.0 && !sinks.is_empty() {
        // A sink whose base draw happened to be tiny can fall under the
        // largest regular norm; redraw its direction until separation holds.
        let is_sink = sink_flags(n, &sinks);
        let norms = feature_norms(&features, d);
        let max_regular = norms
            .iter()
            .zip(&is_sink)
            .filter(|(_, &s)| !s)
            .map(|(&v, _)| v)
            .fold(0.0, f64::max);
        for &j in &sinks {
            let mut attempts = 0;
            while feature_norms(&features[j * d..(j + 1) * d], d)[0] <= max_regular {
                attempts += 1;
                if attempts > 256 {
                    return Err(Error::Config(format!(
                        "could not separate sink {j} from regular token norms"
                    )));
                }
                for x in &mut features[j * d..(j + 1) * d] {
                    *x = rng.normal() * cfg.sink_multiplier;
                }
            }
        }
    }
    Ok((features, sinks))
}

fn sink_flags(n: usize, sinks: &[usize]) -> Vec<bool> {
    let mut flags = vec![false; n];
    sinks.iter().for_each(|&j| flags[j] = true);
    flags
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// Softmax-normalizes each `tokens`-long logit row.
pub fn attention_from_logits(
    heads: usize,
    responses: usize,
    tokens: usize,
    mut logits: Vec<f64>,
) -> Result<AttentionRows> {
    if logits.len() != heads * responses * tokens {
        return Err(Error::shape(
            "attention logits",
            heads * responses * tokens,
            logits.len(),
        ));
    }
    logits.chunks_exact_mut(tokens).for_each(softmax_in_place);
    AttentionRows::new(heads, responses, tokens, logits)
}

/// Per-(head, response) attention with planted noise, plus the aggregated map.
pub fn make_attention(
    cfg: &TeacherConfig,
    mask: &[u8],
    sinks: &[usize],
    rng: &mut RngStream,
) -> Result<(AttentionRows, Vec<f64>)> {
    let n = cfg.tokens();
    if mask.len() != n {
        return Err(Error::shape("ground-truth mask", n, mask.len()));
    }
    let is_sink = sink_flags(n, sinks);
    // Incomplete activation: a fixed subset of foreground tokens gets no signal.
    let fg: Vec<usize> = (0..n).filter(|&j| mask[j] == 1).collect();
    let n_drop = (cfg.drop_fraction * fg.len() as f64).round() as usize;
    let mut keep = vec![true; n];
    for k in rng.choose_distinct(fg.len(), n_drop.min(fg.len())) {
        keep[fg[k]] = false;
    }
    let base: Vec<f64> = (0..n)
        .map(|j| {
            let fg_signal = if mask[j] == 1 && keep[j] { cfg.signal } else { 0.0 };
            let sink = if is_sink[j] { cfg.sink_boost } else { 0.0 };
            fg_signal + sink
        })
        .collect();
    let (shared_w, fresh_w) = match cfg.noise {
        AttentionNoise::Independent => (0.0, 1.0),
        AttentionNoise::Persistent => (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    };
    let field: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let rows = cfg.heads * cfg.response_tokens;
    let mut logits = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        for j in 0..n {
            let eps = cfg.noise_scale * (shared_w * field[j] + fresh_w * rng.normal());
            logits.push(base[j] + eps);
        }
    }
    let attention = attention_from_logits(cfg.heads, cfg.response_tokens, n, logits)?;
    let roi = pseudo_label::aggregate_attention(&attention)?;
    Ok((attention, roi))
}

/// Generates one sample from the `(cfg.seed, sample_id)` stream.
pub fn generate_sample(cfg: &TeacherConfig, sample_id: u64) -> Result<SyntheticSample> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, sample_id);
    let gt_mask = plant_region(cfg, &mut root.derive(TAG_REGION))?;
    let (features, sinks) = make_features(cfg, &gt_mask, &mut root.derive(TAG_FEATURES))?;
    let (attention, roi_map) = make_attention(cfg, &gt_mask, &sinks, &mut root.derive(TAG_ATTENTION))?;
    Ok(SyntheticSample {
        sample_id,
        height: cfg.height,
        width: cfg.width,
        feature_dim: cfg.feature_dim,
        gt_mask,
        features,
        sinks,
        attention,
        roi_map,
    })
}

pub fn sample_paths(dir: &Path, id: u64) -> [PathBuf; 3] {
    ["attention", "features", "gt"].map(|kind| dir.join(format!("sample_{id:05}_{kind}.grid")))
}

/// Writes `n` samples plus `manifest.json` into `out_dir`.
pub fn generate_dataset(cfg: &TeacherConfig, n: usize, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    generate_dataset_range(cfg, 0..n as u64, out_dir)
}

/// Like [`generate_dataset`] for an explicit id range, so held-out splits
/// never share a sample stream with the training split.
pub fn generate_dataset_range(cfg: &TeacherConfig, ids: Range<u64>, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records: Vec<SampleRecord> = ids
        .into_par_iter()
        .map(|id| -> Result<SampleRecord> {
            let s = generate_sample(cfg, id)?;
            let [attention, features, gt_mask] = sample_paths(out_dir, id);
            let (h, w, d) = (cfg.height, cfg.width, cfg.feature_dim);
            write_grid(&Grid::from_f64(vec![h, w], s.roi_map)?, &attention)?;
            write_grid(&Grid::from_f64(vec![h, w, d], s.features)?, &features)?;
            let gt: Vec<i8> = s.gt_mask.iter().map(|&v| v as i8).collect();
            write_grid(&Grid::from_i8(vec![h, w], gt)?, &gt_mask)?;
            Ok(SampleRecord {
                sample_id: id,
                attention,
                features,
                gt_mask,
                pseudo_label: None,
                target: None,
                turns: cfg.turns,
            })
        })
        .collect::<Result<_>>()?;
    let mut manifest = DatasetManifest::new(cfg.height, cfg.width, cfg.feature_dim, cfg.seed);
    manifest.samples = records;
    manifest.save(out_dir.join("manifest.json"))?;
    let config_path = out_dir.join("teacher.json");
    let text = serde_json::to_string_pretty(cfg).map_err(|source| Error::Json {
        path: config_path.clone(),
        source,
    })?;
    fs::write(&config_path, text + "\n").map_err(|e| Error::io(&config_path, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelativeBin {
    pub lo: f64,
    pub hi: f64,
    pub tokens: usize,
    pub inside_gt: usize,
}

impl RelativeBin {
    pub fn proportion(&self) -> f64 {
        if self.tokens == 0 {
            f64::NAN
        } else {
            self.inside_gt as f64 / self.tokens as f64
        }
    }
}

/// Histogram of tokens by sample-wise relative attention `a / a_max` of the
/// sink-removed map, counting how many fall inside the ground truth.
pub fn relative_attention_profile(
    samples: &[SyntheticSample],
    thresholds: &pseudo_label::LabelThresholds,
    bins: usize,
) -> Result<Vec<RelativeBin>> {
    if bins == 0 {
        return Err(Error::Config("bins must be >= 1".into()));
    }
    let mut out: Vec<RelativeBin> = (0..bins)
        .map(|b| RelativeBin {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            tokens: 0,
            inside_gt: 0,
        })
        .collect();
    for s in samples {
        let (clean, _) = pseudo_label::remove_sink_tokens(&s.roi_map, &s.token_norms(), thresholds.norm)?;
        let a_max = clean.iter().cloned().fold(0.0, f64::max);
        if a_max <= 0.0 {
            continue;
        }
        for (j, &a) in clean.iter().enumerate() {
            let b = (((a / a_max) * bins as f64) as usize).min(bins - 1);
            out[b].tokens += 1;
            out[b].inside_gt += s.gt_mask[j] as usize;
        }
    }
    Ok(out)
}
