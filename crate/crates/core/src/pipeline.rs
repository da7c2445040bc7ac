//! End-to-end stages on disk: predict, post-process, evaluate, and the
//! ablation runner that compares training-target variants.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_grid, write_grid, Grid};
use crate::manifest::{DatasetManifest, SampleRecord, TargetKind};
use crate::postprocess::{iou_masks, roi_from_map, sigmoid, CroppedMask, GaussianKernel, RoIResult, UpscaleMode};
use crate::student::model::StudentModel;
use crate::student::train::{read_json, write_json};
use crate::student::{distill_train, StudentConfig};
use crate::targets::{label_dataset, target_for_record, LabelingOptions};
use crate::teacher::{generate_dataset_range, TeacherConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessOptions {
    /// Gaussian sigma in tokens; 0 disables smoothing.
    pub sigma: f64,
    pub tau: f64,
    pub mode: UpscaleMode,
}

impl Default for PostprocessOptions {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            tau: 0.5,
            mode: UpscaleMode::Mask,
        }
    }
}

impl PostprocessOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("need sigma >= 0 and tau in [0, 1], got {self:?}")));
        }
        Ok(())
    }

    pub fn kernel(&self) -> GaussianKernel {
        GaussianKernel::new(self.sigma)
    }
}

pub fn logits_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("sample_{id:05}_logits.grid"))
}

pub fn roi_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("sample_{id:05}_roi.json"))
}

fn load_features(m: &DatasetManifest, rec: &SampleRecord) -> Result<Array2<f64>> {
    let g = read_grid(&rec.features)?;
    let want = [m.grid_height, m.grid_width, m.feature_dim];
    if g.shape() != want {
        return Err(Error::shape(
            format!("features {}", rec.features.display()),
            format!("{want:?}"),
            format!("{:?}", g.shape()),
        ));
    }
    Array2::from_shape_vec((m.grid_height * m.grid_width, m.feature_dim), g.into_f64()?).map_err(|e| Error::InvalidShape(e.to_string()))
}

fn require_samples(m: &DatasetManifest) -> Result<()> {
    if m.samples.is_empty() {
        return Err(Error::Empty("manifest lists no samples".into()));
    }
    Ok(())
}

/// Writes one `turns x tokens` logits grid per sample.
pub fn predict_dataset(model: &StudentModel, m: &DatasetManifest, out_dir: &Path) -> Result<Vec<PathBuf>> {
    require_samples(m)?;
    if model.dims.feature_dim != m.feature_dim {
        return Err(Error::shape(
            "feature dim (checkpoint vs dataset)",
            model.dims.feature_dim,
            m.feature_dim,
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    m.samples
        .par_iter()
        .map(|rec| {
            let features = load_features(m, rec)?;
            let logits = model.predict(&features.view(), rec.turns)?;
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("logits of sample {}", rec.sample_id)));
            }
            let path = logits_path(out_dir, rec.sample_id);
            let shape = vec![logits.nrows(), logits.ncols()];
            write_grid(&Grid::from_f64(shape, logits.into_raw_vec_and_offset().0)?, &path)?;
            Ok(path)
        })
        .collect()
}

/// Foreground probability per token: the mean over turn rows of
/// `sigmoid(logit)`.
pub fn probabilities_from_logits(g: &Grid, tokens: usize) -> Result<Vec<f64>> {
    if g.ndim() != 2 || g.shape()[1] != tokens || g.shape()[0] == 0 {
        return Err(Error::shape("logits grid", format!("[turns, {tokens}]"), format!("{:?}", g.shape())));
    }
    let rows = g.shape()[0];
    let mut out = vec![0.0; tokens];
    for row in g.as_f64()?.chunks_exact(tokens) {
        out.iter_mut().zip(row).for_each(|(o, &z)| *o += sigmoid(z));
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    Ok(out)
}

fn load_probabilities(m: &DatasetManifest, pred_dir: &Path, id: u64) -> Result<Vec<f64>> {
    let path = logits_path(pred_dir, id);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            reason: "run predict first".into(),
        });
    }
    probabilities_from_logits(&read_grid(&path)?, m.grid_height * m.grid_width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoIRecord {
    pub sample_id: u64,
    #[serde(flatten)]
    pub result: RoIResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<CroppedMask>,
}

/// Writes `sample_XXXXX_roi.json` for every predicted sample.
pub fn postprocess_dataset(m: &DatasetManifest, pred_dir: &Path, opts: &PostprocessOptions, out_dir: &Path) -> Result<Vec<RoIRecord>> {
    require_samples(m)?;
    opts.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let kernel = opts.kernel();
    m.samples
        .par_iter()
        .map(|rec| {
            let probs = load_probabilities(m, pred_dir, rec.sample_id)?;
            let result = roi_from_map(&probs, m.grid_height, m.grid_width, &kernel, opts.tau, opts.mode)?;
            let out = RoIRecord {
                sample_id: rec.sample_id,
                mask: result.cropped_mask.clone(),
                result,
            };
            write_json(&out, &roi_path(out_dir, rec.sample_id))?;
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: u64,
    pub iou_box: f64,
    pub iou_mask: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: String,
    pub samples: Vec<SampleScore>,
    /// Samples left out because their teacher map is degenerate.
    pub degenerate: usize,
    pub mean_box: f64,
    pub mean_mask: f64,
    pub median_box: f64,
    pub median_mask: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl EvalReport {
    pub fn new(arm: impl Into<String>, samples: Vec<SampleScore>, degenerate: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("no non-degenerate samples to evaluate".into()));
        }
        let boxes: Vec<f64> = samples.iter().map(|s| s.iou_box).collect();
        let masks: Vec<f64> = samples.iter().map(|s| s.iou_mask).collect();
        Ok(Self {
            arm: arm.into(),
            degenerate,
            mean_box: mean(&boxes),
            mean_mask: mean(&masks),
            median_box: median(&boxes),
            median_mask: median(&masks),
            samples,
        })
    }

    /// Per-sample rows: `arm,sample_id,iou_box,iou_mask`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["arm", "sample_id", "iou_box", "iou_mask"]).map_err(csv_err)?;
        for s in &self.samples {
            w.write_record([
                self.arm.clone(),
                s.sample_id.to_string(),
                s.iou_box.to_string(),
                s.iou_mask.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Box- and mask-mode IoU of a probability map against a ground-truth mask.
pub fn score_map(probs: &[f64], gt: &[u8], height: usize, width: usize, opts: &PostprocessOptions) -> Result<(f64, f64)> {
    let kernel = opts.kernel();
    let boxes = roi_from_map(probs, height, width, &kernel, opts.tau, UpscaleMode::Box)?;
    let masks = roi_from_map(probs, height, width, &kernel, opts.tau, UpscaleMode::Mask)?;
    Ok((
        iou_masks(&boxes.selected_tokens(height, width), gt)?,
        iou_masks(&masks.selected_tokens(height, width), gt)?,
    ))
}

/// Where the per-token foreground scores of an evaluation come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreSource<'a> {
    /// Student logits written by [`predict_dataset`].
    Predictions(&'a Path),
    /// The teacher's attention map divided by its maximum, untouched.
    RawAttention,
}

fn load_gt(m: &DatasetManifest, rec: &SampleRecord) -> Result<Vec<u8>> {
    let g = read_grid(&rec.gt_mask)?;
    let gt = g.as_i8()?;
    if gt.len() != m.grid_height * m.grid_width {
        return Err(Error::shape("ground-truth mask", m.grid_height * m.grid_width, gt.len()));
    }
    Ok(gt.iter().map(|&v| u8::from(v > 0)).collect())
}

pub fn raw_attention_scores(attention: &[f64]) -> Vec<f64> {
    let a_max = attention.iter().cloned().fold(0.0, f64::max);
    if a_max > 0.0 {
        attention.iter().map(|&a| a / a_max).collect()
    } else {
        vec![0.0; attention.len()]
    }
}

/// Scores every sample of `m`, skipping those whose teacher map is
/// degenerate under `labeling`.
pub fn evaluate(
    arm: &str,
    m: &DatasetManifest,
    source: ScoreSource<'_>,
    opts: &PostprocessOptions,
    labeling: &LabelingOptions,
) -> Result<EvalReport> {
    require_samples(m)?;
    opts.validate()?;
    let (h, w) = (m.grid_height, m.grid_width);
    let rows: Vec<Option<SampleScore>> = m
        .samples
        .par_iter()
        .map(|rec| {
            if target_for_record(m, rec, labeling)?.labels.degenerate {
                return Ok(None);
            }
            let probs = match source {
                ScoreSource::Predictions(dir) => load_probabilities(m, dir, rec.sample_id)?,
                ScoreSource::RawAttention => raw_attention_scores(&read_grid(&rec.attention)?.into_f64()?),
            };
            let (iou_box, iou_mask) = score_map(&probs, &load_gt(m, rec)?, h, w, opts)?;
            Ok(Some(SampleScore {
                sample_id: rec.sample_id,
                iou_box,
                iou_mask,
            }))
        })
        .collect::<Result<_>>()?;
    let degenerate = rows.iter().filter(|r| r.is_none()).count();
    EvalReport::new(arm, rows.into_iter().flatten().collect(), degenerate)
}

/// Foreground precision of pseudo-labels against ground truth, pooled over
/// the dataset. Used to show what sink removal buys.
pub fn label_precision(m: &DatasetManifest, labeling: &LabelingOptions) -> Result<f64> {
    let counts: Vec<(usize, usize)> = m
        .samples
        .par_iter()
        .map(|rec| {
            let labels = target_for_record(m, rec, labeling)?.labels.labels;
            let gt = load_gt(m, rec)?;
            let fg = labels.iter().filter(|&&l| l == 1).count();
            let hit = labels.iter().zip(&gt).filter(|(&l, &g)| l == 1 && g == 1).count();
            Ok((hit, fg))
        })
        .collect::<Result<_>>()?;
    let (hit, fg) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if fg == 0 { 0.0 } else { hit as f64 / fg as f64 })
}

/// Training-target variants compared by the ablation runner, from the raw
/// teacher baseline up to the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Threshold the teacher's attention directly; no student.
    RawAttention,
    /// Student regresses `a / a_max` with MSE; sinks kept.
    MseRegression,
    /// Student trained on {-1, 0, 1} labels; sinks kept.
    LabelAssignment,
    /// Labels after sink removal, smoothing applied to predictions.
    RemoveSink,
    /// Labels after sink removal, smoothed before training instead.
    PreSmoothing,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::RawAttention,
        Arm::MseRegression,
        Arm::LabelAssignment,
        Arm::RemoveSink,
        Arm::PreSmoothing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::RawAttention => "raw_attention",
            Arm::MseRegression => "mse_regression",
            Arm::LabelAssignment => "label_assignment",
            Arm::RemoveSink => "remove_sink",
            Arm::PreSmoothing => "pre_smoothing",
        }
    }

    /// Labeling used to build training targets; `None` for untrained arms.
    pub fn labeling(self, base: &LabelingOptions) -> Option<LabelingOptions> {
        let (kind, sink_removal) = match self {
            Arm::RawAttention => return None,
            Arm::MseRegression => (TargetKind::Regression, false),
            Arm::LabelAssignment => (TargetKind::Labels, false),
            Arm::RemoveSink => (TargetKind::Labels, true),
            Arm::PreSmoothing => (TargetKind::PreSmoothed, true),
        };
        Some(LabelingOptions {
            kind,
            sink_removal,
            ..*base
        })
    }

    /// Post-processing of this arm's score map. Relative-attention scores
    /// (raw or regressed) are cut at the foreground fraction; pre-smoothed
    /// arms skip the second smoothing.
    pub fn postprocess(self, base: &PostprocessOptions, labeling: &LabelingOptions) -> PostprocessOptions {
        match self {
            Arm::RawAttention => PostprocessOptions {
                sigma: 0.0,
                tau: labeling.thresholds.fg,
                ..*base
            },
            Arm::MseRegression => PostprocessOptions {
                tau: labeling.thresholds.fg,
                ..*base
            },
            Arm::LabelAssignment | Arm::RemoveSink => *base,
            Arm::PreSmoothing => PostprocessOptions { sigma: 0.0, ..*base },
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub teacher: TeacherConfig,
    pub train_samples: usize,
    /// Held-out samples, drawn with ids after the training split.
    pub eval_samples: usize,
    pub student: StudentConfig,
    pub post: PostprocessOptions,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            teacher: TeacherConfig::default(),
            train_samples: 256,
            eval_samples: 64,
            student: StudentConfig::default(),
            post: PostprocessOptions::default(),
        }
    }
}

impl BenchmarkConfig {
    /// Every seed-dependent component keyed to `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.teacher.seed = seed;
        out.student.seed = seed;
        out.student.teacher_seed = seed;
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.post.validate()?;
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err(Error::Config("train and eval splits must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub arm: String,
    pub seed: u64,
    pub grid_height: usize,
    pub grid_width: usize,
    pub iou_mask: f64,
    pub iou_box: f64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub degenerate_train: usize,
    pub degenerate_eval: usize,
    pub eval_samples: usize,
}

/// Generates `data/train` and `data/eval` under `dir`.
pub fn prepare_split(bench: &BenchmarkConfig, dir: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    let n = bench.train_samples as u64;
    let train = generate_dataset_range(&bench.teacher, 0..n, dir.join("data").join("train"))?;
    let eval = generate_dataset_range(&bench.teacher, n..n + bench.eval_samples as u64, dir.join("data").join("eval"))?;
    Ok((train, eval))
}

/// Labels, trains and evaluates one arm into `dir/<arm>`, writing
/// `run.json` and `eval.csv` there.
pub fn run_arm(bench: &BenchmarkConfig, arm: Arm, train: &DatasetManifest, eval: &DatasetManifest, dir: &Path) -> Result<RunSummary> {
    let run_dir = dir.join(arm.name());
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let base = bench.student.labeling;
    let post = arm.postprocess(&bench.post, &base);
    let (report, train_info) = match arm.labeling(&base) {
        None => (evaluate(arm.name(), eval, ScoreSource::RawAttention, &post, &base)?, None),
        Some(labeling) => {
            let labeled = label_dataset(train, &labeling, run_dir.join("labels"))?;
            let mut cfg = bench.student.clone();
            cfg.labeling = labeling;
            let ckpt = run_dir.join("checkpoint");
            fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
            let (model, tr) = distill_train(&labeled, &cfg, None, Some(&ckpt))?;
            let pred = run_dir.join("predictions");
            predict_dataset(&model, eval, &pred)?;
            (evaluate(arm.name(), eval, ScoreSource::Predictions(&pred), &post, &base)?, Some(tr))
        }
    };
    report.write_csv(&run_dir.join("eval.csv"))?;
    let summary = RunSummary {
        arm: arm.name().into(),
        seed: bench.teacher.seed,
        grid_height: bench.teacher.height,
        grid_width: bench.teacher.width,
        iou_mask: report.mean_mask,
        iou_box: report.mean_box,
        initial_loss: train_info.as_ref().map(|t| t.initial_loss),
        final_loss: train_info.as_ref().map(|t| t.final_loss),
        degenerate_train: train_info.as_ref().map_or(0, |t| t.skipped_degenerate),
        degenerate_eval: report.degenerate,
        eval_samples: report.samples.len(),
    };
    write_json(&summary, &run_dir.join("run.json"))?;
    Ok(summary)
}

/// Runs every arm for every seed under `out/seed_<s>/`.
pub fn run_ablation(bench: &BenchmarkConfig, arms: &[Arm], seeds: &[u64], out: &Path) -> Result<Vec<RunSummary>> {
    bench.validate()?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let b = bench.seeded(seed);
        let dir = out.join(format!("seed_{seed}"));
        let (train, eval) = prepare_split(&b, &dir)?;
        for &arm in arms {
            rows.push(run_arm(&b, arm, &train, &eval, &dir)?);
        }
    }
    Ok(rows)
}

/// Collects `run.json` files found in `dirs` (each either a run directory
/// or an ancestor of some). Unreadable runs are returned as warnings.
pub fn collect_runs(dirs: &[PathBuf]) -> (Vec<RunSummary>, Vec<String>) {
    let mut found = Vec::new();
    let mut warnings = Vec::new();
    let mut stack: Vec<PathBuf> = dirs.to_vec();
    while let Some(d) = stack.pop() {
        let run = d.join("run.json");
        if run.is_file() {
            found.push(run);
            continue;
        }
        match fs::read_dir(&d) {
            Ok(entries) => stack.extend(entries.flatten().map(|e| e.path()).filter(|p| p.is_dir())),
            Err(e) => warnings.push(format!("skipping {}: {e}", d.display())),
        }
    }
    found.sort();
    let mut rows = Vec::new();
    for path in found {
        match read_json::<RunSummary>(&path) {
            Ok(r) => rows.push(r),
            Err(e) => warnings.push(format!("skipping {}: {e}", path.display())),
        }
    }
    rows.sort_by(|a, b| (a.seed, &a.arm).cmp(&(b.seed, &b.arm)));
    (rows, warnings)
}

pub const REPORT_HEADER: [&str; 10] = [
    "arm",
    "seed",
    "grid_height",
    "grid_width",
    "iou_mask",
    "iou_box",
    "final_loss",
    "degenerate_train",
    "degenerate_eval",
    "eval_samples",
];

pub fn write_report_csv(rows: &[RunSummary], path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.arm.clone(),
            r.seed.to_string(),
            r.grid_height.to_string(),
            r.grid_width.to_string(),
            r.iou_mask.to_string(),
            r.iou_box.to_string(),
            r.final_loss.map(|v| v.to_string()).unwrap_or_default(),
            r.degenerate_train.to_string(),
            r.degenerate_eval.to_string(),
            r.eval_samples.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
