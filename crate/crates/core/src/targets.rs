//! Training targets derived from teacher attention: hard pseudo-labels,
//! Gaussian-smoothed labels, or a dense relative-attention regression map.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_grid, write_grid, Grid};
use crate::manifest::{DatasetManifest, LabelingInfo, SampleRecord, TargetKind};
use crate::postprocess::{gaussian_smooth, GaussianKernel};
use crate::pseudo_label::{assign_labels, remove_sink_tokens, LabelThresholds, PseudoLabelMap, LABEL_FG, LABEL_IGNORE};
use crate::student::loss::{LossKind, TargetMap};
use crate::teacher::feature_norms;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingOptions {
    pub thresholds: LabelThresholds,
    pub sink_removal: bool,
    pub kind: TargetKind,
    /// Kernel width used by [`TargetKind::PreSmoothed`].
    pub smoothing_sigma: f64,
}

impl Default for LabelingOptions {
    fn default() -> Self {
        Self {
            thresholds: LabelThresholds::default(),
            sink_removal: true,
            kind: TargetKind::Labels,
            smoothing_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTarget {
    pub labels: PseudoLabelMap,
    pub target: TargetMap,
    /// Norm threshold that was applied, if sinks were removed.
    pub sink_threshold: Option<f64>,
}

/// Builds the target for one `height x width` teacher map.
pub fn build_target(roi_map: &[f64], norms: &[f64], height: usize, width: usize, opts: &LabelingOptions) -> Result<SampleTarget> {
    opts.thresholds.validate()?;
    let (map, sink_threshold) = if opts.sink_removal {
        let (m, tau) = remove_sink_tokens(roi_map, norms, opts.thresholds.norm)?;
        (m, Some(tau))
    } else {
        (roi_map.to_vec(), None)
    };
    let labels = assign_labels(&map, height, width, &opts.thresholds)?;
    let target = match opts.kind {
        TargetKind::Labels => TargetMap::from_labels(&labels.labels),
        TargetKind::PreSmoothed => {
            let fg: Vec<f64> = labels.labels.iter().map(|&l| f64::from(u8::from(l == LABEL_FG))).collect();
            let soft = gaussian_smooth(&fg, height, width, &GaussianKernel::new(opts.smoothing_sigma))?;
            let values = labels
                .labels
                .iter()
                .zip(soft)
                .map(|(&l, s)| if l == LABEL_IGNORE { -1.0 } else { s.clamp(0.0, 1.0) })
                .collect();
            TargetMap {
                values,
                kind: LossKind::Bce,
            }
        }
        TargetKind::Regression => {
            let a_max = map.iter().cloned().fold(0.0, f64::max);
            let values = if a_max > 0.0 {
                map.iter().map(|&a| a / a_max).collect()
            } else {
                vec![-1.0; map.len()]
            };
            TargetMap {
                values,
                kind: LossKind::Mse,
            }
        }
    };
    Ok(SampleTarget {
        labels,
        target,
        sink_threshold,
    })
}

/// Loads a sample's teacher map and features and builds its target.
pub fn target_for_record(m: &DatasetManifest, rec: &SampleRecord, opts: &LabelingOptions) -> Result<SampleTarget> {
    let (h, w) = (m.grid_height, m.grid_width);
    let attention = read_grid(&rec.attention)?;
    if attention.shape() != [h, w] {
        return Err(Error::shape(
            format!("attention grid {}", rec.attention.display()),
            format!("{:?}", [h, w]),
            format!("{:?}", attention.shape()),
        ));
    }
    let features = read_grid(&rec.features)?;
    let norms = feature_norms(&features.as_f64()?, m.feature_dim);
    build_target(&attention.into_f64()?, &norms, h, w, opts)
}

/// Target stored by [`label_dataset`], if any, as a [`TargetMap`].
pub fn stored_target(m: &DatasetManifest, rec: &SampleRecord) -> Result<Option<TargetMap>> {
    let kind = m.labeling.as_ref().map(|l| l.kind);
    let n = m.grid_height * m.grid_width;
    if let Some(path) = &rec.target {
        let g = read_grid(path)?;
        let values = g.into_f64()?;
        if values.len() != n {
            return Err(Error::shape(format!("target {}", path.display()), n, values.len()));
        }
        let kind = if kind == Some(TargetKind::Regression) {
            LossKind::Mse
        } else {
            LossKind::Bce
        };
        return Ok(Some(TargetMap { values, kind }));
    }
    if let Some(path) = &rec.pseudo_label {
        let g = read_grid(path)?;
        let labels = g.as_i8()?;
        if labels.len() != n {
            return Err(Error::shape(format!("pseudo-label {}", path.display()), n, labels.len()));
        }
        return Ok(Some(TargetMap::from_labels(labels)));
    }
    Ok(None)
}

/// Labels every sample of a dataset, writing `sample_XXXXX_label.grid` (and
/// `_target.grid` for dense targets) to `out_dir` plus an updated manifest.
pub fn label_dataset(m: &DatasetManifest, opts: &LabelingOptions, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = (m.grid_height, m.grid_width);
    let results: Vec<(SampleRecord, bool, bool)> = m
        .samples
        .par_iter()
        .map(|rec| -> Result<_> {
            let t = target_for_record(m, rec, opts)?;
            let label_path = out_dir.join(format!("sample_{:05}_label.grid", rec.sample_id));
            write_grid(&Grid::from_i8(vec![h, w], t.labels.labels.clone())?, &label_path)?;
            let mut out = rec.clone();
            out.pseudo_label = Some(label_path);
            out.target = None;
            if opts.kind != TargetKind::Labels {
                let target_path = out_dir.join(format!("sample_{:05}_target.grid", rec.sample_id));
                write_grid(&Grid::from_f64(vec![h, w], t.target.values)?, &target_path)?;
                out.target = Some(target_path);
            }
            Ok((out, t.labels.degenerate, t.labels.low_information))
        })
        .collect::<Result<_>>()?;
    let mut out = m.clone();
    out.labeling = Some(LabelingInfo {
        kind: opts.kind,
        sink_removal: opts.sink_removal,
        tau_fg: opts.thresholds.fg,
        tau_bg: opts.thresholds.bg,
        degenerate: results.iter().filter(|r| r.1).count(),
        low_information: results.iter().filter(|r| r.2).count(),
    });
    out.samples = results.into_iter().map(|r| r.0).collect();
    out.save(out_dir.join("manifest.json"))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo_label::NormThreshold;

    fn opts(kind: TargetKind) -> LabelingOptions {
        LabelingOptions {
            thresholds: LabelThresholds {
                fg: 0.5,
                bg: 0.1,
                norm: NormThreshold::Absolute(10.0),
            },
            kind,
            ..LabelingOptions::default()
        }
    }

    const MAP: [f64; 9] = [0.0, 0.05, 0.0, 0.05, 1.0, 0.3, 0.0, 0.0, 0.9];
    const NORMS: [f64; 9] = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];

    #[test]
    fn hard_labels_pass_through() {
        let t = build_target(&MAP, &NORMS, 3, 3, &opts(TargetKind::Labels)).unwrap();
        let want: Vec<f64> = t.labels.labels.iter().map(|&l| l as f64).collect();
        assert_eq!(t.target.values, want);
        assert_eq!(t.target.kind, LossKind::Bce);
    }

    #[test]
    fn sinks_are_removed_before_labeling() {
        let mut norms = NORMS;
        norms[4] = 50.0;
        let t = build_target(&MAP, &norms, 3, 3, &opts(TargetKind::Labels)).unwrap();
        assert_eq!(t.sink_threshold, Some(10.0));
        // the 0.9 peak becomes the maximum
        assert_eq!(t.labels.labels[8], LABEL_FG);
        assert_eq!(t.labels.fg_box.unwrap().area(), 1);
        let kept = build_target(&MAP, &norms, 3, 3, &LabelingOptions {
            sink_removal: false,
            ..opts(TargetKind::Labels)
        })
        .unwrap();
        assert_eq!(kept.labels.labels[4], LABEL_FG);
    }

    #[test]
    fn regression_target_is_relative_attention() {
        let t = build_target(&MAP, &NORMS, 3, 3, &opts(TargetKind::Regression)).unwrap();
        assert_eq!(t.target.kind, LossKind::Mse);
        assert_eq!(t.target.values, MAP.to_vec());
    }

    #[test]
    fn smoothed_labels_stay_in_unit_interval() {
        let t = build_target(&MAP, &NORMS, 3, 3, &opts(TargetKind::PreSmoothed)).unwrap();
        for (&v, &l) in t.target.values.iter().zip(&t.labels.labels) {
            if l == LABEL_IGNORE {
                assert_eq!(v, -1.0);
            } else {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        // a foreground token loses mass to its neighbours
        assert!(t.target.values[4] < 1.0);
    }

    #[test]
    fn zero_map_is_degenerate_for_every_kind() {
        for kind in [TargetKind::Labels, TargetKind::PreSmoothed, TargetKind::Regression] {
            let t = build_target(&[0.0; 4], &[1.0; 4], 2, 2, &opts(kind)).unwrap();
            assert!(t.labels.degenerate);
            assert_eq!(t.target.valid_count(), 0);
        }
    }
}
