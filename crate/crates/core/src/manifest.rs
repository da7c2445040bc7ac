//! JSON dataset manifest tying sample ids to their grid files.
//!
//! Paths are stored relative to the manifest's directory when possible so a
//! dataset directory can be moved as a unit.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::read_grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub attention: PathBuf,
    pub features: PathBuf,
    pub gt_mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<PathBuf>,
    /// Dense training target (f64, ignored tokens hold -1) for the regression
    /// and pre-smoothing arms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    pub turns: usize,
}

/// How the pseudo-label stage produced its targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// {-1, 0, 1} labels trained with masked BCE.
    Labels,
    /// Gaussian-smoothed labels trained with masked BCE on soft targets.
    PreSmoothed,
    /// Relative attention `a / a_max` regressed with MSE.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingInfo {
    pub kind: TargetKind,
    pub sink_removal: bool,
    pub tau_fg: f64,
    pub tau_bg: f64,
    pub degenerate: usize,
    pub low_information: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid_height: usize,
    pub grid_width: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeling: Option<LabelingInfo>,
    pub samples: Vec<SampleRecord>,
}

fn absolutize(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Paths outside `base` are stored absolute; a relative one would otherwise
/// be resolved against the wrong directory on load.
fn relativize(base: &Path, p: &Path) -> PathBuf {
    match p.strip_prefix(base) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()),
    }
}

impl DatasetManifest {
    pub fn new(grid_height: usize, grid_width: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            grid_height,
            grid_width,
            feature_dim,
            seed,
            labeling: None,
            samples: Vec::new(),
        }
    }

    /// Loads a manifest and resolves every path against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.samples {
            s.attention = absolutize(base, &s.attention);
            s.features = absolutize(base, &s.features);
            s.gt_mask = absolutize(base, &s.gt_mask);
            s.pseudo_label = s.pseudo_label.as_deref().map(|p| absolutize(base, p));
            s.target = s.target.as_deref().map(|p| absolutize(base, p));
        }
        Ok(m)
    }

    /// Writes the manifest, storing paths relative to its directory where they
    /// live beneath it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut out = self.clone();
        for s in &mut out.samples {
            s.attention = relativize(base, &s.attention);
            s.features = relativize(base, &s.features);
            s.gt_mask = relativize(base, &s.gt_mask);
            s.pseudo_label = s.pseudo_label.as_deref().map(|p| relativize(base, p));
            s.target = s.target.as_deref().map(|p| relativize(base, p));
        }
        let text = serde_json::to_string_pretty(&out).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Checks id uniqueness and that every referenced file parses as a grid.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.sample_id) {
                return Err(Error::Manifest(format!("duplicate sample id {}", s.sample_id)));
            }
            if s.turns == 0 {
                return Err(Error::Manifest(format!("sample {} has zero turns", s.sample_id)));
            }
            let paths = [Some(&s.attention), Some(&s.features), Some(&s.gt_mask)]
                .into_iter()
                .chain([s.pseudo_label.as_ref(), s.target.as_ref()])
                .flatten();
            for p in paths {
                read_grid(p)?;
            }
        }
        Ok(())
    }
}
