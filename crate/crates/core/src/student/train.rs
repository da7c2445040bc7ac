//! Distillation loop and checkpoint I/O.
//!
//! Frozen hidden states are computed once per sample; each step runs the
//! trainable blocks for every sample of the batch in parallel and reduces
//! their gradients in sample order, so results do not depend on the number
//! of threads.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{masked_loss_sum, LossKind, TargetMap};
use super::model::{Block, Embedding, ModelDims, StudentGrads, StudentModel, Transformer};
use super::optim::{adamw_step, lr_at_step, TrainingState};
use super::StudentConfig;
use crate::error::{Error, Result};
use crate::grid::{read_grid, write_grid, Grid};
use crate::manifest::DatasetManifest;
use crate::rng::RngStream;
use crate::targets::{stored_target, target_for_record};

const SHUFFLE_STREAM: u64 = 0x5_4FF1E;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub sample_id: u64,
    /// `tokens x feature_dim`.
    pub features: Array2<f64>,
    pub turns: usize,
    pub target: TargetMap,
}

/// Loads features and targets, dropping samples without a single valid
/// token. Returns the kept samples and the number dropped.
pub fn load_training_set(m: &DatasetManifest, cfg: &StudentConfig) -> Result<(Vec<TrainSample>, usize)> {
    let n = m.grid_height * m.grid_width;
    let loaded: Vec<TrainSample> = m
        .samples
        .par_iter()
        .map(|rec| -> Result<TrainSample> {
            let target = match stored_target(m, rec)? {
                Some(t) => t,
                None => target_for_record(m, rec, &cfg.labeling)?.target,
            };
            let g = read_grid(&rec.features)?;
            let want = [m.grid_height, m.grid_width, m.feature_dim];
            if g.shape() != want {
                return Err(Error::shape(
                    format!("features {}", rec.features.display()),
                    format!("{want:?}"),
                    format!("{:?}", g.shape()),
                ));
            }
            let features = Array2::from_shape_vec((n, m.feature_dim), g.into_f64()?).map_err(|e| Error::InvalidShape(e.to_string()))?;
            Ok(TrainSample {
                sample_id: rec.sample_id,
                features,
                turns: rec.turns,
                target,
            })
        })
        .collect::<Result<_>>()?;
    let total = loaded.len();
    let kept: Vec<TrainSample> = loaded.into_iter().filter(|s| s.target.valid_count() > 0).collect();
    let skipped = total - kept.len();
    Ok((kept, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub valid_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub samples_used: usize,
    pub skipped_degenerate: usize,
    pub epochs: usize,
    pub steps: usize,
    pub loss_kind: LossKind,
    pub initial_loss: f64,
    /// Mean step loss over the final epoch.
    pub final_loss: f64,
    pub frozen_hash: String,
    pub history: Vec<LossRecord>,
}

/// Trains a student against the manifest's targets.
///
/// `teacher` defaults to a random backbone drawn from `cfg.teacher_seed`.
/// When `out_dir` is given the checkpoint, `loss.csv` and `report.json` are
/// written there.
pub fn distill_train(
    m: &DatasetManifest,
    cfg: &StudentConfig,
    teacher: Option<&Transformer>,
    out_dir: Option<&Path>,
) -> Result<(StudentModel, TrainReport)> {
    cfg.validate()?;
    let (samples, skipped) = load_training_set(m, cfg)?;
    if samples.is_empty() {
        return Err(Error::Empty(format!(
            "no trainable samples: all {skipped} have every token ignored"
        )));
    }
    let owned;
    let teacher = match teacher {
        Some(t) => t,
        None => {
            owned = Transformer::random(cfg.dims(m.feature_dim), cfg.teacher_seed)?;
            &owned
        }
    };
    if teacher.dims.feature_dim != m.feature_dim {
        return Err(Error::shape("teacher feature dim", m.feature_dim, teacher.dims.feature_dim));
    }
    let mut model = StudentModel::from_teacher(teacher, cfg.frozen, cfg.trainable)?;
    let frozen_hash = model.frozen_hash();

    let frozen_states: Vec<Array2<f64>> = samples
        .par_iter()
        .map(|s| model.frozen_hidden(&s.features.view(), s.turns))
        .collect::<Result<_>>()?;

    let opt = &cfg.optim;
    let steps_per_epoch = samples.len().div_ceil(opt.batch_size);
    let total = steps_per_epoch * opt.epochs;
    let mut state = TrainingState::new(model.trainable_params().iter().map(|(_, p)| p.len()));
    let mut history = Vec::with_capacity(total);
    let shuffler = RngStream::new(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..opt.epochs {
        shuffler.derive(epoch as u64).shuffle(&mut order);
        for batch in order.chunks(opt.batch_size) {
            let parts: Vec<(f64, usize, StudentGrads)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let mut valid = 0;
                    let (sum, grads) = model.loss_and_grads(&frozen_states[i].view(), s.features.nrows(), |logits| {
                        let (sum, v, g) = masked_loss_sum(logits, &s.target)?;
                        valid = v;
                        Ok((sum, g))
                    })?;
                    Ok((sum, valid, grads))
                })
                .collect::<Result<_>>()?;
            let mut iter = parts.into_iter();
            let (mut sum, mut valid, mut grads) = iter.next().expect("non-empty batch");
            for (s, v, g) in iter {
                sum += s;
                valid += v;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / valid as f64);
            let lr = lr_at_step(state.step + 1, total, opt)?;
            let named = grads.params();
            let named: Vec<(String, &[f64])> = model
                .trainable_params()
                .into_iter()
                .zip(named)
                .map(|((n, _), (_, g))| (n, g))
                .collect();
            adamw_step(&mut state, &mut model.trainable_params_mut(), &named, lr, opt)?;
            history.push(LossRecord {
                step: state.step,
                lr,
                loss: sum / valid as f64,
                valid_tokens: valid,
            });
        }
    }

    let tail = &history[history.len() - steps_per_epoch..];
    let report = TrainReport {
        samples_used: samples.len(),
        skipped_degenerate: skipped,
        epochs: opt.epochs,
        steps: total,
        loss_kind: samples[0].target.kind,
        initial_loss: history[0].loss,
        final_loss: tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64,
        frozen_hash,
        history,
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&model, cfg, state.step, dir)?;
        write_loss_csv(&report.history, dir.join("loss.csv"))?;
        write_json(&report, &dir.join("report.json"))?;
    }
    Ok((model, report))
}

pub fn write_loss_csv(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in history {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dims: ModelDims,
    pub frozen: usize,
    pub trainable: usize,
    pub step: usize,
    pub frozen_hash: String,
    pub config: StudentConfig,
}

/// Expected tensor shape of a named parameter.
pub fn param_shape(dims: &ModelDims, name: &str) -> Option<Vec<usize>> {
    let (d, f) = (dims.d_model, dims.hidden());
    let shape = match name {
        "embed.proj.weight" => vec![d, dims.feature_dim],
        "embed.proj.bias" => vec![d],
        "embed.queries" => vec![dims.max_turns, d],
        _ => {
            let (_, local) = name.split_once('.')?;
            match local {
                "ln1.gamma" | "ln1.beta" | "ln2.gamma" | "ln2.beta" | "wq.bias" | "wk.bias" | "wv.bias" | "wo.bias" | "fc2.bias" => vec![d],
                "wq.weight" | "wk.weight" | "wv.weight" | "wo.weight" => vec![d, d],
                "fc1.weight" => vec![f, d],
                "fc1.bias" => vec![f],
                "fc2.weight" => vec![d, f],
                _ => return None,
            }
        }
    };
    Some(shape)
}

fn param_file(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join("params").join(format!("{name}.grid"))
}

/// Writes `meta.json` and one grid per parameter under `params/`.
pub fn save_checkpoint(model: &StudentModel, cfg: &StudentConfig, step: usize, dir: &Path) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    for (name, p) in model.all_params() {
        let shape = param_shape(&model.dims, &name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        write_grid(&Grid::from_f64(shape, p.to_vec())?, param_file(dir, &name))?;
    }
    let meta = CheckpointMeta {
        dims: model.dims,
        frozen: model.frozen,
        trainable: model.trainable,
        step,
        frozen_hash: model.frozen_hash(),
        config: cfg.clone(),
    };
    write_json(&meta, &dir.join("meta.json"))
}

fn skeleton(dims: &ModelDims, blocks: usize) -> (Embedding, Vec<Block>) {
    let embed = Embedding {
        proj: super::layers::Linear::zeros(dims.feature_dim, dims.d_model),
        queries: Array2::zeros((dims.max_turns, dims.d_model)),
    };
    (embed, (0..blocks).map(|_| Block::zeros(dims)).collect())
}

/// Restores a checkpoint written by [`save_checkpoint`], checking every
/// tensor against the dimensions recorded in `meta.json`.
pub fn load_checkpoint(dir: &Path) -> Result<(StudentModel, CheckpointMeta)> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingArtifact {
            path: meta_path,
            reason: "not a student checkpoint directory".into(),
        });
    }
    let meta: CheckpointMeta = read_json(&meta_path)?;
    meta.dims.validate()?;
    let (embed, blocks) = skeleton(&meta.dims, meta.frozen + meta.trainable);
    let mut model = StudentModel {
        dims: meta.dims,
        frozen: meta.frozen,
        trainable: meta.trainable,
        embed,
        blocks,
    };
    let dims = meta.dims;
    for (name, dst) in model.all_params_mut() {
        let path = param_file(dir, &name);
        let g = read_grid(&path)?;
        let want = param_shape(&dims, &name).expect("known parameter");
        if g.shape() != want.as_slice() {
            return Err(Error::shape(
                format!("{name} (checkpoint d_model {})", dims.d_model),
                format!("{want:?}"),
                format!("{:?}", g.shape()),
            ));
        }
        dst.copy_from_slice(g.as_f64()?);
    }
    if model.frozen_hash() != meta.frozen_hash {
        return Err(Error::Manifest(format!(
            "frozen parameters in {} do not match their recorded hash",
            dir.display()
        )));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_cover_every_parameter() {
        let dims = ModelDims {
            feature_dim: 5,
            d_model: 8,
            heads: 2,
            mlp_ratio: 2,
            depth: 3,
            max_turns: 2,
        };
        let t = Transformer::random(dims, 1).unwrap();
        let m = StudentModel::from_teacher(&t, 1, 2).unwrap();
        for (name, p) in m.all_params() {
            let shape = param_shape(&dims, &name).unwrap_or_else(|| panic!("{name}"));
            assert_eq!(shape.iter().product::<usize>(), p.len(), "{name}");
        }
        assert!(param_shape(&dims, "block1.nope").is_none());
    }
}
