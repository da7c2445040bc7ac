//! Monte Carlo checks of why a learned RoI score beats raw attention.
//!
//! A scalar feature `X ~ N(0, 1)` carries a latent foreground bit
//! `Y ~ Bernoulli(eta(X))`; attention `A` is a noisy view of `Y`. Under the
//! supported noise models `E[A | X]` is affine in `eta(X)`, a bin-mean
//! estimate of it has far lower error than `A` itself, and thresholding it
//! can classify `Y` better than thresholding `A`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::student::train::write_json;

const SHARD: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum NoiseModel {
    /// `P(A=1 | Y=0) = rho0`, `P(A=0 | Y=1) = rho1`.
    Ccn { rho0: f64, rho1: f64 },
    SymmetricCcn { rho: f64 },
    /// `A = clamp(mu_Y + scale * N(0, 1), 0, 1)`.
    Additive { mu0: f64, mu1: f64, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "posterior", rename_all = "snake_case")]
pub enum Posterior {
    /// `eta(x) = 1 / (1 + exp(-slope * x))`.
    Logistic { slope: f64 },
    Constant { value: f64 },
    /// `eta(x) = 1[x > 0]`.
    Step,
}

impl Default for Posterior {
    fn default() -> Self {
        Posterior::Logistic { slope: 2.0 }
    }
}

impl Posterior {
    pub fn eta(&self, x: f64) -> f64 {
        match *self {
            Posterior::Logistic { slope } => 1.0 / (1.0 + (-slope * x).exp()),
            Posterior::Constant { value } => value,
            Posterior::Step => f64::from(u8::from(x > 0.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModelSpec {
    pub noise: NoiseModel,
    pub posterior: Posterior,
}

impl NoiseModelSpec {
    pub fn new(noise: NoiseModel) -> Self {
        Self {
            noise,
            posterior: Posterior::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        match self.noise {
            NoiseModel::Ccn { rho0, rho1 } => {
                if !prob(rho0) || !prob(rho1) || rho0 + rho1 >= 1.0 {
                    return Err(Error::Config(format!(
                        "CCN needs rho0, rho1 in [0, 1] and rho0 + rho1 < 1, got {rho0} + {rho1}"
                    )));
                }
            }
            NoiseModel::SymmetricCcn { rho } => {
                if !(0.0..0.5).contains(&rho) {
                    return Err(Error::Config(format!("symmetric CCN needs rho in [0, 0.5), got {rho}")));
                }
            }
            NoiseModel::Additive { mu0, mu1, scale } => {
                if !(mu1 > mu0) || !prob(mu0) || !prob(mu1) || !(scale >= 0.0) {
                    return Err(Error::Config(format!(
                        "additive model needs 0 <= mu0 < mu1 <= 1 and scale >= 0, got {mu0}, {mu1}, {scale}"
                    )));
                }
            }
        }
        match self.posterior {
            Posterior::Logistic { slope } if !(slope > 0.0) => Err(Error::Config(format!("logistic slope must be > 0, got {slope}"))),
            Posterior::Constant { value } if !prob(value) => Err(Error::Config(format!("constant posterior {value} not in [0, 1]"))),
            _ => Ok(()),
        }
    }

    /// Closed-form `E[A | X]` as a function of `eta`.
    pub fn conditional_mean(&self, eta: f64) -> f64 {
        match self.noise {
            NoiseModel::Ccn { rho0, rho1 } => (1.0 - rho1 - rho0) * eta + rho0,
            NoiseModel::SymmetricCcn { rho } => (1.0 - 2.0 * rho) * eta + rho,
            NoiseModel::Additive { mu0, mu1, .. } => mu0 + (mu1 - mu0) * eta,
        }
    }

    /// `Var(A | X)` before any clamping.
    pub fn conditional_variance(&self, eta: f64) -> f64 {
        match self.noise {
            NoiseModel::Ccn { .. } | NoiseModel::SymmetricCcn { .. } => {
                let p = self.conditional_mean(eta);
                p * (1.0 - p)
            }
            NoiseModel::Additive { mu0, mu1, scale } => (mu1 - mu0).powi(2) * eta * (1.0 - eta) + scale * scale,
        }
    }

    pub fn label(&self) -> String {
        match self.noise {
            NoiseModel::Ccn { rho0, rho1 } => format!("ccn({rho0},{rho1})"),
            NoiseModel::SymmetricCcn { rho } => format!("symccn({rho})"),
            NoiseModel::Additive { mu0, mu1, scale } => format!("additive({mu0},{mu1},{scale})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleTable {
    pub x: Vec<f64>,
    pub y: Vec<u8>,
    pub a: Vec<f64>,
}

impl SampleTable {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Draws `n` samples; shard `i` uses stream `(seed, i)` so the table does
/// not depend on the thread count.
pub fn simulate(spec: &NoiseModelSpec, n: usize, seed: u64) -> Result<SampleTable> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let shards: Vec<SampleTable> = (0..n.div_ceil(SHARD))
        .into_par_iter()
        .map(|i| {
            let len = SHARD.min(n - i * SHARD);
            let mut rng = RngStream::new(seed, i as u64);
            let mut t = SampleTable {
                x: Vec::with_capacity(len),
                y: Vec::with_capacity(len),
                a: Vec::with_capacity(len),
            };
            for _ in 0..len {
                let x = rng.normal();
                let y = rng.bernoulli(spec.posterior.eta(x));
                let a = match spec.noise {
                    NoiseModel::Ccn { rho0, rho1 } => {
                        let flip = rng.bernoulli(if y { rho1 } else { rho0 });
                        f64::from(u8::from(y != flip))
                    }
                    NoiseModel::SymmetricCcn { rho } => f64::from(u8::from(y != rng.bernoulli(rho))),
                    NoiseModel::Additive { mu0, mu1, scale } => {
                        let mu = if y { mu1 } else { mu0 };
                        (mu + scale * rng.normal()).clamp(0.0, 1.0)
                    }
                };
                t.x.push(x);
                t.y.push(u8::from(y));
                t.a.push(a);
            }
            t
        })
        .collect();
    let mut out = SampleTable::default();
    for s in shards {
        out.x.extend(s.x);
        out.y.extend(s.y);
        out.a.extend(s.a);
    }
    Ok(out)
}

/// Sample indices grouped into `bins` equal-count bins of increasing `x`.
fn quantile_bins(x: &[f64], bins: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(i.cmp(&j)));
    let n = order.len();
    (0..bins).map(|b| order[b * n / bins..(b + 1) * n / bins].to_vec()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub count: usize,
    pub mean_a: f64,
    /// Closed form averaged over the bin's samples.
    pub predicted: f64,
    pub gap: f64,
    pub std_err: f64,
    pub within_3se: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityCheck {
    pub rows: Vec<BinRow>,
    /// Bins with fewer than the minimum count.
    pub dropped_bins: Vec<usize>,
    pub fraction_within: f64,
    pub max_abs_gap: f64,
}

pub const MIN_BIN_COUNT: usize = 100;

/// Compares the empirical `E[A | X-bin]` with the closed form.
pub fn conditional_mean_check(t: &SampleTable, spec: &NoiseModelSpec, bins: usize) -> Result<AffinityCheck> {
    if bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    let mut rows = Vec::new();
    let mut dropped_bins = Vec::new();
    for (b, idx) in quantile_bins(&t.x, bins).into_iter().enumerate() {
        if idx.len() < MIN_BIN_COUNT {
            dropped_bins.push(b);
            continue;
        }
        let n = idx.len() as f64;
        let mean_a = idx.iter().map(|&i| t.a[i]).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (t.a[i] - mean_a).powi(2)).sum::<f64>() / (n - 1.0);
        let predicted = idx.iter().map(|&i| spec.conditional_mean(spec.posterior.eta(t.x[i]))).sum::<f64>() / n;
        let std_err = (var / n).sqrt();
        let gap = mean_a - predicted;
        rows.push(BinRow {
            bin: b,
            x_lo: t.x[idx[0]],
            x_hi: t.x[*idx.last().unwrap()],
            count: idx.len(),
            mean_a,
            predicted,
            gap,
            std_err,
            // a zero-variance bin must match exactly
            within_3se: gap.abs() <= 3.0 * std_err + 1e-12,
        });
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!("no bin reached {MIN_BIN_COUNT} samples")));
    }
    let fraction_within = rows.iter().filter(|r| r.within_3se).count() as f64 / rows.len() as f64;
    let max_abs_gap = rows.iter().map(|r| r.gap.abs()).fold(0.0, f64::max);
    Ok(AffinityCheck {
        rows,
        dropped_bins,
        fraction_within,
        max_abs_gap,
    })
}

/// Bin-mean estimate of `E[A | X]` over equal-count bins of `x`, made
/// non-decreasing by pooling adjacent violators.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressogram {
    /// Upper `x` edge of every bin but the last.
    pub edges: Vec<f64>,
    pub values: Vec<f64>,
}

/// Weighted pool-adjacent-violators: the closest non-decreasing sequence.
pub fn isotonic(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // blocks of (mean, weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
            let (m2, w2, l2) = blocks.pop().unwrap();
            let (m1, w1, l1) = blocks.pop().unwrap();
            let w = w1 + w2;
            blocks.push(((m1 * w1 + m2 * w2) / w, w, l1 + l2));
        }
    }
    blocks.into_iter().flat_map(|(m, _, l)| std::iter::repeat_n(m, l)).collect()
}

impl Regressogram {
    pub fn fit(x: &[f64], a: &[f64], bins: usize) -> Result<Self> {
        if x.len() != a.len() || x.is_empty() {
            return Err(Error::shape("regressogram inputs", x.len(), a.len()));
        }
        let groups: Vec<Vec<usize>> = quantile_bins(x, bins.clamp(1, x.len())).into_iter().filter(|g| !g.is_empty()).collect();
        let means: Vec<f64> = groups.iter().map(|g| g.iter().map(|&i| a[i]).sum::<f64>() / g.len() as f64).collect();
        let weights: Vec<f64> = groups.iter().map(|g| g.len() as f64).collect();
        let edges = groups[..groups.len() - 1].iter().map(|g| x[*g.last().unwrap()]).collect();
        Ok(Self {
            edges,
            values: isotonic(&means, &weights),
        })
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.values[self.edges.partition_point(|&e| e < x)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceCheck {
    /// `E[(A - h*(X))^2]`.
    pub mse_raw: f64,
    /// Closed-form `E[Var(A | X)]` evaluated on the sample.
    pub expected_conditional_variance: f64,
    /// `E[(h_hat(X) - h*(X))^2]`.
    pub mse_fitted: f64,
    pub strictly_better: bool,
    /// Noise-free case: `A` is already a function of `X`.
    pub equality_case: bool,
    pub fitted_monotone: bool,
}

pub const EQUALITY_TOL: f64 = 1e-12;

pub fn variance_reduction_check(t: &SampleTable, spec: &NoiseModelSpec, bins: usize) -> Result<(VarianceCheck, Regressogram)> {
    let fit = Regressogram::fit(&t.x, &t.a, bins)?;
    let n = t.len() as f64;
    let (mut raw, mut cond, mut fitted) = (0.0, 0.0, 0.0);
    for i in 0..t.len() {
        let eta = spec.posterior.eta(t.x[i]);
        let h = spec.conditional_mean(eta);
        raw += (t.a[i] - h).powi(2);
        cond += spec.conditional_variance(eta);
        fitted += (fit.predict(t.x[i]) - h).powi(2);
    }
    let (mse_raw, mse_fitted) = (raw / n, fitted / n);
    let equality_case = mse_raw <= EQUALITY_TOL;
    Ok((
        VarianceCheck {
            mse_raw,
            expected_conditional_variance: cond / n,
            mse_fitted,
            strictly_better: mse_fitted < mse_raw,
            equality_case,
            fitted_monotone: fit.values.windows(2).all(|w| w[0] <= w[1]),
        },
        fit,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationCheck {
    /// Best-threshold error of deciding `Y` from `A`.
    pub error_raw: f64,
    pub threshold_raw: f64,
    /// Best-threshold error of deciding `Y` from `h_hat(X)`.
    pub error_fitted: f64,
    pub threshold_fitted: f64,
    /// `E[min(eta, 1 - eta)]` on the sample.
    pub bayes_error: f64,
}

fn best_threshold(scores: &[f64], y: &[u8], grid: &[f64]) -> (f64, f64) {
    grid.iter()
        .map(|&t| {
            let wrong = scores.iter().zip(y).filter(|(&s, &y)| u8::from(s > t) != y).count();
            (wrong as f64 / y.len() as f64, t)
        })
        .fold((f64::INFINITY, 0.0), |best, c| if c.0 < best.0 { c } else { best })
}

pub fn default_threshold_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

pub fn classification_comparison(t: &SampleTable, spec: &NoiseModelSpec, fit: &Regressogram, grid: &[f64]) -> Result<ClassificationCheck> {
    if !matches!(spec.noise, NoiseModel::SymmetricCcn { .. }) {
        return Err(Error::Config("classification comparison needs the symmetric CCN model".into()));
    }
    if grid.is_empty() || t.is_empty() {
        return Err(Error::Empty("threshold grid or sample table".into()));
    }
    let fitted: Vec<f64> = t.x.iter().map(|&x| fit.predict(x)).collect();
    let (error_raw, threshold_raw) = best_threshold(&t.a, &t.y, grid);
    let (error_fitted, threshold_fitted) = best_threshold(&fitted, &t.y, grid);
    let bayes_error = t
        .x
        .iter()
        .map(|&x| {
            let e = spec.posterior.eta(x);
            e.min(1.0 - e)
        })
        .sum::<f64>()
        / t.len() as f64;
    Ok(ClassificationCheck {
        error_raw,
        threshold_raw,
        error_fitted,
        threshold_fitted,
        bayes_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub samples: usize,
    pub seed: u64,
    pub affinity_bins: usize,
    pub fit_bins: usize,
    /// Fraction of bins that must fall within three standard errors.
    pub min_fraction_within: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            seed: 1,
            affinity_bins: 20,
            fit_bins: 50,
            min_fraction_within: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub spec: NoiseModelSpec,
    pub label: String,
    pub samples: usize,
    pub seed: u64,
    pub affinity: AffinityCheck,
    pub variance: VarianceCheck,
    pub classification: Option<ClassificationCheck>,
    /// Share of additive-model draws that hit the [0, 1] clamp.
    pub clamped_fraction: f64,
    pub flags: Vec<String>,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Runs every check for one model and decides pass/fail.
///
/// The classification ordering is only demanded when the flip rate exceeds
/// the Bayes error; below that, `A` is a better guess of `Y` than any
/// function of `X` can be and the comparison is reported but not enforced.
pub fn verify(spec: &NoiseModelSpec, opts: &VerifyOptions) -> Result<MonteCarloReport> {
    let t = simulate(spec, opts.samples, opts.seed)?;
    let affinity = conditional_mean_check(&t, spec, opts.affinity_bins)?;
    let (variance, fit) = variance_reduction_check(&t, spec, opts.fit_bins)?;
    let mut flags = Vec::new();
    let mut failures = Vec::new();
    if affinity.fraction_within < opts.min_fraction_within {
        failures.push(format!(
            "only {:.1}% of bins within 3 standard errors",
            100.0 * affinity.fraction_within
        ));
    }
    if !affinity.dropped_bins.is_empty() {
        flags.push(format!("dropped sparse bins {:?}", affinity.dropped_bins));
    }
    if variance.equality_case {
        flags.push("noise-free: A is a deterministic function of X, MSE ordering holds with equality".into());
    } else if !variance.strictly_better {
        failures.push(format!(
            "fitted MSE {} not below raw MSE {}",
            variance.mse_fitted, variance.mse_raw
        ));
    }
    if !variance.fitted_monotone {
        failures.push("fitted predictor is not monotone".into());
    }
    let classification = match spec.noise {
        NoiseModel::SymmetricCcn { rho } => {
            let c = classification_comparison(&t, spec, &fit, &default_threshold_grid())?;
            if rho > c.bayes_error {
                if c.error_fitted >= c.error_raw {
                    failures.push(format!(
                        "thresholded fit error {} not below raw error {}",
                        c.error_fitted, c.error_raw
                    ));
                }
            } else {
                flags.push(format!(
                    "flip rate {rho} is at most the Bayes error {:.4}; classification ordering not required",
                    c.bayes_error
                ));
            }
            Some(c)
        }
        _ => None,
    };
    let clamped_fraction = match spec.noise {
        NoiseModel::Additive { .. } => t.a.iter().filter(|&&a| a == 0.0 || a == 1.0).count() as f64 / t.len() as f64,
        _ => 0.0,
    };
    Ok(MonteCarloReport {
        spec: *spec,
        label: spec.label(),
        samples: t.len(),
        seed: opts.seed,
        affinity,
        variance,
        classification,
        clamped_fraction,
        passed: failures.is_empty(),
        flags,
        failures,
    })
}

/// Writes `<prefix>_bins.csv` and `<prefix>_summary.json` into `dir`.
pub fn write_report(r: &MonteCarloReport, dir: &Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{prefix}_bins.csv"));
    let csv_err = |source| Error::Csv {
        path: path.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for row in &r.affinity.rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(r, &dir.join(format!("{prefix}_summary.json")))
}
