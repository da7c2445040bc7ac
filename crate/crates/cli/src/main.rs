//! `sdrpn`: generate -> pseudo-label -> train -> predict -> postprocess ->
//! eval, plus the noise-theory check, the ablation runner and reporting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use sdrpn::manifest::{DatasetManifest, TargetKind};
use sdrpn::noise::{self, NoiseModel, NoiseModelSpec, Posterior, VerifyOptions};
use sdrpn::pipeline::{
    collect_runs, evaluate, label_precision, postprocess_dataset, predict_dataset, run_ablation, write_report_csv, Arm,
    BenchmarkConfig, PostprocessOptions, ScoreSource,
};
use sdrpn::postprocess::UpscaleMode;
use sdrpn::pseudo_label::NormThreshold;
use sdrpn::student::{distill_train, load_checkpoint, StudentConfig};
use sdrpn::targets::{label_dataset, LabelingOptions};
use sdrpn::teacher::{generate_dataset, TeacherConfig};
use sdrpn::Error;

#[derive(Parser)]
#[command(name = "sdrpn", version, about = "Self-distilled region proposals on synthetic attention maps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic teacher dataset.
    Gen(GenArgs),
    /// Turn teacher attention into training targets.
    PseudoLabel(LabelArgs),
    /// Fine-tune the student on a labeled manifest.
    Train(TrainArgs),
    /// Write per-sample RoI logits for a dataset.
    Predict(PredictArgs),
    /// Smooth, threshold and upscale predictions into RoIs.
    Postprocess(PostArgs),
    /// Score predictions (or raw attention) against ground truth.
    Eval(EvalArgs),
    /// Monte Carlo check of the noisy-attention theory.
    VerifyTheory(TheoryArgs),
    /// Run the target-variant ablation over several seeds.
    Ablate(AblateArgs),
    /// Merge finished runs into one CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    num: usize,
    /// Square grid side; overrides the config's height and width.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// JSON teacher config; flags win over its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tau_fg: Option<f64>,
    #[arg(long)]
    tau_bg: Option<f64>,
    /// Fixed sink norm threshold instead of mean + 3 std.
    #[arg(long)]
    tau_norm: Option<f64>,
    #[arg(long)]
    no_sink_removal: bool,
    /// Regress relative attention with MSE instead of hard labels.
    #[arg(long, conflicts_with = "pre_smoothing")]
    mse_regression_target: bool,
    /// Smooth labels before training instead of predictions after.
    #[arg(long)]
    pre_smoothing: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory; also receives loss.csv and report.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the frozen backbone.
    #[arg(long)]
    teacher_seed: Option<u64>,
    #[arg(long)]
    frozen: Option<usize>,
    #[arg(long)]
    trainable: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct PostFlags {
    #[arg(long)]
    sigma: Option<f64>,
    /// Threshold on sigmoid probabilities.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Box,
    Mask,
}

#[derive(Args)]
struct PostArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    post: PostFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, required_unless_present = "raw_attention")]
    predictions: Option<PathBuf>,
    /// Score the teacher's attention divided by its maximum.
    #[arg(long, conflicts_with = "predictions")]
    raw_attention: bool,
    #[arg(long, default_value = "student")]
    arm: String,
    /// Per-sample CSV destination.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    post: PostFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Ccn,
    Symccn,
    Additive,
}

#[derive(Clone, Copy, ValueEnum)]
enum PosteriorArg {
    Logistic,
    Step,
    Constant,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long, default_value_t = 0.1)]
    rho0: f64,
    #[arg(long, default_value_t = 0.2)]
    rho1: f64,
    #[arg(long, default_value_t = 0.1)]
    rho: f64,
    #[arg(long, default_value_t = 0.2)]
    mu0: f64,
    #[arg(long, default_value_t = 0.8)]
    mu1: f64,
    #[arg(long, default_value_t = 0.05)]
    scale: f64,
    /// Form of eta(x) = P(Y=1 | X=x), with X standard normal.
    #[arg(long, value_enum, default_value = "logistic")]
    posterior: PosteriorArg,
    /// Slope of the logistic posterior.
    #[arg(long, default_value_t = 2.0)]
    slope: f64,
    /// Value of the constant posterior.
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Directory for the bin CSV and JSON summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Arms to run; all by default.
    #[arg(long, value_delimiter = ',')]
    arms: Vec<String>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// JSON benchmark config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Consolidated CSV destination.
    #[arg(long)]
    out: PathBuf,
    /// Run directories or ancestors of them.
    runs: Vec<PathBuf>,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    // a config that does not parse is a usage problem
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: "manifest not found; run the previous stage first".into(),
        }
        .into());
    }
    Ok(DatasetManifest::load(path)?)
}

fn post_options(f: &PostFlags, arm: Option<Arm>) -> Result<PostprocessOptions> {
    let mut p: PostprocessOptions = load_config(f.config.as_deref())?;
    if let Some(arm) = arm {
        p = arm.postprocess(&p, &LabelingOptions::default());
    }
    if let Some(s) = f.sigma {
        p.sigma = s;
    }
    if let Some(t) = f.tau {
        p.tau = t;
    }
    if let Some(m) = f.mode {
        p.mode = match m {
            ModeArg::Box => UpscaleMode::Box,
            ModeArg::Mask => UpscaleMode::Mask,
        };
    }
    p.validate()?;
    Ok(p)
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg: TeacherConfig = load_config(a.config.as_deref())?;
    if let Some(g) = a.grid {
        cfg.height = g;
        cfg.width = g;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let m = generate_dataset(&cfg, a.num, &a.out)?;
    println!("wrote {} samples to {}", m.samples.len(), a.out.join("manifest.json").display());
    Ok(())
}

fn pseudo_label(a: LabelArgs) -> Result<()> {
    let mut opts: LabelingOptions = load_config(a.config.as_deref())?;
    if let Some(v) = a.tau_fg {
        opts.thresholds.fg = v;
    }
    if let Some(v) = a.tau_bg {
        opts.thresholds.bg = v;
    }
    if let Some(v) = a.tau_norm {
        opts.thresholds.norm = NormThreshold::Absolute(v);
    }
    if a.no_sink_removal {
        opts.sink_removal = false;
    }
    if a.mse_regression_target {
        opts.kind = TargetKind::Regression;
    } else if a.pre_smoothing {
        opts.kind = TargetKind::PreSmoothed;
    }
    opts.thresholds.validate()?;
    let m = load_manifest(&a.manifest)?;
    let out = label_dataset(&m, &opts, &a.out)?;
    let info = out.labeling.as_ref().expect("labeling info is always written");
    println!(
        "labeled {} samples ({} degenerate, {} low-information), foreground precision {:.4}",
        out.samples.len(),
        info.degenerate,
        info.low_information,
        label_precision(&m, &opts)?
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: StudentConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.optim.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.optim.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.optim.peak_lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.teacher_seed {
        cfg.teacher_seed = v;
    }
    if let Some(v) = a.frozen {
        cfg.frozen = v;
    }
    if let Some(v) = a.trainable {
        cfg.trainable = v;
    }
    cfg.validate()?;
    let m = load_manifest(&a.manifest)?;
    if m.labeling.is_none() {
        eprintln!("warning: manifest has no pseudo-labels; deriving targets on the fly");
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (_, r) = distill_train(&m, &cfg, None, Some(&a.out))?;
    println!(
        "trained {} steps on {} samples ({} skipped); loss {:.4} -> {:.4}",
        r.steps, r.samples_used, r.skipped_degenerate, r.initial_loss, r.final_loss
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let m = load_manifest(&a.manifest)?;
    let paths = predict_dataset(&model, &m, &a.out)?;
    println!("wrote {} logit grids to {}", paths.len(), a.out.display());
    Ok(())
}

fn postprocess(a: PostArgs) -> Result<()> {
    let opts = post_options(&a.post, None)?;
    let m = load_manifest(&a.manifest)?;
    require_dir(&a.predictions, "predictions directory not found; run predict first")?;
    let rois = postprocess_dataset(&m, &a.predictions, &opts, &a.out)?;
    let empty = rois.iter().filter(|r| r.result.empty).count();
    println!("wrote {} RoI files ({} empty) to {}", rois.len(), empty, a.out.display());
    Ok(())
}

fn require_dir(path: &Path, reason: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
        .into());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    // raw attention is read at sigma 0 and tau_fg unless overridden
    let opts = post_options(&a.post, a.raw_attention.then_some(Arm::RawAttention))?;
    let m = load_manifest(&a.manifest)?;
    let source = match &a.predictions {
        Some(p) => {
            require_dir(p, "predictions directory not found; run predict first")?;
            ScoreSource::Predictions(p)
        }
        None => ScoreSource::RawAttention,
    };
    let report = evaluate(&a.arm, &m, source, &opts, &LabelingOptions::default())?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    report.write_csv(&a.out)?;
    println!(
        "{}: {} samples ({} degenerate), IoU mask mean {:.4} median {:.4}, box mean {:.4} median {:.4}",
        report.arm,
        report.samples.len(),
        report.degenerate,
        report.mean_mask,
        report.median_mask,
        report.mean_box,
        report.median_box
    );
    Ok(())
}

fn verify_theory(a: TheoryArgs) -> Result<bool> {
    let noise = match a.model {
        ModelArg::Ccn => NoiseModel::Ccn { rho0: a.rho0, rho1: a.rho1 },
        ModelArg::Symccn => NoiseModel::SymmetricCcn { rho: a.rho },
        ModelArg::Additive => NoiseModel::Additive {
            mu0: a.mu0,
            mu1: a.mu1,
            scale: a.scale,
        },
    };
    let spec = NoiseModelSpec {
        noise,
        posterior: match a.posterior {
            PosteriorArg::Logistic => Posterior::Logistic { slope: a.slope },
            PosteriorArg::Step => Posterior::Step,
            PosteriorArg::Constant => Posterior::Constant { value: a.eta },
        },
    };
    spec.validate()?;
    let opts = VerifyOptions {
        samples: a.n,
        seed: a.seed,
        affinity_bins: a.bins,
        ..VerifyOptions::default()
    };
    let r = noise::verify(&spec, &opts)?;
    if let Some(dir) = &a.out {
        noise::write_report(&r, dir, "theory")?;
    }
    println!(
        "{}: {:.1}% of bins within 3 SE (max gap {:.2e}); MSE raw {:.5} vs fitted {:.5}",
        r.label,
        100.0 * r.affinity.fraction_within,
        r.affinity.max_abs_gap,
        r.variance.mse_raw,
        r.variance.mse_fitted
    );
    if let Some(c) = &r.classification {
        println!(
            "classification error raw {:.4} vs fitted {:.4} (Bayes {:.4})",
            c.error_raw, c.error_fitted, c.bayes_error
        );
    }
    for f in &r.flags {
        println!("flag: {f}");
    }
    for f in &r.failures {
        eprintln!("FAIL: {f}");
    }
    println!("{}", if r.passed { "PASS" } else { "FAIL" });
    Ok(r.passed)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut bench: BenchmarkConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.train_samples {
        bench.train_samples = v;
    }
    if let Some(v) = a.eval_samples {
        bench.eval_samples = v;
    }
    if let Some(v) = a.epochs {
        bench.student.optim.epochs = v;
    }
    let arms: Vec<Arm> = if a.arms.is_empty() {
        Arm::ALL.to_vec()
    } else {
        a.arms.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    };
    bench.validate()?;
    let rows = run_ablation(&bench, &arms, &a.seeds, &a.out)?;
    write_report_csv(&rows, &a.out.join("report.csv"))?;
    for r in &rows {
        println!("seed {} {:<17} IoU mask {:.4} box {:.4}", r.seed, r.arm, r.iou_mask, r.iou_box);
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let (rows, warnings) = collect_runs(&a.runs);
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let mut sizes: Vec<(usize, usize)> = rows.iter().map(|r| (r.grid_height, r.grid_width)).collect();
    sizes.sort();
    sizes.dedup();
    if sizes.len() > 1 {
        eprintln!("warning: runs mix grid sizes {sizes:?}; compare rows within a size only");
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_report_csv(&rows, &a.out)?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

/// Validation problems exit with 2, everything else with 1.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::PseudoLabel(a) => pseudo_label(a),
        Cmd::Train(a) => train(a),
        Cmd::Predict(a) => predict(a),
        Cmd::Postprocess(a) => postprocess(a),
        Cmd::Eval(a) => eval(a),
        Cmd::VerifyTheory(a) => match verify_theory(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Cmd::Ablate(a) => ablate(a),
        Cmd::Report(a) => report(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
