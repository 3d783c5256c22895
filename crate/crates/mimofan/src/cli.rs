//! Command-line interface.
//!
//! Subcommands: `synth`, `train`, `cv`, `ablate`, `eval`, `predict`,
//! `gradcheck`. Exit codes: 0 success, 1 usage error, 2 runtime/data error,
//! 3 failed verification. Every run prints its resolved configuration
//! before doing any work.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::gradcheck;
use crate::io::checkpoint::load_checkpoint;
use crate::io::manifest::load_manifest;
use crate::io::overlay::render_overlay;
use crate::io::pgm::{read_pgm_image, read_pgm_mask, write_pgm};
use crate::io::synth::synth_dataset;
use crate::loss::ClassWeights;
use crate::network::{predict_case, Arch, NetworkConfig};
use crate::train::{evaluate, run_ablation, run_cv, train_all, kfold_split, TrainRunConfig};

#[derive(Parser)]
#[command(
    name = "mimofan",
    about = "Multi-scale pyramid segmentation: training, evaluation, and verification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset of ellipse images and masks.
    Synth(SynthArgs),
    /// Train one model on every case of a manifest.
    Train(TrainArgs),
    /// K-fold cross-validation with majority-vote ensembling.
    Cv(CvArgs),
    /// Train the six-row architecture ablation matrix with paired t-tests.
    Ablate(CvArgs),
    /// Evaluate a checkpoint against a manifest (Dice CSV).
    Eval(EvalArgs),
    /// Segment a single image with a trained checkpoint.
    Predict(PredictArgs),
    /// Run the finite-difference gradient verification suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of cases to generate.
    #[arg(long, default_value_t = 50)]
    cases: usize,
    /// Image size in pixels (must be divisible by 16).
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory for images, masks, and manifest.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct NetArgs {
    /// Architecture: mimofan, unet, or resunet.
    #[arg(long, default_value = "mimofan")]
    arch: String,
    /// Enable dense cross-scale connections (default on for mimofan).
    #[arg(long, overrides_with = "no_dcc")]
    dcc: bool,
    #[arg(long = "no-dcc", hide_short_help = true)]
    no_dcc: bool,
    /// Enable deep pyramid supervision (default on for mimofan).
    #[arg(long, overrides_with = "no_dps")]
    dps: bool,
    #[arg(long = "no-dps", hide_short_help = true)]
    no_dps: bool,
    /// Enable scale fusing at inference (default on for mimofan).
    #[arg(long, overrides_with = "no_sf")]
    sf: bool,
    #[arg(long = "no-sf", hide_short_help = true)]
    no_sf: bool,
    /// Base filter count F.
    #[arg(long, default_value_t = 16)]
    filters: usize,
    /// Number of pyramid scales.
    #[arg(long, default_value_t = 5)]
    scales: usize,
}

impl NetArgs {
    fn resolve(&self) -> Result<NetworkConfig> {
        let arch: Arch = self.arch.parse()?;
        let toggle = |on: bool, off: bool| !off && (on || true);
        let _ = toggle; // defaults are on; an explicit --no-x wins
        let config = NetworkConfig {
            scales: self.scales,
            base_filters: self.filters,
            classes: 2,
            dcc: !self.no_dcc,
            dps: !self.no_dps,
            sf: !self.no_sf,
            arch,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long = "batch-size", default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Background class weight of the loss.
    #[arg(long = "w-bg", default_value_t = 0.2)]
    w_bg: f64,
    /// Foreground class weight of the loss.
    #[arg(long = "w-fg", default_value_t = 1.2)]
    w_fg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoints, logs, and reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Fold jobs to run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Write the report CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input PGM image.
    #[arg(long)]
    image: PathBuf,
    /// Output PGM mask.
    #[arg(long)]
    out: PathBuf,
    /// Optional overlay PPM; requires --truth.
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// Ground-truth PGM mask for the overlay.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Only run checks whose name contains this substring.
    #[arg(long)]
    op: Option<String>,
}

impl TrainArgs {
    fn run_config(&self) -> Result<TrainRunConfig> {
        Ok(TrainRunConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            lr: self.lr,
            network: self.net.resolve()?,
            weights: ClassWeights {
                background: self.w_bg,
                foreground: self.w_fg,
            },
            manifest: self.manifest.clone(),
            out_dir: self.out.clone(),
        })
    }

    fn print_resolved(&self, config: &TrainRunConfig, extra: &str) {
        println!(
            "config: arch={} dcc={} dps={} sf={} filters={} scales={} epochs={} batch={} lr={} w_bg={} w_fg={} seed={} manifest={} out={}{extra}",
            config.network.arch,
            config.network.dcc,
            config.network.dps,
            config.network.sf,
            config.network.base_filters,
            config.network.scales,
            config.epochs,
            config.batch_size,
            config.lr,
            config.weights.background,
            config.weights.foreground,
            config.seed,
            config.manifest.display(),
            config.out_dir.display()
        );
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<i32> {
    println!(
        "config: synth cases={} size={} seed={} out={}",
        args.cases,
        args.size,
        args.seed,
        args.out.display()
    );
    let manifest = synth_dataset(args.cases, args.size, args.seed, &args.out)?;
    println!(
        "wrote {} cases to {}",
        manifest.rows.len(),
        manifest.path.display()
    );
    Ok(0)
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let config = args.run_config()?;
    args.print_resolved(&config, "");
    let manifest = load_manifest(&args.manifest)?;
    let cases = manifest.load_cases(config.network.required_scales())?;
    let (checkpoint, trace) = train_all(&config, &cases)?;
    let final_loss = trace.last().map(|e| e.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final loss {final_loss:.6}, checkpoint {}",
        trace.len(),
        checkpoint.display()
    );
    Ok(0)
}

fn cmd_cv(args: &CvArgs) -> Result<i32> {
    let config = args.train.run_config()?;
    args.train
        .print_resolved(&config, &format!(" folds={} jobs={}", args.folds, args.jobs));
    let manifest = load_manifest(&args.train.manifest)?;
    let cases = manifest.load_cases(config.network.required_scales())?;
    let plan = kfold_split(
        &cases.iter().map(|c| c.id.clone()).collect::<Vec<_>>(),
        args.folds,
        config.seed,
    )?;
    println!("fold sizes: {:?}", plan.fold_sizes());
    let outcome = run_cv(&config, &cases, args.folds, args.jobs)?;
    for fold in &outcome.folds {
        println!(
            "fold {}: average dice {:.4}, global dice {:.4} ({} cases)",
            fold.fold,
            fold.report.average_dice,
            fold.report.global_dice,
            fold.report.per_case.len()
        );
    }
    println!(
        "ensemble (majority vote over {} models, all cases): average dice {:.4}, global dice {:.4}",
        args.folds, outcome.ensemble.average_dice, outcome.ensemble.global_dice
    );
    let ensemble_csv = config.out_dir.join("ensemble.csv");
    outcome.ensemble.write_csv(&ensemble_csv)?;
    println!("reports under {}", config.out_dir.display());
    Ok(0)
}

fn cmd_ablate(args: &CvArgs) -> Result<i32> {
    let config = args.train.run_config()?;
    args.train
        .print_resolved(&config, &format!(" folds={} jobs={}", args.folds, args.jobs));
    let manifest = load_manifest(&args.train.manifest)?;
    let cases = manifest.load_cases(config.network.required_scales())?;
    let outcome = run_ablation(&config, &cases, args.folds, args.jobs)?;
    for row in &outcome.rows {
        let folds: Vec<String> = row.fold_dice.iter().map(|d| format!("{d:.4}")).collect();
        println!(
            "{:<22} {} mean {:.4} +/- {:.4}",
            row.label,
            folds.join(" "),
            row.mean,
            row.std
        );
    }
    for test in &outcome.t_tests {
        match &test.outcome {
            Ok((t, p)) => println!("t-test {}: t={t:.4} p={p:.6}", test.comparison),
            Err(msg) => println!("t-test {}: degenerate ({msg})", test.comparison),
        }
    }
    println!(
        "table: {} / t-tests: {}",
        outcome.table_csv.display(),
        outcome.t_test_csv.display()
    );
    Ok(0)
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    println!(
        "config: eval checkpoint={} manifest={} out={}",
        args.checkpoint.display(),
        args.manifest.display(),
        args.out
            .as_ref()
            .map_or("<stdout>".to_string(), |p| p.display().to_string())
    );
    let mut params = load_checkpoint(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    let cases = manifest.load_cases(params.config.required_scales())?;
    let refs: Vec<&crate::io::manifest::Case> = cases.iter().collect();
    let report = evaluate(&mut params, &refs, 0)?;
    match &args.out {
        Some(path) => {
            report.write_csv(path)?;
            println!(
                "average dice {:.4}, global dice {:.4}, report {}",
                report.average_dice,
                report.global_dice,
                path.display()
            );
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(0)
}

fn cmd_predict(args: &PredictArgs) -> Result<i32> {
    println!(
        "config: predict checkpoint={} image={} out={}",
        args.checkpoint.display(),
        args.image.display(),
        args.out.display()
    );
    let mut params = load_checkpoint(&args.checkpoint)?;
    let image = read_pgm_image::<f32>(&args.image)?;
    let (_, mask) = predict_case(&mut params, &image)?;
    write_pgm(&mask, &args.out)?;
    println!("mask written to {}", args.out.display());
    if let Some(overlay_path) = &args.overlay {
        let truth_path = args.truth.as_ref().ok_or_else(|| {
            Error::Usage("--overlay requires --truth for the ground-truth mask".into())
        })?;
        let truth = read_pgm_mask::<f32>(truth_path)?;
        render_overlay(&image, &mask, &truth, overlay_path)?;
        println!("overlay written to {}", overlay_path.display());
    }
    Ok(0)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    println!(
        "config: gradcheck op={} seeds={} primitive_tol={:.0e} end_to_end_tol={:.0e}",
        args.op.as_deref().unwrap_or("<all>"),
        gradcheck::SEEDS,
        gradcheck::PRIMITIVE_TOLERANCE,
        gradcheck::END_TO_END_TOLERANCE
    );
    let reports = gradcheck::run(args.op.as_deref());
    if reports.is_empty() {
        return Err(Error::Usage(format!(
            "no gradcheck matches `{}`",
            args.op.as_deref().unwrap_or("")
        )));
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!(
        "gradcheck: {}/{} checks passed",
        reports.len() - failed,
        reports.len()
    );
    if failed > 0 {
        return Err(Error::Verification(format!("{failed} gradient checks failed")));
    }
    Ok(0)
}

/// Parses `argv` and runs the selected command, returning the process exit
/// code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Cv(args) => cmd_cv(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
