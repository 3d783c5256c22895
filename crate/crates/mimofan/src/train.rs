//! Training loop, cross-validation, ensembling, and the ablation harness.
//!
//! Everything here is deterministic given `(seed, config, data)`: fold
//! assignment, per-epoch shuffling, initialization, and the optimizer all
//! draw from seeded ChaCha streams, and each training job is
//! single-threaded. Fold jobs may run in parallel (`jobs > 1`) without
//! changing any result, since jobs share nothing and aggregation happens in
//! fixed row order.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint};
use crate::io::manifest::Case;
use crate::loss::{dps_loss, ClassWeights};
use crate::metrics::{dice, global_dice, EvalReport};
use crate::network::{
    self, forward_baseline, forward_mimofan, predict_case, Arch, Mode, ModelParams, NetworkConfig,
};
use crate::optim::Adam;
use crate::pyramid::{image_pyramid, label_pyramid, PyramidKind, ScalePyramid};
use crate::stats::paired_t_test;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

// ---------------------------------------------------------------------------
// k-fold planning
// ---------------------------------------------------------------------------

/// Deterministic assignment of case ids to folds: seeded shuffle, then
/// round-robin.
#[derive(Clone, Debug)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

pub fn kfold_split(case_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 1 {
        return Err(Error::Usage("fold count must be >= 1".into()));
    }
    if case_ids.len() < k {
        return Err(Error::Usage(format!(
            "cannot split {} cases into {k} folds",
            case_ids.len()
        )));
    }
    let mut shuffled = case_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let assignments = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % k))
        .collect();
    Ok(FoldPlan { k, seed, assignments })
}

impl FoldPlan {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &fold in self.assignments.values() {
            sizes[fold] += 1;
        }
        sizes
    }

    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.assignments.get(case_id).copied()
    }
}

// ---------------------------------------------------------------------------
// single training runs
// ---------------------------------------------------------------------------

/// Hyper-parameters of one training run.
#[derive(Clone, Debug)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub network: NetworkConfig,
    pub weights: ClassWeights,
    /// Manifest the cases were loaded from (recorded in logs).
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
}

impl TrainRunConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Usage("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Usage("batch_size must be >= 1".into()));
        }
        self.network.validate()?;
        self.weights.validate()
    }
}

#[derive(Clone, Debug)]
pub struct LossEntry {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Result of training one fold: the best-validation checkpoint and its
/// held-out evaluation.
#[derive(Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub report: EvalReport,
    pub checkpoint_path: PathBuf,
    pub loss_trace: Vec<LossEntry>,
    /// Wall-clock training+evaluation time for this fold.
    pub seconds: f64,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xD1B54A32D192ED03)
}

/// Stacks per-case images and masks into `(n,1,h,w)` batch tensors.
fn stack_batch(cases: &[&Case]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = cases[0].image.shape();
    let mut image = Tensor::zeros(Shape::new(cases.len(), 1, s.h, s.w));
    let mut mask = Tensor::zeros(Shape::new(cases.len(), 1, s.h, s.w));
    let plane = s.h * s.w;
    for (i, case) in cases.iter().enumerate() {
        if case.image.shape() != s {
            return Err(Error::Validation(format!(
                "case `{}` has size {}, batch expects {s}; use batch_size 1 for mixed sizes",
                case.id,
                case.image.shape()
            )));
        }
        image.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(case.image.data());
        mask.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(case.mask.data());
    }
    Ok((image, mask))
}

/// One gradient step on a batch; returns the loss value.
fn train_step(
    config: &TrainRunConfig,
    params: &mut ModelParams<f32>,
    adam: &mut Adam,
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
) -> Result<f64> {
    let net = &config.network;
    let mut tape = Tape::new();
    let vars = network::register_params(&mut tape, params);

    let (outputs, labels) = match net.arch {
        Arch::MimoFan => {
            let images = image_pyramid(image, net.scales)?;
            let labels = label_pyramid(mask, net.scales)?;
            let levels = network::register_pyramid(&mut tape, &images);
            let out = forward_mimofan(&mut tape, &vars, params, &levels, net, Mode::Train)?;
            let supervised = if net.dps { net.scales } else { 1 };
            (out.probs[..supervised].to_vec(), labels)
        }
        Arch::UNet | Arch::ResUNet => {
            let labels = label_pyramid(mask, 1)?;
            let image = tape.leaf(image.clone(), false);
            let out = forward_baseline(&mut tape, &vars, params, image, net, Mode::Train)?;
            (out.probs, labels)
        }
    };
    let loss = dps_loss(&mut tape, &outputs, &labels, config.weights)?;
    let loss_value = tape.value(loss).item()? as f64;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss became {loss_value} (arch {}, lr {}); aborting",
            net.arch, config.lr
        )));
    }
    tape.backward(loss)?;
    let grads = network::collect_grads(&tape, &vars, params);
    adam.step(params, &grads)?;
    Ok(loss_value)
}

/// Evaluates a model on a case list; returns the per-case report.
pub fn evaluate(
    params: &mut ModelParams<f32>,
    cases: &[&Case],
    fold_id: usize,
) -> Result<EvalReport> {
    let mut per_case = Vec::with_capacity(cases.len());
    let mut pooled = Vec::with_capacity(cases.len());
    for case in cases {
        let (_, mask) = predict_case(params, &case.image)?;
        per_case.push((case.id.clone(), dice(&mask, &case.mask)?));
        pooled.push((mask, case.mask.clone()));
    }
    let global = global_dice(&pooled)?;
    Ok(EvalReport::new(fold_id, per_case, global))
}

fn write_loss_log(path: &Path, trace: &[LossEntry]) -> Result<()> {
    let mut text = String::from("epoch,step,loss\n");
    for entry in trace {
        text.push_str(&format!("{},{},{:.6}\n", entry.epoch, entry.step, entry.loss));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Core loop shared by fold training and plain training: epochs of shuffled
/// mini-batches with an optional validation set driving best-checkpoint
/// selection.
fn train_loop(
    config: &TrainRunConfig,
    train_cases: &[&Case],
    val_cases: &[&Case],
    fold: usize,
) -> Result<(ModelParams<f32>, Option<EvalReport>, Vec<LossEntry>)> {
    config.validate()?;
    if train_cases.is_empty() {
        return Err(Error::Usage("no training cases".into()));
    }
    let mut params = network::build::<f32>(&config.network, config.seed);
    let mut adam = Adam::new(config.lr);
    let mut trace = Vec::new();
    let mut step = 0usize;
    let mut best: Option<(f64, ModelParams<f32>, EvalReport)> = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, fold as u64, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Case> = chunk.iter().map(|&i| train_cases[i]).collect();
            let (image, mask) = stack_batch(&batch)?;
            let loss = train_step(config, &mut params, &mut adam, &image, &mask)?;
            trace.push(LossEntry { epoch, step, loss });
            step += 1;
        }
        if !val_cases.is_empty() {
            let report = evaluate(&mut params, val_cases, fold)?;
            let improved = best
                .as_ref()
                .map_or(true, |(score, _, _)| report.average_dice > *score);
            if improved {
                best = Some((report.average_dice, params.clone(), report));
            }
        }
    }

    match best {
        Some((_, best_params, report)) => Ok((best_params, Some(report), trace)),
        None => Ok((params, None, trace)),
    }
}

/// Trains on every case outside `fold`, evaluating on the cases inside it.
/// Keeps the checkpoint with the best validation average Dice and writes
/// the per-step loss log and evaluation CSV under
/// `out_dir/fold<fold>/`.
pub fn train_fold(
    config: &TrainRunConfig,
    cases: &[Case],
    plan: &FoldPlan,
    fold: usize,
) -> Result<FoldOutcome> {
    if fold >= plan.k {
        return Err(Error::Usage(format!(
            "fold {fold} out of range for k={}",
            plan.k
        )));
    }
    let train_cases: Vec<&Case> = cases
        .iter()
        .filter(|c| plan.fold_of(&c.id) != Some(fold))
        .collect();
    let val_cases: Vec<&Case> = cases
        .iter()
        .filter(|c| plan.fold_of(&c.id) == Some(fold))
        .collect();
    if val_cases.is_empty() {
        return Err(Error::Usage(format!("fold {fold} holds no cases")));
    }

    let fold_dir = config.out_dir.join(format!("fold{fold}"));
    std::fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;

    let started = std::time::Instant::now();
    let (best_params, report, trace) = train_loop(config, &train_cases, &val_cases, fold)?;
    let seconds = started.elapsed().as_secs_f64();
    let report = report.expect("validation set was nonempty");

    let checkpoint_path = fold_dir.join("best.ckpt");
    save_checkpoint(&best_params, &checkpoint_path)?;
    write_loss_log(&fold_dir.join("loss.csv"), &trace)?;
    report.write_csv(&fold_dir.join("eval.csv"))?;

    Ok(FoldOutcome {
        fold,
        report,
        checkpoint_path,
        loss_trace: trace,
        seconds,
    })
}

/// Trains on every case (no validation split) and saves the final
/// checkpoint under `out_dir`.
pub fn train_all(config: &TrainRunConfig, cases: &[Case]) -> Result<(PathBuf, Vec<LossEntry>)> {
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let refs: Vec<&Case> = cases.iter().collect();
    let (params, _, trace) = train_loop(config, &refs, &[], 0)?;
    let checkpoint_path = config.out_dir.join("model.ckpt");
    save_checkpoint(&params, &checkpoint_path)?;
    write_loss_log(&config.out_dir.join("loss.csv"), &trace)?;
    Ok((checkpoint_path, trace))
}

// ---------------------------------------------------------------------------
// majority voting
// ---------------------------------------------------------------------------

/// Per-voxel majority vote over binary masks. Even ensembles must supply
/// the foreground probability maps so exact ties can be broken by the mean
/// fused probability (>= 0.5 votes foreground).
pub fn majority_vote(
    masks: &[Tensor<f32>],
    fg_probs: Option<&[Tensor<f32>]>,
) -> Result<Tensor<f32>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Usage("majority vote over an empty ensemble".into()))?;
    let shape = first.shape();
    for m in masks {
        if m.shape() != shape {
            return Err(Error::dim(
                "all",
                format!("ensemble masks disagree: {} vs {shape}", m.shape()),
            ));
        }
        if !m.is_binary() {
            return Err(Error::Validation("ensemble masks must be binary".into()));
        }
    }
    let even = masks.len() % 2 == 0;
    if even && fg_probs.is_none() {
        return Err(Error::Usage(
            "even ensembles need probability maps for tie-breaking".into(),
        ));
    }
    if let Some(probs) = fg_probs {
        if probs.len() != masks.len() {
            return Err(Error::Usage(format!(
                "{} probability maps for {} masks",
                probs.len(),
                masks.len()
            )));
        }
    }
    let mut out = Tensor::zeros(shape);
    for i in 0..shape.len() {
        let votes = masks.iter().filter(|m| m.data()[i] == 1.0).count() * 2;
        let fg = if votes > masks.len() {
            true
        } else if votes < masks.len() {
            false
        } else {
            let probs = fg_probs.expect("checked above for even ensembles");
            let mean: f32 =
                probs.iter().map(|p| p.data()[i]).sum::<f32>() / probs.len() as f32;
            mean >= 0.5
        };
        if fg {
            out.data_mut()[i] = 1.0;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// cross-validation and ablation
// ---------------------------------------------------------------------------

/// Runs closures from a queue on `jobs` worker threads, collecting results
/// in submission order.
fn run_jobs<T: Send>(
    jobs: usize,
    tasks: Vec<Box<dyn FnOnce() -> Result<T> + Send>>,
) -> Result<Vec<T>> {
    let n = tasks.len();
    let queue: Mutex<VecDeque<(usize, Box<dyn FnOnce() -> Result<T> + Send>)>> =
        Mutex::new(tasks.into_iter().enumerate().collect());
    let results: Mutex<Vec<Option<Result<T>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    let workers = jobs.max(1).min(n.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let task = queue.lock().expect("queue lock").pop_front();
                let Some((idx, task)) = task else { break };
                let result = task();
                results.lock().expect("results lock")[idx] = Some(result);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Outcome of `cv`: per-fold reports plus the majority-vote ensemble
/// evaluated over every case.
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    pub ensemble: EvalReport,
}

/// Five-fold protocol: trains one model per fold (in parallel when
/// `jobs > 1`), then combines the fold models by per-voxel majority vote
/// and evaluates the ensemble on all cases.
pub fn run_cv(
    config: &TrainRunConfig,
    cases: &[Case],
    k: usize,
    jobs: usize,
) -> Result<CvOutcome> {
    let plan = kfold_split(&case_ids(cases), k, config.seed)?;
    let tasks: Vec<Box<dyn FnOnce() -> Result<FoldOutcome> + Send>> = (0..k)
        .map(|fold| {
            let config = config.clone();
            let plan = plan.clone();
            let cases = cases.to_vec();
            Box::new(move || train_fold(&config, &cases, &plan, fold))
                as Box<dyn FnOnce() -> Result<FoldOutcome> + Send>
        })
        .collect();
    let folds = run_jobs(jobs, tasks)?;

    // ensemble: reload each fold's best checkpoint and vote per case
    let mut models: Vec<ModelParams<f32>> = folds
        .iter()
        .map(|f| load_checkpoint(&f.checkpoint_path))
        .collect::<Result<_>>()?;
    let mut per_case = Vec::with_capacity(cases.len());
    let mut pooled = Vec::with_capacity(cases.len());
    for case in cases {
        let mut masks = Vec::with_capacity(models.len());
        let mut probs = Vec::with_capacity(models.len());
        for model in models.iter_mut() {
            let (prob, mask) = predict_case(model, &case.image)?;
            masks.push(mask);
            // foreground channel only
            let s = prob.shape();
            let mut fg = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
            let plane = s.h * s.w;
            fg.data_mut().copy_from_slice(&prob.data()[plane..2 * plane]);
            probs.push(fg);
        }
        let vote = majority_vote(&masks, Some(&probs))?;
        per_case.push((case.id.clone(), dice(&vote, &case.mask)?));
        pooled.push((vote, case.mask.clone()));
    }
    let ensemble = EvalReport::new(k, per_case, global_dice(&pooled)?);
    Ok(CvOutcome { folds, ensemble })
}

fn case_ids(cases: &[Case]) -> Vec<String> {
    cases.iter().map(|c| c.id.clone()).collect()
}

/// The six architecture rows of the ablation matrix, in fixed order; the
/// last row is the full model.
pub fn ablation_rows(base: &NetworkConfig) -> Vec<NetworkConfig> {
    let mimofan = |dcc: bool, dps: bool, sf: bool| NetworkConfig {
        arch: Arch::MimoFan,
        dcc,
        dps,
        sf,
        ..base.clone()
    };
    vec![
        NetworkConfig { arch: Arch::UNet, dcc: false, dps: false, sf: false, ..base.clone() },
        NetworkConfig { arch: Arch::ResUNet, dcc: false, dps: false, sf: false, ..base.clone() },
        mimofan(true, false, false),
        mimofan(false, true, false),
        mimofan(true, true, false),
        mimofan(true, true, true),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub fold_dice: Vec<f64>,
    pub fold_seconds: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug)]
pub struct TTestRow {
    pub comparison: String,
    /// `(t, p)`, or an explanation when the test is degenerate.
    pub outcome: std::result::Result<(f64, f64), String>,
}

pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub t_tests: Vec<TTestRow>,
    pub table_csv: PathBuf,
    pub t_test_csv: PathBuf,
}

impl AblationOutcome {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() as f64 - 1.0))
        .sqrt()
}

/// Trains the full ablation matrix (six architectures x k folds) and emits
/// the table CSV (`arch,fold1..foldK,mean,std`) plus paired t-tests of the
/// full model against every other row.
pub fn run_ablation(
    base: &TrainRunConfig,
    cases: &[Case],
    k: usize,
    jobs: usize,
) -> Result<AblationOutcome> {
    let plan = kfold_split(&case_ids(cases), k, base.seed)?;
    let rows = ablation_rows(&base.network);
    let labels: Vec<String> = rows.iter().map(|r| r.row_label()).collect();

    let mut tasks: Vec<Box<dyn FnOnce() -> Result<FoldOutcome> + Send>> = Vec::new();
    for row in &rows {
        for fold in 0..k {
            let mut config = base.clone();
            config.network = row.clone();
            config.out_dir = base.out_dir.join(row.row_label());
            let plan = plan.clone();
            let cases = cases.to_vec();
            tasks.push(Box::new(move || train_fold(&config, &cases, &plan, fold)));
        }
    }
    let outcomes = run_jobs(jobs, tasks)?;

    let mut table = Vec::with_capacity(rows.len());
    for (i, label) in labels.iter().enumerate() {
        let fold_dice: Vec<f64> = outcomes[i * k..(i + 1) * k]
            .iter()
            .map(|o| o.report.average_dice)
            .collect();
        let fold_seconds: Vec<f64> = outcomes[i * k..(i + 1) * k]
            .iter()
            .map(|o| o.seconds)
            .collect();
        let mean = fold_dice.iter().sum::<f64>() / fold_dice.len() as f64;
        let std = sample_std(&fold_dice, mean);
        table.push(AblationRow {
            label: label.clone(),
            fold_dice,
            fold_seconds,
            mean,
            std,
        });
    }

    let full = table.last().expect("six rows").clone();
    let mut t_tests = Vec::new();
    for row in &table[..table.len() - 1] {
        let outcome = match paired_t_test(&full.fold_dice, &row.fold_dice) {
            Ok(tp) => Ok(tp),
            Err(Error::DegenerateSample(msg)) => Err(msg),
            Err(e) => return Err(e),
        };
        t_tests.push(TTestRow {
            comparison: format!("{}_vs_{}", full.label, row.label),
            outcome,
        });
    }

    std::fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    let table_csv = base.out_dir.join("ablation.csv");
    let mut text = String::from("arch");
    for fold in 1..=k {
        text.push_str(&format!(",fold{fold}"));
    }
    text.push_str(",mean,std\n");
    for row in &table {
        text.push_str(&row.label);
        for d in &row.fold_dice {
            text.push_str(&format!(",{d:.4}"));
        }
        text.push_str(&format!(",{:.4},{:.4}\n", row.mean, row.std));
    }
    std::fs::write(&table_csv, text).map_err(|e| Error::io(&table_csv, e))?;

    let t_test_csv = base.out_dir.join("t_tests.csv");
    let mut text = String::from("comparison,t,p\n");
    for row in &t_tests {
        match &row.outcome {
            Ok((t, p)) => text.push_str(&format!("{},{t:.4},{p:.6}\n", row.comparison)),
            Err(msg) => text.push_str(&format!("{},degenerate,{msg}\n", row.comparison)),
        }
    }
    std::fs::write(&t_test_csv, text).map_err(|e| Error::io(&t_test_csv, e))?;

    Ok(AblationOutcome {
        rows: table,
        t_tests,
        table_csv,
        t_test_csv,
    })
}

/// Ground-truth pyramid kind check helper used by integration code.
pub fn label_pyramid_for(mask: &Tensor<f32>, scales: usize) -> Result<ScalePyramid<f32>> {
    let pyr = label_pyramid(mask, scales)?;
    debug_assert_eq!(pyr.kind, PyramidKind::Label);
    Ok(pyr)
}
