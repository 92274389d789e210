//! Stratified k-fold cross-validation: per-fold group networks, inner
//! validation splits, early-stopped training per seed, majority-vote
//! ensembles, metrics and a leakage audit.

mod metrics;

pub use metrics::{
    aggregate_cv, auc_midrank, compute_metrics, mean_std, roc_points, Confusion, CvAggregate,
    MeanStd, MetricSet, MetricValues,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Class, SubjectFeatures};
use crate::model::{AuxMode, FusionNet, ModelConfig};
use crate::nn::{adam_step, softmax, softmax_cross_entropy, AdamState, Ctx, Tensor};
use crate::scn::{build_scn_tensor, CorrelationKind, GroupNetworks};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub n_seeds: usize,
    pub n_folds: usize,
    pub val_fraction: f64,
    pub class_weighting: bool,
    /// z-score the auxiliary vector with fold-training statistics.
    pub standardize_aux: bool,
    pub correlation: CorrelationKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            max_epochs: 50,
            patience: 15,
            batch_size: 4,
            alpha: 0.55,
            n_seeds: 5,
            n_folds: 10,
            val_fraction: 0.1,
            class_weighting: true,
            standardize_aux: true,
            correlation: CorrelationKind::Pearson,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return fail("max_epochs and patience must be positive");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 (batch normalisation)");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1]");
        }
        if self.n_seeds == 0 || self.n_seeds.is_multiple_of(2) {
            return fail("n_seeds must be odd so majority votes cannot tie");
        }
        if self.n_folds < 2 {
            return fail("n_folds must be at least 2");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_aux: bool,
    pub no_ensemble: bool,
}

/// SplitMix64 over `base` and `parts`, for independent derived streams.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Subject → test fold assignment, stratified by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub subject_ids: Vec<String>,
    pub labels: Vec<Class>,
    pub fold_of: Vec<usize>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != fold)
            .collect()
    }
}

fn class_indices(labels: &[Class], of: &[usize], class: Class) -> Vec<usize> {
    of.iter().copied().filter(|&i| labels[i] == class).collect()
}

/// Shuffles each class with a seeded generator and deals it round-robin
/// over the folds; the second class continues where the first stopped so
/// fold sizes differ by at most one.
pub fn make_fold_plan(
    subject_ids: &[String],
    labels: &[Class],
    n_folds: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if subject_ids.len() != labels.len() {
        return Err(Error::Shape("one label per subject required".into()));
    }
    if n_folds < 2 {
        return Err(Error::Config("at least 2 folds required".into()));
    }
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut fold_of = vec![usize::MAX; labels.len()];
    let mut next = 0;
    for class in [Class::Hc, Class::Adhd] {
        let mut members = class_indices(labels, &all, class);
        if members.len() < n_folds {
            return Err(Error::InvalidInput(format!(
                "class {class:?} has {} subjects, fewer than the {n_folds} folds; lower n_folds in the config",
                members.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xf01d, class.index() as u64]));
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % n_folds;
            next += 1;
        }
    }
    Ok(FoldPlan {
        n_folds,
        seed,
        subject_ids: subject_ids.to_vec(),
        labels: labels.to_vec(),
        fold_of,
    })
}

/// Stratified validation split of a fold's training portion, seeded by
/// (master seed, fold, training seed). Returns sorted (train, validation).
pub fn inner_split(
    plan: &FoldPlan,
    fold: usize,
    seed: u64,
    val_fraction: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let portion = plan.train_indices(fold);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, &[0x5a11, fold as u64, seed]));
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [Class::Hc, Class::Adhd] {
        let mut members = class_indices(&plan.labels, &portion, class);
        let n_val = ((members.len() as f64 * val_fraction).round() as usize).max(1);
        if n_val >= members.len() {
            return Err(Error::InvalidInput(format!(
                "fold {fold}: class {class:?} too small for a validation split"
            )));
        }
        members.shuffle(&mut rng);
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Inverse-frequency weights `N / (2 N_c)` over `indices`.
pub fn class_weights(labels: &[Class], indices: &[usize]) -> Result<[f64; 2]> {
    let n_adhd = indices
        .iter()
        .filter(|&&i| labels[i] == Class::Adhd)
        .count();
    let n_hc = indices.len() - n_adhd;
    if n_hc == 0 || n_adhd == 0 {
        return Err(Error::InvalidInput(
            "class weights need both classes in the training portion".into(),
        ));
    }
    let n = indices.len() as f64;
    Ok([n / (2.0 * n_hc as f64), n / (2.0 * n_adhd as f64)])
}

/// Everything fitted at fold level, and the subjects it was fitted on.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldStatistics {
    pub groups: GroupNetworks,
    pub class_weights: Option<[f64; 2]>,
    /// Per-feature (mean, sd) of the auxiliary vector; `None` leaves it raw.
    pub aux_scaling: Option<Vec<(f64, f64)>>,
    pub fitted_on: Vec<String>,
}

pub fn fit_fold_statistics(
    subjects: &[SubjectFeatures],
    training: &[usize],
    config: &TrainConfig,
) -> Result<FoldStatistics> {
    let groups = GroupNetworks::fit(training.iter().map(|&i| &subjects[i]), config.correlation)?;
    let labels: Vec<Class> = subjects.iter().map(|s| s.label).collect();
    let class_weights = if config.class_weighting {
        Some(class_weights(&labels, training)?)
    } else {
        None
    };
    let aux_scaling = config.standardize_aux.then(|| {
        let rows: Vec<Vec<f64>> = training
            .iter()
            .map(|&i| subjects[i].auxiliary_vector())
            .collect();
        let n = rows.len() as f64;
        (0..rows.first().map_or(0, Vec::len))
            .map(|j| {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
            })
            .collect()
    });
    Ok(FoldStatistics {
        groups,
        class_weights,
        aux_scaling,
        fitted_on: training
            .iter()
            .map(|&i| subjects[i].subject_id.clone())
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub n_fitted_on: usize,
    /// Test subjects found among the fitting subjects.
    pub test_ids_in_fit: Vec<String>,
    /// Whether perturbing the test subjects' features changed any fitted
    /// fold-level statistic.
    pub sensitive_to_test: bool,
    pub passed: bool,
}

/// Checks that fold-level statistics never see the test fold: by
/// bookkeeping (subject ids) and by refitting with the test subjects'
/// features scrambled.
pub fn audit_fold(
    subjects: &[SubjectFeatures],
    plan: &FoldPlan,
    fold: usize,
    stats: &FoldStatistics,
    config: &TrainConfig,
) -> Result<FoldAudit> {
    let test = plan.test_indices(fold);
    let test_ids_in_fit: Vec<String> = test
        .iter()
        .map(|&i| &subjects[i].subject_id)
        .filter(|id| stats.fitted_on.contains(id))
        .cloned()
        .collect();
    let mut scrambled = subjects.to_vec();
    for &i in &test {
        let s = &mut scrambled[i];
        for v in s.roi_means.iter_mut().chain(s.roi_iqrs.iter_mut()) {
            *v = 1.0 - *v * 0.5;
        }
        s.label = if s.label == Class::Hc {
            Class::Adhd
        } else {
            Class::Hc
        };
    }
    let refit = fit_fold_statistics(&scrambled, &plan.train_indices(fold), config)?;
    let sensitive_to_test = refit != *stats;
    Ok(FoldAudit {
        fold,
        n_fitted_on: stats.fitted_on.len(),
        passed: test_ids_in_fit.is_empty() && !sensitive_to_test,
        test_ids_in_fit,
        sensitive_to_test,
    })
}

/// Classifier inputs of one subject under one fold's group networks.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scn: Vec<f64>,
    pub aux: Vec<f64>,
    pub label: usize,
}

pub fn build_samples(
    subjects: &[SubjectFeatures],
    stats: &FoldStatistics,
    alpha: f64,
) -> Result<Vec<Sample>> {
    let groups = &stats.groups;
    subjects
        .iter()
        .map(|s| {
            let t = build_scn_tensor(s, &groups.intensity, &groups.heterogeneity, alpha)
                .map_err(|e| Error::InvalidInput(format!("subject {}: {e}", s.subject_id)))?;
            let mut aux = s.auxiliary_vector();
            if let Some(scaling) = &stats.aux_scaling {
                for (v, (m, sd)) in aux.iter_mut().zip(scaling) {
                    *v = (*v - m) / sd;
                }
            }
            Ok(Sample {
                scn: t.data,
                aux,
                label: s.label.index(),
            })
        })
        .collect()
}

fn batch(samples: &[Sample], idx: &[usize], n_rois: usize) -> (Tensor, Tensor, Vec<usize>) {
    let n_aux = samples[idx[0]].aux.len();
    let mut scn = Vec::with_capacity(idx.len() * 2 * n_rois * n_rois);
    let mut aux = Vec::with_capacity(idx.len() * n_aux);
    let mut targets = Vec::with_capacity(idx.len());
    for &i in idx {
        scn.extend_from_slice(&samples[i].scn);
        aux.extend_from_slice(&samples[i].aux);
        targets.push(samples[i].label);
    }
    (
        Tensor::new(vec![idx.len(), 2, n_rois, n_rois], scn),
        Tensor::new(vec![idx.len(), n_aux], aux),
        targets,
    )
}

/// Mini-batches of `size` over `order`; a trailing single sample joins the
/// previous batch because batch normalisation cannot train on one sample.
pub fn make_batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

const EVAL_CHUNK: usize = 16;

/// Eval-mode ADHD probabilities and weighted loss over `idx`.
pub fn evaluate(
    net: &mut FusionNet,
    samples: &[Sample],
    idx: &[usize],
    mode: AuxMode,
    weights: Option<&[f64]>,
) -> Result<(Vec<f64>, f64)> {
    let mut probs = Vec::with_capacity(idx.len());
    let (mut weighted_loss, mut weight_sum) = (0.0, 0.0);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (scn, aux, targets) = batch(samples, chunk, net.config.n_rois);
        let logits = net.forward_logits(&scn, &aux, mode, &mut Ctx::eval())?;
        let out = softmax_cross_entropy(&logits, &targets, weights)?;
        let w: f64 = targets.iter().map(|&t| weights.map_or(1.0, |w| w[t])).sum();
        weighted_loss += out.loss * w;
        weight_sum += w;
        probs.extend(softmax(&logits).data.chunks(2).map(|p| p[1]));
    }
    Ok((probs, weighted_loss / weight_sum))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub history: Vec<EpochLog>,
    /// Model with the best-epoch weights restored.
    pub model: FusionNet,
}

/// What one training run needs besides the samples.
#[derive(Debug, Clone, Copy)]
pub struct RunSpec<'a> {
    pub train: &'a TrainConfig,
    pub model: &'a ModelConfig,
    pub mode: AuxMode,
    pub class_weights: Option<[f64; 2]>,
    /// Initialisation seed.
    pub seed: u64,
    /// Seed of the shuffling / dropout stream.
    pub stream_seed: u64,
}

/// Adam training with early stopping on validation loss; the returned model
/// carries the weights of the best epoch.
pub fn train_one_seed(
    samples: &[Sample],
    train: &[usize],
    val: &[usize],
    spec: RunSpec<'_>,
) -> Result<SeedRun> {
    if train.len() < 2 || val.is_empty() {
        return Err(Error::InvalidInput(
            "training needs at least 2 training and 1 validation subjects".into(),
        ));
    }
    let cfg = spec.train;
    let weights = spec.class_weights;
    let w = weights.as_ref().map(|w| &w[..]);
    let mut net = FusionNet::new(spec.model.clone(), spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.stream_seed);
    let mut adam = AdamState::new(cfg.lr);
    let mut best = (f64::INFINITY, net.state(), 0usize);
    let mut history = Vec::new();
    let mut order = train.to_vec();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for b in make_batches(&order, cfg.batch_size) {
            let (scn, aux, targets) = batch(samples, &b, spec.model.n_rois);
            let mut ctx = Ctx {
                training: true,
                rng: Some(&mut rng),
            };
            let logits = net.forward_logits(&scn, &aux, spec.mode, &mut ctx)?;
            let out = softmax_cross_entropy(&logits, &targets, w)?;
            if !out.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            net.backward(&out.grad);
            let mut params = net.params_mut();
            if params.iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {epoch}"
                )));
            }
            adam_step(&mut params, &mut adam);
            net.zero_grad();
            loss_sum += out.loss * b.len() as f64;
            count += b.len();
        }
        let (_, val_loss) = evaluate(&mut net, samples, val, spec.mode, w)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        history.push(EpochLog {
            epoch,
            train_loss: loss_sum / count as f64,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, net.state(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let epochs_run = history.len();
    net.set_state(&best.1)?;
    Ok(SeedRun {
        seed: spec.seed,
        best_epoch: best.2,
        best_val_loss: best.0,
        epochs_run,
        stopped_early,
        history,
        model: net,
    })
}

/// Majority vote over seeds (rows) and the mean ADHD probability.
pub fn ensemble_vote(preds: &[Vec<usize>], probs: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<f64>)> {
    if preds.is_empty() || preds.len().is_multiple_of(2) {
        return Err(Error::InvalidInput(format!(
            "majority voting needs an odd number of seeds, got {}",
            preds.len()
        )));
    }
    if probs.len() != preds.len() {
        return Err(Error::Shape("one probability row per seed required".into()));
    }
    let m = preds[0].len();
    if preds.iter().any(|r| r.len() != m) || probs.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("seed rows differ in length".into()));
    }
    let k = preds.len();
    let labels = (0..m)
        .map(|j| {
            let votes = preds.iter().filter(|row| row[j] == 1).count();
            usize::from(2 * votes > k)
        })
        .collect();
    let mean = (0..m)
        .map(|j| probs.iter().map(|row| row[j]).sum::<f64>() / k as f64)
        .collect();
    Ok((labels, mean))
}

pub fn hard_label(prob_adhd: f64) -> usize {
    usize::from(prob_adhd >= 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub probs: Vec<f64>,
    pub preds: Vec<usize>,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_subjects: Vec<String>,
    pub test_labels: Vec<usize>,
    pub seeds: Vec<SeedOutcome>,
    pub ensemble_probs: Vec<f64>,
    pub ensemble_preds: Vec<usize>,
    pub metrics: MetricSet,
    pub audit: FoldAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub seeds: Vec<u64>,
    pub plan: FoldPlan,
    pub folds: Vec<FoldReport>,
    pub aggregate: CvAggregate,
    /// Metrics of the pooled out-of-fold ensemble predictions.
    pub pooled: MetricSet,
    /// Fraction of subjects where the majority vote equals the label implied
    /// by the mean probability.
    pub vote_mean_agreement: f64,
    pub audit_passed: bool,
    pub warnings: Vec<String>,
}

impl CvReport {
    /// Fold with the highest ensemble balanced accuracy (lowest index on ties).
    pub fn best_fold(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for f in &self.folds {
            if let Some(v) = f.metrics.values {
                if best.is_none_or(|(_, b)| v.balanced_accuracy > b) {
                    best = Some((f.fold, v.balanced_accuracy));
                }
            }
        }
        best.map(|(f, _)| f)
    }
}

/// Cross-validation inputs shared by all work items.
#[derive(Debug, Clone, Copy)]
pub struct CvSetup<'a> {
    pub train: &'a TrainConfig,
    pub model: &'a ModelConfig,
    pub ablation: Ablation,
    pub master_seed: u64,
}

impl CvSetup<'_> {
    pub fn seeds(&self) -> Vec<u64> {
        let n = if self.ablation.no_ensemble {
            1
        } else {
            self.train.n_seeds as u64
        };
        (0..n).map(|k| self.master_seed.wrapping_add(k)).collect()
    }

    pub fn aux_mode(&self) -> AuxMode {
        if self.ablation.no_aux {
            AuxMode::Disabled
        } else {
            AuxMode::Enabled
        }
    }
}

/// Called with every trained model (fold, seed); used to write checkpoints.
pub type ModelSink<'a> = dyn Fn(usize, &SeedRun) -> Result<()> + Sync + 'a;

/// Runs the full protocol. Folds and seeds run on the current rayon pool;
/// every work item is single-threaded and results are assembled in fold and
/// seed order, so the report does not depend on the pool size.
pub fn run_cv(
    subjects: &[SubjectFeatures],
    setup: CvSetup<'_>,
    sink: &ModelSink<'_>,
) -> Result<CvReport> {
    setup.train.validate()?;
    setup.model.validate()?;
    if let Some(s) = subjects.iter().find(|s| s.n_rois() != setup.model.n_rois) {
        return Err(Error::Shape(format!(
            "subject {} has {} ROIs, model expects {}",
            s.subject_id,
            s.n_rois(),
            setup.model.n_rois
        )));
    }
    let ids: Vec<String> = subjects.iter().map(|s| s.subject_id.clone()).collect();
    let labels: Vec<Class> = subjects.iter().map(|s| s.label).collect();
    let plan = make_fold_plan(&ids, &labels, setup.train.n_folds, setup.master_seed)?;
    let seeds = setup.seeds();

    let folds = (0..plan.n_folds)
        .into_par_iter()
        .map(|fold| run_fold(subjects, &plan, fold, &seeds, setup, sink))
        .collect::<Result<Vec<_>>>()?;

    let mut warnings = Vec::new();
    for f in &folds {
        if f.metrics.values.is_none() {
            warnings.push(format!(
                "fold {}: single-class test fold, metrics undefined",
                f.fold
            ));
        }
    }
    let aggregate = aggregate_cv(&folds.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>())?;
    let (mut all_labels, mut all_preds, mut all_probs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut agree, mut total) = (0usize, 0usize);
    for f in &folds {
        all_labels.extend_from_slice(&f.test_labels);
        all_preds.extend_from_slice(&f.ensemble_preds);
        all_probs.extend_from_slice(&f.ensemble_probs);
        for (p, q) in f.ensemble_preds.iter().zip(&f.ensemble_probs) {
            agree += usize::from(*p == hard_label(*q));
            total += 1;
        }
    }
    let pooled = compute_metrics(&all_labels, &all_preds, &all_probs)?;
    let audit_passed = folds.iter().all(|f| f.audit.passed);
    Ok(CvReport {
        seeds,
        plan,
        folds,
        aggregate,
        pooled,
        vote_mean_agreement: agree as f64 / total as f64,
        audit_passed,
        warnings,
    })
}

fn run_fold(
    subjects: &[SubjectFeatures],
    plan: &FoldPlan,
    fold: usize,
    seeds: &[u64],
    setup: CvSetup<'_>,
    sink: &ModelSink<'_>,
) -> Result<FoldReport> {
    let portion = plan.train_indices(fold);
    let test = plan.test_indices(fold);
    let stats = fit_fold_statistics(subjects, &portion, setup.train)?;
    let audit = audit_fold(subjects, plan, fold, &stats, setup.train)?;
    if !audit.passed {
        return Err(Error::InvalidInput(format!(
            "fold {fold}: leakage audit failed: {audit:?}"
        )));
    }
    let samples = build_samples(subjects, &stats, setup.train.alpha)?;

    let outcomes = seeds
        .par_iter()
        .map(|&seed| {
            let (train, val) = inner_split(plan, fold, seed, setup.train.val_fraction)?;
            let spec = RunSpec {
                train: setup.train,
                model: setup.model,
                mode: setup.aux_mode(),
                class_weights: stats.class_weights,
                seed,
                stream_seed: derive_seed(seed, &[0x7a1e, fold as u64]),
            };
            let mut run = train_one_seed(&samples, &train, &val, spec)?;
            let (probs, _) = evaluate(&mut run.model, &samples, &test, spec.mode, None)?;
            sink(fold, &run)?;
            let preds: Vec<usize> = probs.iter().map(|&p| hard_label(p)).collect();
            let labels: Vec<usize> = test.iter().map(|&i| samples[i].label).collect();
            Ok(SeedOutcome {
                seed,
                best_epoch: run.best_epoch,
                best_val_loss: run.best_val_loss,
                epochs_run: run.epochs_run,
                stopped_early: run.stopped_early,
                metrics: compute_metrics(&labels, &preds, &probs)?,
                probs,
                preds,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let preds: Vec<Vec<usize>> = outcomes.iter().map(|o| o.preds.clone()).collect();
    let probs: Vec<Vec<f64>> = outcomes.iter().map(|o| o.probs.clone()).collect();
    let (ensemble_preds, ensemble_probs) = ensemble_vote(&preds, &probs)?;
    let test_labels: Vec<usize> = test.iter().map(|&i| subjects[i].label.index()).collect();
    let metrics = compute_metrics(&test_labels, &ensemble_preds, &ensemble_probs)?;
    Ok(FoldReport {
        fold,
        test_subjects: test
            .iter()
            .map(|&i| subjects[i].subject_id.clone())
            .collect(),
        test_labels,
        seeds: outcomes,
        ensemble_probs,
        ensemble_preds,
        metrics,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::GlobalStats;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    fn labels(n_hc: usize, n_adhd: usize) -> Vec<Class> {
        let mut v = vec![Class::Hc; n_hc];
        v.extend(vec![Class::Adhd; n_adhd]);
        v
    }

    #[test]
    fn fold_sizes_for_116_and_78() {
        let l = labels(116, 78);
        let plan = make_fold_plan(&ids(194), &l, 10, 42).unwrap();
        for f in 0..10 {
            let test = plan.test_indices(f);
            let hc = test.iter().filter(|&&i| l[i] == Class::Hc).count();
            let adhd = test.len() - hc;
            assert!((19..=20).contains(&test.len()), "fold {f}: {}", test.len());
            assert!(
                (11..=12).contains(&hc) && (7..=8).contains(&adhd),
                "fold {f}: {hc}/{adhd}"
            );
        }
        assert_eq!(plan, make_fold_plan(&ids(194), &l, 10, 42).unwrap());
        assert_ne!(
            plan.fold_of,
            make_fold_plan(&ids(194), &l, 10, 43).unwrap().fold_of
        );
    }

    #[test]
    fn balanced_twenty_gives_one_per_class_per_fold() {
        let l = labels(10, 10);
        let plan = make_fold_plan(&ids(20), &l, 10, 1).unwrap();
        for f in 0..10 {
            let t = plan.test_indices(f);
            assert_eq!(t.len(), 2);
            assert_ne!(l[t[0]], l[t[1]]);
        }
        assert!(make_fold_plan(&ids(19), &labels(10, 9), 10, 1).is_err());
    }

    #[test]
    fn inner_split_is_stratified_and_disjoint() {
        let l = labels(40, 40);
        let plan = make_fold_plan(&ids(80), &l, 10, 7).unwrap();
        let (train, val) = inner_split(&plan, 3, 7, 0.1).unwrap();
        assert_eq!(val.len(), 8);
        assert_eq!(val.iter().filter(|&&i| l[i] == Class::Adhd).count(), 4);
        assert_eq!(train.len() + val.len(), 72);
        assert!(train
            .iter()
            .all(|i| !val.contains(i) && plan.fold_of[*i] != 3));
        assert_eq!(
            inner_split(&plan, 3, 7, 0.1).unwrap(),
            (train.clone(), val.clone())
        );
        assert_ne!(inner_split(&plan, 3, 8, 0.1).unwrap().1, val);
    }

    #[test]
    fn batches_never_end_with_a_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = make_batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(make_batches(&order[..8], 4).len(), 2);
        assert_eq!(make_batches(&order[..1], 4), vec![vec![0]]);
    }

    #[test]
    fn votes_and_means() {
        let preds = vec![vec![1, 1], vec![1, 1], vec![0, 1], vec![0, 1], vec![1, 1]];
        let probs = vec![
            vec![0.6, 0.9],
            vec![0.7, 0.9],
            vec![0.4, 0.9],
            vec![0.3, 0.9],
            vec![0.9, 0.9],
        ];
        let (l, m) = ensemble_vote(&preds, &probs).unwrap();
        assert_eq!(l, vec![1, 1]);
        assert!((m[0] - 0.58).abs() < 1e-12);
        assert!(ensemble_vote(&preds[..4], &probs[..4]).is_err());
    }

    #[test]
    fn class_weights_are_inverse_frequency() {
        let l = labels(6, 2);
        let w = class_weights(&l, &(0..8).collect::<Vec<_>>()).unwrap();
        assert_eq!(w, [8.0 / 12.0, 2.0]);
    }

    fn subject(i: usize, label: Class, n: usize) -> SubjectFeatures {
        let base = |k: usize| 0.3 + 0.4 * (((i * 31 + k * 17) % 23) as f64 / 23.0);
        SubjectFeatures {
            subject_id: format!("s{i:03}"),
            label,
            roi_means: (0..n).map(base).collect(),
            roi_iqrs: (0..n).map(|k| base(k + 5) / 4.0).collect(),
            global_stats: GlobalStats {
                mean: 0.5,
                std: 0.1,
                median: 0.5,
            },
            empty_roi_flags: vec![false; n],
        }
    }

    #[test]
    fn audit_detects_a_leaky_fit() {
        let subjects: Vec<_> = (0..24)
            .map(|i| subject(i, if i % 2 == 0 { Class::Hc } else { Class::Adhd }, 6))
            .collect();
        let cfg = TrainConfig {
            n_folds: 4,
            ..TrainConfig::default()
        };
        let l: Vec<Class> = subjects.iter().map(|s| s.label).collect();
        let plan = make_fold_plan(&ids(24), &l, 4, 3).unwrap();
        let honest = fit_fold_statistics(&subjects, &plan.train_indices(0), &cfg).unwrap();
        assert!(
            audit_fold(&subjects, &plan, 0, &honest, &cfg)
                .unwrap()
                .passed
        );
        let all: Vec<usize> = (0..24).collect();
        let leaky = fit_fold_statistics(&subjects, &all, &cfg).unwrap();
        let audit = audit_fold(&subjects, &plan, 0, &leaky, &cfg).unwrap();
        assert!(!audit.passed);
        assert_eq!(audit.test_ids_in_fit.len(), plan.test_indices(0).len());
    }

    #[test]
    fn training_is_deterministic_and_restores_best_epoch() {
        let n = 8;
        let subjects: Vec<_> = (0..12)
            .map(|i| subject(i, if i % 2 == 0 { Class::Hc } else { Class::Adhd }, n))
            .collect();
        let model = ModelConfig {
            n_rois: n,
            n_aux: n + 3,
            conv_widths: [2, 2, 2],
            scn_fc: [4, 4],
            aux_fc: [4, 2],
            fusion_hidden: 4,
            ..ModelConfig::default()
        };
        let train_cfg = TrainConfig {
            lr: 1e-2,
            max_epochs: 12,
            patience: 3,
            ..TrainConfig::default()
        };
        let all: Vec<usize> = (0..12).collect();
        let stats = fit_fold_statistics(&subjects, &all, &train_cfg).unwrap();
        let samples = build_samples(&subjects, &stats, 0.55).unwrap();
        let spec = RunSpec {
            train: &train_cfg,
            model: &model,
            mode: AuxMode::Enabled,
            class_weights: stats.class_weights,
            seed: 5,
            stream_seed: 6,
        };
        let train: Vec<usize> = (0..9).collect();
        let val: Vec<usize> = (9..12).collect();
        let mut a = train_one_seed(&samples, &train, &val, spec).unwrap();
        let mut b = train_one_seed(&samples, &train, &val, spec).unwrap();
        assert_eq!(a.model.state(), b.model.state());
        assert_eq!(a.history, b.history);
        let best = a
            .history
            .iter()
            .map(|h| h.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val_loss, best);
        assert_eq!(a.history[a.best_epoch - 1].val_loss, best);
        if a.stopped_early {
            assert_eq!(a.epochs_run, a.best_epoch + 3);
        }
        // restored weights reproduce the best validation loss
        let (_, val_loss) = evaluate(
            &mut a.model,
            &samples,
            &val,
            AuxMode::Enabled,
            Some(&stats.class_weights.unwrap()),
        )
        .unwrap();
        assert_eq!(val_loss, best);
        let (pa, _) = evaluate(&mut a.model, &samples, &val, AuxMode::Enabled, None).unwrap();
        let (pb, _) = evaluate(&mut b.model, &samples, &val, AuxMode::Enabled, None).unwrap();
        assert_eq!(pa, pb);
    }
}
