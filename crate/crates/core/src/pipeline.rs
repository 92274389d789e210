//! Run configuration and the file-based stages `synth`, `extract`, `train`,
//! `explain` and `report`.
//!
//! Stages only communicate through files in the output directory. Each
//! output records the hash of the configuration sections its stage depends
//! on, and every stage refuses inputs whose recorded hash differs from the
//! one the current configuration implies.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{
    build_samples, fit_fold_statistics, roc_points, run_cv, Ablation, CvReport, CvSetup, EpochLog,
    MetricValues, SeedRun, TrainConfig,
};
use crate::features::Descriptor;
use crate::features::{
    extract_subject, read_features_csv, write_features_csv, Class, FeatureMatrix, SubjectFeatures,
};
use crate::interpret::{
    group_indices, hit_rate, kruskal_wallis, roi_importance_csv, roi_stat_tests, select_biomarkers,
    stats_report_csv, subject_roi_scores, CamPopulation, GroupTest, KruskalWallis, RoiImportance,
    StatReport, ADHD_TARGET,
};
use crate::model::{FusionNet, ModelConfig};
use crate::nifti::{
    read_nifti_file, read_roi_table_file, resample_labels_nn, AtlasParcellation, RoiEntry,
};
use crate::preprocess::{normalize_robust, NormalizationParams};
use crate::synth::{generate_cohort, write_cohort, CohortSpec};

pub const FEATURES_FILE: &str = "features.csv";
pub const CV_SUMMARY_FILE: &str = "cv_summary.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const ROC_FILE: &str = "roc_points.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const HISTORY_FILE: &str = "training_history.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const ROI_IMPORTANCE_FILE: &str = "roi_importance.csv";
pub const STATS_FILE: &str = "stats_report.csv";
pub const BIOMARKERS_FILE: &str = "biomarkers.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding `<subject_id>.nii.gz` (or `.nii`).
    pub data_dir: PathBuf,
    pub atlas: PathBuf,
    pub roi_table: PathBuf,
    pub labels: PathBuf,
    /// `label_id<TAB>network` grouping for the network-level test.
    pub networks: Option<PathBuf>,
    /// Synthetic ground truth, for the planted-ROI hit rate.
    pub ground_truth: Option<PathBuf>,
    /// Features CSV read by `train`; defaults to the one in the output dir.
    pub features: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "subjects".into(),
            atlas: "atlas.nii.gz".into(),
            roi_table: "atlas_rois.tsv".into(),
            labels: "labels.csv".into(),
            networks: None,
            ground_truth: None,
            features: None,
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkValues {
    /// Averaged Grad-CAM importance per ROI.
    #[default]
    Importance,
    /// |Cohen's d| of the group test per ROI.
    AbsCohensD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    pub population: CamPopulation,
    pub test: GroupTest,
    pub descriptor: Descriptor,
    pub network_values: NetworkValues,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        InterpretConfig {
            population: CamPopulation::AllTest,
            test: GroupTest::Welch,
            descriptor: Descriptor::Mean,
            network_values: NetworkValues::Importance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub synth: CohortSpec,
    pub normalization: NormalizationParams,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub interpret: InterpretConfig,
    pub ablation: Ablation,
    pub master_seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.normalization.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        if self.model.n_aux != self.model.n_rois + 3 {
            return Err(Error::Config(format!(
                "model.n_aux must be n_rois + 3 = {}, got {}",
                self.model.n_rois + 3,
                self.model.n_aux
            )));
        }
        Ok(())
    }

    /// The configuration as echoed into outputs: everything except the
    /// output directory, so relocated runs stay byte-identical.
    pub fn provenance(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(p) = v.get_mut("paths").and_then(Value::as_object_mut) {
            p.remove("output_dir");
        }
        v
    }

    pub fn config_sha256(&self) -> String {
        sha256_hex(self.provenance().to_string().as_bytes())
    }

    pub fn stage_sha256(&self, stage: Stage) -> String {
        let p = &self.paths;
        let v = match stage {
            Stage::Synth => json!({"stage": "synth", "synth": self.synth}),
            Stage::Extract => json!({
                "stage": "extract",
                "inputs": [p.data_dir, p.atlas, p.roi_table, p.labels],
                "normalization": self.normalization,
            }),
            Stage::Train => json!({
                "stage": "train",
                "extract": self.stage_sha256(Stage::Extract),
                "train": self.train,
                "model": self.model,
                "ablation": self.ablation,
                "master_seed": self.master_seed,
            }),
            Stage::Explain => json!({
                "stage": "explain",
                "train": self.stage_sha256(Stage::Train),
                "interpret": self.interpret,
                "networks": p.networks,
                "ground_truth": p.ground_truth,
            }),
        };
        sha256_hex(v.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Extract,
    Train,
    Explain,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Extract => "extract",
            Stage::Train => "train",
            Stage::Explain => "explain",
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Command-line overrides applied on top of the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub no_aux: bool,
    pub no_ensemble: bool,
    pub output_dir: Option<PathBuf>,
}

/// A validated configuration with its paths resolved.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    /// Relative input paths are resolved against this directory.
    pub base_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Run {
    pub fn new(mut config: RunConfig, base_dir: &Path, overrides: &Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            config.master_seed = seed;
            config.synth.seed = seed;
        }
        config.ablation.no_aux |= overrides.no_aux;
        config.ablation.no_ensemble |= overrides.no_ensemble;
        config.validate()?;
        let output_dir = match &overrides.output_dir {
            Some(o) => o.clone(),
            None => base_dir.join(&config.paths.output_dir),
        };
        Ok(Run {
            config,
            base_dir: base_dir.to_path_buf(),
            output_dir,
        })
    }

    /// Reads the configuration file; a missing path means all defaults
    /// relative to the working directory.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let config = RunConfig::from_json(&text).map_err(|e| e.in_file(p))?;
                let base = p
                    .parent()
                    .filter(|d| !d.as_os_str().is_empty())
                    .unwrap_or(Path::new("."));
                Self::new(config, base, overrides)
            }
            None => Self::new(RunConfig::default(), Path::new("."), overrides),
        }
    }

    pub fn input(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn features_path(&self) -> PathBuf {
        self.config
            .paths
            .features
            .as_ref()
            .map_or_else(|| self.out(FEATURES_FILE), |p| self.input(p))
    }

    fn preamble(&self, stage: Stage) -> Vec<String> {
        vec![
            format!("stage={}", stage.name()),
            format!("config_sha256={}", self.config.stage_sha256(stage)),
            format!("config={}", self.config.provenance()),
        ]
    }

    fn ensure_output_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.output_dir)
            .map_err(|e| Error::from(e).in_file(&self.output_dir))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::from(e).in_file(path))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))
}

fn preamble_value<'a>(preamble: &'a [String], key: &str) -> Option<&'a str> {
    preamble
        .iter()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
}

fn check_hash(found: Option<&str>, expected: &str, what: &Path) -> Result<()> {
    match found {
        Some(h) if h == expected => Ok(()),
        Some(h) => Err(Error::ArtifactMismatch(format!(
            "{} was produced under config {h}, current config implies {expected}",
            what.display()
        ))),
        None => Err(Error::ArtifactMismatch(format!(
            "{} records no config hash",
            what.display()
        ))),
    }
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub n_subjects: usize,
    pub planted_rois: Vec<usize>,
    pub output_dir: PathBuf,
}

pub fn synth(run: &Run) -> Result<SynthSummary> {
    run.ensure_output_dir()?;
    let cohort = generate_cohort(&run.config.synth)?;
    write_cohort(
        &cohort,
        &run.output_dir,
        Some(&run.config.stage_sha256(Stage::Synth)),
    )?;
    Ok(SynthSummary {
        n_subjects: cohort.subjects.len(),
        planted_rois: cohort.truth.planted_rois.clone(),
        output_dir: run.output_dir.clone(),
    })
}

// -------------------------------------------------------------- extract

/// `subject_id,label` rows; `#` lines and a header row are skipped.
pub fn read_labels_csv(text: &str) -> Result<Vec<(String, Class)>> {
    let mut out: Vec<(String, Class)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r').trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let (Some(id), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::InvalidInput(format!(
                "labels line {}: expected two fields",
                lineno + 1
            )));
        };
        if id == "subject_id" && out.is_empty() {
            continue;
        }
        let class = label
            .parse::<usize>()
            .map_err(|_| {
                Error::InvalidInput(format!("labels line {}: bad label {label:?}", lineno + 1))
            })
            .and_then(Class::from_index)?;
        if id.is_empty() || out.iter().any(|(o, _)| o == id) {
            return Err(Error::InvalidInput(format!(
                "labels line {}: empty or repeated id {id:?}",
                lineno + 1
            )));
        }
        out.push((id.to_string(), class));
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("labels file lists no subjects".into()));
    }
    Ok(out)
}

fn subject_volume_path(dir: &Path, id: &str) -> PathBuf {
    let gz = dir.join(format!("{id}.nii.gz"));
    if gz.exists() {
        gz
    } else {
        dir.join(format!("{id}.nii"))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractSummary {
    pub n_subjects: usize,
    pub n_rois: usize,
    pub degenerate_mad: Vec<String>,
    pub empty_roi_subjects: Vec<String>,
    pub resampled_atlas: Vec<String>,
}

pub fn load_atlas(run: &Run) -> Result<AtlasParcellation> {
    let p = &run.config.paths;
    let table_path = run.input(&p.roi_table);
    let table = read_roi_table_file(&table_path, Some(run.config.model.n_rois))?;
    let atlas_path = run.input(&p.atlas);
    let (_, volume) = read_nifti_file(&atlas_path)?;
    AtlasParcellation::from_volume(&volume, table).map_err(|e| e.in_file(atlas_path))
}

pub fn extract(run: &Run) -> Result<ExtractSummary> {
    run.ensure_output_dir()?;
    let p = &run.config.paths;
    let atlas = load_atlas(run)?;
    let labels_path = run.input(&p.labels);
    let labels = read_labels_csv(&read_text(&labels_path)?).map_err(|e| e.in_file(&labels_path))?;
    let data_dir = run.input(&p.data_dir);
    let params = run.config.normalization;

    let per_subject = labels
        .par_iter()
        .map(|(id, label)| {
            let path = subject_volume_path(&data_dir, id);
            let (_, volume) = read_nifti_file(&path)?;
            let same_grid = volume.shape == atlas.shape && volume.affine == atlas.affine;
            let resampled;
            let parcel = if same_grid {
                &atlas
            } else {
                resampled = resample_labels_nn(&atlas, &volume).map_err(|e| e.in_file(&path))?;
                &resampled
            };
            let norm = normalize_robust(&volume, &params).map_err(|e| e.in_file(&path))?;
            let f = extract_subject(id, *label, &norm.volume, &norm.mask, parcel)
                .map_err(|e| e.in_file(&path))?;
            Ok((f, norm.degenerate_mad, !same_grid))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut summary = ExtractSummary {
        n_subjects: per_subject.len(),
        n_rois: atlas.n_rois(),
        degenerate_mad: Vec::new(),
        empty_roi_subjects: Vec::new(),
        resampled_atlas: Vec::new(),
    };
    let mut subjects = Vec::with_capacity(per_subject.len());
    for (f, degenerate, resampled) in per_subject {
        if degenerate {
            summary.degenerate_mad.push(f.subject_id.clone());
        }
        if f.empty_roi_flags.iter().any(|&e| e) {
            summary.empty_roi_subjects.push(f.subject_id.clone());
        }
        if resampled {
            summary.resampled_atlas.push(f.subject_id.clone());
        }
        subjects.push(f);
    }
    let csv = write_features_csv(&subjects, &run.preamble(Stage::Extract))?;
    write_file(&run.out(FEATURES_FILE), csv)?;
    Ok(summary)
}

/// Reads the features file `train` and `explain` use and checks that it was
/// extracted under the current configuration. Returns the subjects and the
/// file's SHA-256.
pub fn load_features(run: &Run) -> Result<(Vec<SubjectFeatures>, String)> {
    let path = run.features_path();
    let bytes = std::fs::read(&path).map_err(|e| Error::from(e).in_file(&path))?;
    let (subjects, preamble) = read_features_csv(&bytes[..]).map_err(|e| e.in_file(&path))?;
    check_hash(
        preamble_value(&preamble, "config_sha256"),
        &run.config.stage_sha256(Stage::Extract),
        &path,
    )?;
    Ok((subjects, sha256_hex(&bytes)))
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub stage: String,
    pub config_sha256: String,
    pub config: Value,
    pub features_sha256: String,
    pub aux_mode: String,
    pub best_fold: Option<usize>,
    pub report: CvReport,
}

fn checkpoint_stem(run: &Run, fold: usize, seed: u64) -> PathBuf {
    run.out(CHECKPOINT_DIR)
        .join(format!("fold{fold:02}_seed{seed}"))
}

pub fn train(run: &Run) -> Result<CvSummary> {
    run.ensure_output_dir()?;
    let (subjects, features_sha256) = load_features(run)?;
    let ckpt_dir = run.out(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::from(e).in_file(&ckpt_dir))?;
    let config_sha256 = run.config.stage_sha256(Stage::Train);
    let setup = CvSetup {
        train: &run.config.train,
        model: &run.config.model,
        ablation: run.config.ablation,
        master_seed: run.config.master_seed,
    };
    let histories: Mutex<Vec<(usize, u64, Vec<EpochLog>)>> = Mutex::new(Vec::new());
    let sink = |fold: usize, r: &SeedRun| -> Result<()> {
        let meta = json!({
            "fold": fold,
            "seed": r.seed,
            "best_epoch": r.best_epoch,
            "best_val_loss": r.best_val_loss,
            "aux_mode": setup.aux_mode(),
            "config_sha256": config_sha256,
            "features_sha256": features_sha256,
        });
        r.model.save(&checkpoint_stem(run, fold, r.seed), meta)?;
        histories
            .lock()
            .expect("history lock")
            .push((fold, r.seed, r.history.clone()));
        Ok(())
    };
    let report = run_cv(&subjects, setup, &sink)?;

    let summary = CvSummary {
        stage: "train".into(),
        config_sha256: config_sha256.clone(),
        config: run.config.provenance(),
        features_sha256,
        aux_mode: format!("{:?}", setup.aux_mode()).to_lowercase(),
        best_fold: report.best_fold(),
        report,
    };
    write_file(
        &run.out(CV_SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    let preamble = run.preamble(Stage::Train);
    write_file(
        &run.out(PREDICTIONS_FILE),
        predictions_csv(&summary.report, &preamble),
    )?;
    write_file(&run.out(ROC_FILE), roc_csv(&summary.report, &preamble)?)?;
    write_file(
        &run.out(CONFUSION_FILE),
        confusion_csv(&summary.report, &preamble),
    )?;
    let mut h = histories.into_inner().expect("history lock");
    h.sort_by_key(|(f, s, _)| (*f, *s));
    write_file(&run.out(HISTORY_FILE), history_csv(&h, &preamble))?;
    Ok(summary)
}

fn with_preamble(preamble: &[String]) -> String {
    let mut out = String::new();
    for l in preamble {
        let _ = writeln!(out, "# {l}");
    }
    out
}

pub fn predictions_csv(report: &CvReport, preamble: &[String]) -> String {
    let mut out = with_preamble(preamble);
    out.push_str("fold,subject_id,label");
    for s in &report.seeds {
        let _ = write!(out, ",prob_seed{s}");
    }
    out.push_str(",ensemble_prob,ensemble_pred\n");
    for f in &report.folds {
        for (k, id) in f.test_subjects.iter().enumerate() {
            let _ = write!(out, "{},{id},{}", f.fold, f.test_labels[k]);
            for s in &f.seeds {
                let _ = write!(out, ",{}", s.probs[k]);
            }
            let _ = writeln!(out, ",{},{}", f.ensemble_probs[k], f.ensemble_preds[k]);
        }
    }
    out
}

fn pooled_scores(report: &CvReport) -> (Vec<usize>, Vec<f64>) {
    let labels = report
        .folds
        .iter()
        .flat_map(|f| f.test_labels.iter().copied())
        .collect();
    let probs = report
        .folds
        .iter()
        .flat_map(|f| f.ensemble_probs.iter().copied())
        .collect();
    (labels, probs)
}

pub fn roc_csv(report: &CvReport, preamble: &[String]) -> Result<String> {
    let (labels, probs) = pooled_scores(report);
    let mut out = with_preamble(preamble);
    out.push_str("fpr,tpr\n");
    for (fpr, tpr) in roc_points(&labels, &probs)? {
        let _ = writeln!(out, "{fpr},{tpr}");
    }
    Ok(out)
}

pub fn confusion_csv(report: &CvReport, preamble: &[String]) -> String {
    let c = &report.pooled.confusion;
    let mut out = with_preamble(preamble);
    out.push_str("true_label,pred_hc,pred_adhd\n");
    let _ = writeln!(out, "hc,{},{}", c.tn, c.fp);
    let _ = writeln!(out, "adhd,{},{}", c.fn_, c.tp);
    out
}

fn history_csv(h: &[(usize, u64, Vec<EpochLog>)], preamble: &[String]) -> String {
    let mut out = with_preamble(preamble);
    out.push_str("fold,seed,epoch,train_loss,val_loss\n");
    for (fold, seed, logs) in h {
        for l in logs {
            let _ = writeln!(
                out,
                "{fold},{seed},{},{},{}",
                l.epoch, l.train_loss, l.val_loss
            );
        }
    }
    out
}

pub fn load_cv_summary(run: &Run) -> Result<CvSummary> {
    let path = run.out(CV_SUMMARY_FILE);
    let summary: CvSummary =
        serde_json::from_str(&read_text(&path)?).map_err(|e| Error::from(e).in_file(&path))?;
    check_hash(
        Some(&summary.config_sha256),
        &run.config.stage_sha256(Stage::Train),
        &path,
    )?;
    Ok(summary)
}

// -------------------------------------------------------------- explain

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedRoi {
    pub roi_index: usize,
    pub label_id: i32,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Biomarkers {
    pub stage: String,
    pub config_sha256: String,
    pub train_config_sha256: String,
    pub config: Value,
    pub best_fold: usize,
    pub population: CamPopulation,
    pub subjects: Vec<String>,
    pub n_models: usize,
    pub conventions: Value,
    pub importance: RoiImportance,
    pub selected: Vec<SelectedRoi>,
    pub planted_rois: Option<Vec<usize>>,
    pub hit_rate: Option<f64>,
    pub stats: StatReport,
    pub network_levels: Vec<String>,
}

fn read_networks(path: &Path, table: &[RoiEntry]) -> Result<Vec<String>> {
    let text = read_text(path)?;
    let mut by_label = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let id = parts.next().unwrap_or("").trim();
        let net = parts.next().map(str::trim).unwrap_or("");
        match id.parse::<i32>() {
            Ok(l) if !net.is_empty() => {
                by_label.insert(l, net.to_string());
            }
            Err(_) if lineno == 0 => {}
            _ => {
                return Err(
                    Error::InvalidInput(format!("networks line {}: malformed", lineno + 1))
                        .in_file(path),
                )
            }
        }
    }
    table
        .iter()
        .map(|e| {
            by_label.get(&e.label_id).cloned().ok_or_else(|| {
                Error::InvalidInput(format!("no network for ROI label {}", e.label_id))
                    .in_file(path)
            })
        })
        .collect()
}

pub fn explain(run: &Run) -> Result<Biomarkers> {
    let cv = load_cv_summary(run)?;
    let (subjects, features_sha256) = load_features(run)?;
    if features_sha256 != cv.features_sha256 {
        return Err(Error::ArtifactMismatch(format!(
            "{} changed since training (sha256 {features_sha256}, trained on {})",
            run.features_path().display(),
            cv.features_sha256
        )));
    }
    let cfg = &run.config;
    let report = &cv.report;
    let best = cv.best_fold.ok_or_else(|| {
        Error::InvalidInput("no fold has defined metrics; nothing to explain".into())
    })?;
    let fold = &report.folds[best];

    let stats = fit_fold_statistics(&subjects, &report.plan.train_indices(best), &cfg.train)?;
    let samples = build_samples(&subjects, &stats, cfg.train.alpha)?;
    let train_hash = cfg.stage_sha256(Stage::Train);
    let models = report
        .seeds
        .iter()
        .map(|&seed| {
            let stem = checkpoint_stem(run, best, seed);
            let (blob, manifest) = crate::nn::checkpoint::load(&stem)?;
            let recorded = manifest.meta["run"]["config_sha256"].as_str();
            check_hash(recorded, &train_hash, &stem.with_extension("json"))?;
            FusionNet::from_checkpoint(&blob, &manifest)
                .map_err(|e| e.in_file(stem.with_extension("json")))
        })
        .collect::<Result<Vec<_>>>()?;

    let test = report.plan.test_indices(best);
    let population: Vec<usize> = match cfg.interpret.population {
        CamPopulation::AllTest => test.clone(),
        CamPopulation::CorrectAdhd => test
            .iter()
            .zip(&fold.ensemble_preds)
            .filter(|(&i, &p)| subjects[i].label == Class::Adhd && p == 1)
            .map(|(&i, _)| i)
            .collect(),
    };
    if population.is_empty() {
        return Err(Error::InvalidInput(format!(
            "fold {best}: no subjects in the Grad-CAM population"
        )));
    }
    let mode = CvSetup {
        train: &cfg.train,
        model: &cfg.model,
        ablation: cfg.ablation,
        master_seed: cfg.master_seed,
    }
    .aux_mode();
    let per_subject = subject_roi_scores(&models, &samples, &population, mode, ADHD_TARGET)?;
    let importance = select_biomarkers(&per_subject)?;

    let atlas_table =
        read_roi_table_file(&run.input(&cfg.paths.roi_table), Some(cfg.model.n_rois))?;
    let names: Vec<String> = atlas_table.iter().map(|e| e.name.clone()).collect();
    let adhd = FeatureMatrix::from_subjects(
        subjects.iter().filter(|s| s.label == Class::Adhd),
        cfg.interpret.descriptor,
    )?;
    let hc = FeatureMatrix::from_subjects(
        subjects.iter().filter(|s| s.label == Class::Hc),
        cfg.interpret.descriptor,
    )?;
    let mut stat = roi_stat_tests(&adhd, &hc, cfg.interpret.descriptor, cfg.interpret.test)?;
    let mut network_levels = Vec::new();
    if let Some(net_path) = &cfg.paths.networks {
        let nets = read_networks(&run.input(net_path), &atlas_table)?;
        let (groups, levels) = group_indices(&nets);
        let values: Vec<f64> = match cfg.interpret.network_values {
            NetworkValues::Importance => importance.scores.clone(),
            NetworkValues::AbsCohensD => stat
                .rois
                .iter()
                .map(|r| r.cohens_d.map_or(0.0, f64::abs))
                .collect(),
        };
        stat.network = Some(kruskal_wallis(&values, &groups)?);
        network_levels = levels;
    }
    let planted = match &cfg.paths.ground_truth {
        Some(p) => {
            let path = run.input(p);
            let v: Value = serde_json::from_str(&read_text(&path)?)
                .map_err(|e| Error::from(e).in_file(&path))?;
            let planted: Vec<usize> = serde_json::from_value(v["planted_rois"].clone())
                .map_err(|e| Error::from(e).in_file(&path))?;
            Some(planted)
        }
        None => None,
    };

    let selected = importance
        .selected
        .iter()
        .map(|&r| SelectedRoi {
            roi_index: r,
            label_id: atlas_table[r].label_id,
            name: names[r].clone(),
            score: importance.scores[r],
        })
        .collect();
    let out = Biomarkers {
        stage: "explain".into(),
        config_sha256: cfg.stage_sha256(Stage::Explain),
        train_config_sha256: train_hash,
        config: cfg.provenance(),
        best_fold: best,
        population: cfg.interpret.population,
        subjects: population
            .iter()
            .map(|&i| subjects[i].subject_id.clone())
            .collect(),
        n_models: models.len(),
        conventions: json!({
            "target": "ADHD logit (pre-softmax)",
            "layer": "last convolutional block, after ReLU",
            "channel_weights": "spatial mean of gradients",
            "upsampling": "nearest neighbour",
            "roi_score": "(row mean + column mean) / 2, max-normalised per map",
            "averaging": "over seed models, then over subjects",
            "threshold": "linear-interpolation quantile h = (n-1)p, p = 0.9; strictly greater selected",
        }),
        hit_rate: planted.as_ref().map(|p| hit_rate(&importance.selected, p)),
        planted_rois: planted,
        importance,
        selected,
        stats: stat,
        network_levels,
    };
    run.ensure_output_dir()?;
    let preamble = run.preamble(Stage::Explain);
    write_file(
        &run.out(ROI_IMPORTANCE_FILE),
        roi_importance_csv(&out.importance, &names, &preamble),
    )?;
    write_file(
        &run.out(STATS_FILE),
        stats_report_csv(&out.stats, &names, &preamble),
    )?;
    write_file(
        &run.out(BIOMARKERS_FILE),
        serde_json::to_string_pretty(&out)? + "\n",
    )?;
    Ok(out)
}

// --------------------------------------------------------------- report

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config_sha256: String,
    pub train_config_sha256: String,
    pub explain_config_sha256: String,
    pub config: Value,
    pub n_folds: usize,
    pub n_valid_folds: usize,
    pub seeds: Vec<u64>,
    pub metrics: Vec<(String, f64, f64)>,
    pub pooled: Option<MetricValues>,
    pub pooled_confusion: crate::evaluation::Confusion,
    pub best_fold: Option<usize>,
    pub audit_passed: bool,
    pub selected: Vec<SelectedRoi>,
    pub hit_rate: Option<f64>,
    pub large_effect_count: usize,
    pub network: Option<KruskalWallis>,
    pub warnings: Vec<String>,
}

pub fn report(run: &Run) -> Result<RunReport> {
    let cv = load_cv_summary(run)?;
    let bpath = run.out(BIOMARKERS_FILE);
    let bio: Biomarkers =
        serde_json::from_str(&read_text(&bpath)?).map_err(|e| Error::from(e).in_file(&bpath))?;
    check_hash(
        Some(&bio.config_sha256),
        &run.config.stage_sha256(Stage::Explain),
        &bpath,
    )?;
    if bio.train_config_sha256 != cv.config_sha256 {
        return Err(Error::ArtifactMismatch(format!(
            "{} and {} come from different training runs",
            bpath.display(),
            CV_SUMMARY_FILE
        )));
    }
    let agg = &cv.report.aggregate;
    let r = RunReport {
        config_sha256: run.config.config_sha256(),
        train_config_sha256: cv.config_sha256.clone(),
        explain_config_sha256: bio.config_sha256.clone(),
        config: run.config.provenance(),
        n_folds: agg.n_folds,
        n_valid_folds: agg.n_valid_folds,
        seeds: cv.report.seeds.clone(),
        metrics: agg
            .metrics
            .iter()
            .map(|(n, m)| (n.clone(), m.mean, m.std))
            .collect(),
        pooled: cv.report.pooled.values,
        pooled_confusion: agg.pooled_confusion,
        best_fold: cv.best_fold,
        audit_passed: cv.report.audit_passed,
        selected: bio.selected.clone(),
        hit_rate: bio.hit_rate,
        large_effect_count: bio.stats.large_effect_count,
        network: bio.stats.network,
        warnings: cv.report.warnings.clone(),
    };
    write_file(
        &run.out(REPORT_JSON_FILE),
        serde_json::to_string_pretty(&r)? + "\n",
    )?;
    write_file(&run.out(REPORT_TEXT_FILE), report_text(&r, &bio))?;
    Ok(r)
}

fn report_text(r: &RunReport, bio: &Biomarkers) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config sha256   {}", r.config_sha256);
    let _ = writeln!(
        s,
        "folds           {} ({} with both classes)",
        r.n_folds, r.n_valid_folds
    );
    let _ = writeln!(s, "seeds           {:?}", r.seeds);
    let _ = writeln!(
        s,
        "leakage audit   {}",
        if r.audit_passed { "passed" } else { "FAILED" }
    );
    let _ = writeln!(s, "\n{:<20} {:>8} {:>8}", "metric", "mean", "std");
    for (n, m, sd) in &r.metrics {
        let _ = writeln!(s, "{n:<20} {m:>8.4} {sd:>8.4}");
    }
    let c = &r.pooled_confusion;
    let _ = writeln!(s, "\npooled confusion  pred HC  pred ADHD");
    let _ = writeln!(s, "true HC           {:>7}  {:>9}", c.tn, c.fp);
    let _ = writeln!(s, "true ADHD         {:>7}  {:>9}", c.fn_, c.tp);
    if let Some(p) = &r.pooled {
        let _ = writeln!(
            s,
            "pooled balanced accuracy {:.4}, AUC {:.4}",
            p.balanced_accuracy, p.auc
        );
    }
    let _ = writeln!(
        s,
        "\nbiomarkers (fold {}, threshold {:.4}, {} selected)",
        bio.best_fold,
        bio.importance.threshold,
        r.selected.len()
    );
    for roi in &r.selected {
        let _ = writeln!(
            s,
            "  {:>4}  {:<24} {:.4}",
            roi.label_id, roi.name, roi.score
        );
    }
    if let Some(h) = r.hit_rate {
        let _ = writeln!(s, "planted-ROI hit rate {h:.3}");
    }
    let _ = writeln!(s, "\nROIs with |d| > 0.8: {}", r.large_effect_count);
    if let Some(kw) = &r.network {
        let _ = writeln!(
            s,
            "network Kruskal-Wallis H = {:.4}, df = {}, p = {:.4}",
            kw.h, kw.df, kw.p
        );
    }
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}
