//! Command-line front end over [`crate::pipeline`].

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::pipeline::{self, Overrides, Run};

#[derive(Debug, Parser)]
#[command(
    name = "scnfusion",
    version,
    about = "Structural covariance network classification pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (1 = fully serial). Outputs do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overrides the master seed (and the cohort seed for `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Ablation switches, repeatable or comma separated.
    #[arg(long, global = true, value_enum, value_delimiter = ',')]
    pub ablation: Vec<AblationArg>,
    /// Output directory, overriding the configured one.
    #[arg(long, global = true, env = "SCNFUSION_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AblationArg {
    NoAux,
    NoEnsemble,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with planted group differences.
    Synth,
    /// Normalise volumes and extract ROI features.
    Extract,
    /// Cross-validated seed-ensemble training.
    Train,
    /// Grad-CAM biomarkers and ROI-wise statistics for the best fold.
    Explain,
    /// Merge training and explanation outputs into one report.
    Report,
}

fn execute(cli: &Cli) -> Result<String> {
    let overrides = Overrides {
        seed: cli.seed,
        no_aux: cli.ablation.contains(&AblationArg::NoAux),
        no_ensemble: cli.ablation.contains(&AblationArg::NoEnsemble),
        output_dir: cli.out.clone(),
    };
    let run = Run::load(cli.config.as_deref(), &overrides)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Synth => {
            let s = pipeline::synth(&run)?;
            Ok(format!(
                "wrote {} subjects to {}",
                s.n_subjects,
                s.output_dir.display()
            ))
        }
        Command::Extract => {
            let s = pipeline::extract(&run)?;
            let mut msg = format!("extracted {} subjects x {} ROIs", s.n_subjects, s.n_rois);
            if !s.degenerate_mad.is_empty() {
                msg += &format!("; zero MAD: {}", s.degenerate_mad.join(" "));
            }
            if !s.empty_roi_subjects.is_empty() {
                msg += &format!("; empty ROIs in: {}", s.empty_roi_subjects.join(" "));
            }
            Ok(msg)
        }
        Command::Train => {
            let s = pipeline::train(&run)?;
            let agg = &s.report.aggregate;
            let get = |n: &str| agg.get(n).map_or(f64::NAN, |m| m.mean);
            Ok(format!(
                "balanced accuracy {:.4}, AUC {:.4} over {} folds x {} seeds",
                get("balanced_accuracy"),
                get("auc"),
                agg.n_valid_folds,
                s.report.seeds.len()
            ))
        }
        Command::Explain => {
            let b = pipeline::explain(&run)?;
            let mut msg = format!("fold {}: {} ROIs selected", b.best_fold, b.selected.len());
            if let Some(h) = b.hit_rate {
                msg += &format!(", planted hit rate {h:.3}");
            }
            Ok(msg)
        }
        Command::Report => {
            pipeline::report(&run)?;
            Ok(format!(
                "wrote {}",
                run.out(pipeline::REPORT_TEXT_FILE).display()
            ))
        }
    })
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
