//! Configuration, random streams, parallel execution, the experiments and
//! their output files.

pub mod config;
pub mod exec;
pub mod experiments;
pub mod io;
pub mod pipeline;
pub mod rng;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{write_reports_csv, EpsilonReport};

pub use config::{ExperimentConfig, ExperimentKind, Method};
pub use exec::{Executor, LoadedSource, SimulatedSource, TrialSource};
pub use experiments::{
    CrosstalkResult, QunybbleResult, SingleExposureResult, TimeResolvedResult,
};
pub use rng::stream_for;

pub const CODE_VERSION: &str = concat!("ionreadout ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone)]
pub enum Outcome {
    SingleExposure(SingleExposureResult),
    TimeResolved(TimeResolvedResult),
    Qunybble(QunybbleResult),
    Crosstalk(CrosstalkResult),
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub outcome: Outcome,
    pub reports: Vec<EpsilonReport>,
    /// Values computed during the run, echoed into the manifest.
    pub derived: toml::Table,
}

fn put(t: &mut toml::Table, key: &str, v: impl Into<toml::Value>) {
    t.insert(key.to_string(), v.into());
}

fn signal_derived(cfg: &ExperimentConfig, t: &mut toml::Table) -> Result<()> {
    put(t, "bright_rate_per_s", cfg.bright_rate_per_s());
    if cfg.experiment != ExperimentKind::CrosstalkStudy {
        let o = experiments::bright_signal_oracle(cfg)?;
        put(t, "oracle_roi_pixels", experiments::ORACLE_ROI as i64);
        put(t, "oracle_roi_fraction", o.roi_fraction);
        put(t, "oracle_min_bright_counts_per_400us", o.min_counts_per_400us);
        put(t, "oracle_error_at_configured_signal", o.error_at_configured);
    }
    Ok(())
}

/// Runs the configured experiment end to end in memory.
pub fn run_experiment(cfg: &ExperimentConfig, exec: &Executor) -> Result<RunOutput> {
    cfg.validate()?;
    let mut d = toml::Table::new();
    put(&mut d, "code_version", CODE_VERSION);
    signal_derived(cfg, &mut d)?;
    let (outcome, reports) = match cfg.experiment {
        ExperimentKind::SingleExposure => {
            let r = experiments::single_exposure(cfg, exec)?;
            if let Some(n) = experiments::floor_n(&r.threshold) {
                put(&mut d, "floor_n_threshold", n as i64);
            }
            if let Some(n) = experiments::floor_n(&r.ml) {
                put(&mut d, "floor_n_ml", n as i64);
            }
            if let Some(b) = experiments::best(&r.ml) {
                put(&mut d, "best_ml_epsilon", b.epsilon);
                put(&mut d, "best_ml_n", b.n as i64);
            }
            if let Some(b) = experiments::best(&r.threshold) {
                put(&mut d, "best_threshold_epsilon", b.epsilon);
                put(&mut d, "best_threshold_n", b.n as i64);
            }
            if let Some(a) = r.tuned_adaptive() {
                put(&mut d, "tuned_adaptive_method", a.method.clone());
                put(&mut d, "tuned_adaptive_mean_pixels", a.mean_used.unwrap_or(0.0));
            }
            put(&mut d, "adaptive_infinite_mismatches", r.infinite_mismatches as i64);
            put(&mut d, "decay_fraction", r.decays as f64 / r.dark_ions.max(1) as f64);
            let reports = r.reports();
            (Outcome::SingleExposure(r), reports)
        }
        ExperimentKind::TimeResolved => {
            let r = experiments::time_resolved(cfg, exec)?;
            let b = r.best();
            put(&mut d, "best_st_ml_method", b.method.clone());
            put(&mut d, "best_st_ml_n", b.n as i64);
            put(&mut d, "best_st_ml_epsilon", b.epsilon);
            let reports = r.reports();
            (Outcome::TimeResolved(r), reports)
        }
        ExperimentKind::Qunybble => {
            let r = experiments::qunybble(cfg, exec)?;
            put(&mut d, "postselect_single_threshold", r.dual.single as i64);
            put(&mut d, "postselect_lower", r.dual.lower as i64);
            put(&mut d, "postselect_upper", r.dual.upper as i64);
            put(&mut d, "retained_fraction", r.dual.retained_fraction);
            put(&mut d, "single_threshold_retained_fraction", r.dual.single_retained_fraction);
            put(&mut d, "truth_accuracy", r.truth_accuracy());
            for (name, reps) in [
                ("threshold", &r.threshold),
                ("ml", &r.ml),
                ("mn", &r.iterative),
                ("mn3", &r.iterative3),
            ] {
                if let Some(b) = experiments::best_x(reps) {
                    put(&mut d, &format!("best_{name}_epsilon_x"), b.epsilon_x);
                    put(&mut d, &format!("best_{name}_n"), b.n as i64);
                }
            }
            let reports = r.reports();
            (Outcome::Qunybble(r), reports)
        }
        ExperimentKind::CrosstalkStudy => {
            let r = experiments::crosstalk_study(cfg, exec)?;
            put(&mut d, "roi_ion", r.roi_ion as i64);
            (Outcome::Crosstalk(r), Vec::new())
        }
    };
    Ok(RunOutput {
        outcome,
        reports,
        derived: d,
    })
}

/// The configuration as a manifest: a loadable config (threads zeroed,
/// since they never change results) plus a `[derived]` table.
pub fn manifest_text(cfg: &ExperimentConfig, derived: &toml::Table) -> Result<String> {
    let mut c = cfg.clone();
    c.threads = 0;
    let mut t = toml::Table::try_from(&c).map_err(|e| Error::Config(e.to_string()))?;
    t.insert("derived".into(), toml::Value::Table(derived.clone()));
    toml::to_string(&t).map_err(|e| Error::Config(e.to_string()))
}

pub fn write_manifest(dir: &Path, cfg: &ExperimentConfig, derived: &toml::Table) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, manifest_text(cfg, derived)?)?;
    Ok(p)
}

pub fn write_reports(path: &Path, reports: &[EpsilonReport]) -> Result<()> {
    write_reports_csv(io::create(path)?, reports)
}

/// Writes every output of a run and returns the paths written.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    if !out.reports.is_empty() {
        let p = dir.join(pipeline::REPORTS_FILE);
        write_reports(&p, &out.reports)?;
        paths.push(p);
    }
    match &out.outcome {
        Outcome::SingleExposure(r) => {
            let rows: Vec<io::ThresholdRow> = r
                .thresholds
                .iter()
                .enumerate()
                .flat_map(|(ni, per_ion)| {
                    per_ion.iter().enumerate().map(move |(ion, c)| io::ThresholdRow {
                        ion,
                        n: cfg.classify.n_min + ni,
                        theta: c.theta,
                        error: c.error,
                    })
                })
                .collect();
            let p = dir.join(pipeline::THRESHOLDS_FILE);
            io::write_csv(io::create(&p)?, &rows)?;
            paths.push(p);
        }
        Outcome::Qunybble(r) => {
            #[derive(serde::Serialize)]
            struct Row {
                single: u64,
                lower: u64,
                upper: u64,
                retained_fraction: f64,
                single_retained_fraction: f64,
                n_trials: u64,
                n_retained: u64,
                truth_accuracy: f64,
            }
            let p = dir.join("postselect.csv");
            io::write_csv(
                io::create(&p)?,
                &[Row {
                    single: r.dual.single,
                    lower: r.dual.lower,
                    upper: r.dual.upper,
                    retained_fraction: r.dual.retained_fraction,
                    single_retained_fraction: r.dual.single_retained_fraction,
                    n_trials: r.n_trials,
                    n_retained: r.n_retained,
                    truth_accuracy: r.truth_accuracy(),
                }],
            )?;
            paths.push(p);
        }
        Outcome::Crosstalk(r) => paths.extend(write_crosstalk(dir, r)?),
        Outcome::TimeResolved(_) => {}
    }
    paths.push(write_manifest(dir, cfg, &out.derived)?);
    Ok(paths)
}

pub fn write_crosstalk(dir: &Path, r: &CrosstalkResult) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let p = dir.join("crosstalk.csv");
    io::write_cumulative_csv(io::create(&p)?, &r.measured, &r.diffraction)?;
    #[derive(serde::Serialize)]
    struct Row {
        diameter_um: f64,
        nearest: f64,
        next_nearest: Option<f64>,
        airy_diameter_um: f64,
        airy_nearest: f64,
        airy_next_nearest: Option<f64>,
    }
    let rows: Vec<Row> = r
        .table
        .iter()
        .map(|t| Row {
            diameter_um: t.diameter_um,
            nearest: t.nearest,
            next_nearest: t.next_nearest,
            airy_diameter_um: t.airy_diameter_um,
            airy_nearest: t.airy_nearest,
            airy_next_nearest: t.airy_next_nearest,
        })
        .collect();
    let q = dir.join("crosstalk_roi.csv");
    io::write_csv(io::create(&q)?, &rows)?;
    Ok(vec![p, q])
}
