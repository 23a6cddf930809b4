//! The staged workflow behind the CLI: simulate to files, calibrate from
//! labelled frames, classify into verdict rows, summarise into reports.

use std::collections::HashMap;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use crate::calibration::Distributions;
use crate::classify::{
    classify_spatiotemporal, classify_spatiotemporal_adaptive, optimize_threshold, roi_sum, LikelihoodTable,
    Verdict,
};
use crate::emccd::{read_irf1, write_irf1, Frame};
use crate::error::{Error, Result};
use crate::metrics::VerdictRow;
use crate::register::{Preparation, RegisterState};

use super::config::{ExperimentConfig, ExperimentKind, Method};
use super::exec::{Executor, LoadedSource, SimulatedSource, TrialSource};
use super::experiments::{collect_histograms, fit, pixel_order, SumHists, QUNYBBLE_CAL_FRAMES, QUNYBBLE_TEST_FRAME};
use super::io::{self, LabelRecord, ThresholdRow};

pub const FRAMES_FILE: &str = "frames.irf1";
pub const LABELS_FILE: &str = "labels.txt";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const CALIBRATION_MN_FILE: &str = "calibration_mn.csv";
pub const CALIBRATION_MN3_FILE: &str = "calibration_mn3.csv";
pub const THRESHOLDS_FILE: &str = "thresholds.csv";
pub const VERDICTS_FILE: &str = "verdicts.csv";
pub const REPORTS_FILE: &str = "reports.csv";

fn preparation(cfg: &ExperimentConfig) -> Preparation {
    match cfg.experiment {
        ExperimentKind::Qunybble | ExperimentKind::CrosstalkStudy => {
            Preparation::RandomShelving(cfg.protocol.shelve_probability)
        }
        _ => Preparation::Alternating,
    }
}

pub fn simulator(cfg: &ExperimentConfig) -> Result<crate::register::TrialSimulator> {
    crate::register::TrialSimulator::new(
        &cfg.imaging_model()?,
        cfg.camera_model(),
        cfg.decay_model()?,
        cfg.protocol(),
        preparation(cfg),
    )?
    .with_prep_error(cfg.protocol.prep_error)
}

/// Simulates `cfg.trials` trials (stream tag `tag`) and returns their
/// frames in trial order with one label per trial.
pub fn simulate(cfg: &ExperimentConfig, exec: &Executor, tag: &'static str) -> Result<(Vec<Frame>, Vec<LabelRecord>)> {
    let sim = simulator(cfg)?;
    let src = SimulatedSource {
        sim: &sim,
        seed: cfg.seed,
        tag,
        trials: cfg.trials,
    };
    Ok(exec.fold(
        src.len(),
        || (Vec::new(), Vec::new()),
        |(frames, labels), range| {
            let mut rec = src.record();
            for i in range {
                src.fill(i, &mut rec);
                frames.extend(rec.frames.iter().cloned());
                labels.push(LabelRecord {
                    state: rec.prepared_state,
                    decays: rec.decay_events.clone(),
                });
            }
        },
        |a, b| {
            a.0.extend(b.0);
            a.1.extend(b.1);
        },
    ))
}

pub fn write_dataset(dir: &Path, frames: &[Frame], labels: &[LabelRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_irf1(io::create(&dir.join(FRAMES_FILE))?, frames)?;
    io::write_labels(io::create(&dir.join(LABELS_FILE))?, labels)
}

pub fn load_dataset(cfg: &ExperimentConfig, frames: &Path, labels: &Path) -> Result<LoadedSource> {
    let f = read_irf1(BufReader::new(fs::File::open(frames)?))?;
    let l = io::read_labels(BufReader::new(fs::File::open(labels)?))?;
    let src = LoadedSource::new(cfg.protocol(), f, l)?;
    let (w, h) = src.frame_size();
    if (w, h) != (cfg.geometry.width_px, cfg.geometry.height_px) {
        return Err(Error::Config(format!(
            "frames are {w}x{h} but the configuration says {}x{}",
            cfg.geometry.width_px, cfg.geometry.height_px
        )));
    }
    Ok(src)
}

/// Everything the `classify` step needs.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub ml: Distributions,
    /// Nearest-neighbour and three-neighbour conditioned fits (multi-ion).
    pub mn: Option<Distributions>,
    pub mn3: Option<Distributions>,
    pub thresholds: Vec<ThresholdRow>,
}

fn calibration_frames(cfg: &ExperimentConfig) -> Vec<usize> {
    match cfg.experiment {
        ExperimentKind::Qunybble | ExperimentKind::CrosstalkStudy => QUNYBBLE_CAL_FRAMES.to_vec(),
        _ => vec![0],
    }
}

fn test_frame(cfg: &ExperimentConfig) -> usize {
    match cfg.experiment {
        ExperimentKind::Qunybble | ExperimentKind::CrosstalkStudy => QUNYBBLE_TEST_FRAME,
        _ => 0,
    }
}

fn calibrated_depth(cfg: &ExperimentConfig) -> usize {
    let tr = cfg.classify.time_resolved_rois.iter().copied().max().unwrap_or(0);
    cfg.classify.n_max.max(tr).min(cfg.n_pixels())
}

/// Fits distributions and thresholds from labelled trials. Labels are
/// taken as ground truth.
pub fn calibrate<S: TrialSource>(cfg: &ExperimentConfig, exec: &Executor, src: &S) -> Result<CalibrationSet> {
    let imaging = cfg.imaging_model()?;
    let frames = calibration_frames(cfg);
    let hist = collect_histograms(exec, src, cfg.n_pixels(), &frames, |_, r| Some(r.prepared_state));
    let order = pixel_order(cfg, &imaging, &hist)?;
    let depth = calibrated_depth(cfg);
    let n_ions = src.n_ions();
    let ml = fit(cfg, &hist, &order, depth, 0)?;
    let (mn, mn3) = if n_ions > 1 {
        (
            Some(fit(cfg, &hist, &order, depth, 2.min(n_ions - 1))?),
            Some(fit(cfg, &hist, &order, depth, 3.min(n_ions - 1))?),
        )
    } else {
        (None, None)
    };
    let (n_min, n_max) = (cfg.classify.n_min, cfg.classify.n_max);
    let n_count = n_max - n_min + 1;
    let slot = |k: usize, ni: usize, s: usize| (k * n_count + ni) * 2 + s;
    let sums = exec.fold(
        src.len(),
        || SumHists::new(n_ions * n_count * 2),
        |acc, range| {
            let mut rec = src.record();
            for i in range {
                src.fill(i, &mut rec);
                for k in 0..n_ions {
                    let s = rec.prepared_state.get(k).is_dark() as usize;
                    for &f in &frames {
                        let c = &rec.frames[f].counts;
                        let mut sum = 0u64;
                        for n in 1..=n_max {
                            sum += c[order.ranks[k][n - 1]] as u64;
                            if n >= n_min {
                                acc.add(slot(k, n - n_min, s), sum);
                            }
                        }
                    }
                }
            }
        },
        |a, b| a.merge(b),
    );
    let mut thresholds = Vec::new();
    for k in 0..n_ions {
        for ni in 0..n_count {
            let c = optimize_threshold(sums.get(slot(k, ni, 0)), sums.get(slot(k, ni, 1)))?;
            thresholds.push(ThresholdRow {
                ion: k,
                n: n_min + ni,
                theta: c.theta,
                error: c.error,
            });
        }
    }
    Ok(CalibrationSet {
        ml,
        mn,
        mn3,
        thresholds,
    })
}

pub fn write_calibration(dir: &Path, cal: &CalibrationSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    cal.ml.write_archive(io::create(&dir.join(CALIBRATION_FILE))?)?;
    if let Some(d) = &cal.mn {
        d.write_archive(io::create(&dir.join(CALIBRATION_MN_FILE))?)?;
    }
    if let Some(d) = &cal.mn3 {
        d.write_archive(io::create(&dir.join(CALIBRATION_MN3_FILE))?)?;
    }
    io::write_csv(io::create(&dir.join(THRESHOLDS_FILE))?, &cal.thresholds)
}

pub fn read_calibration(dir: &Path) -> Result<CalibrationSet> {
    let archive = |name: &str| -> Result<Option<Distributions>> {
        let p = dir.join(name);
        if !p.exists() {
            return Ok(None);
        }
        Distributions::read_archive(BufReader::new(fs::File::open(p)?)).map(Some)
    };
    Ok(CalibrationSet {
        ml: archive(CALIBRATION_FILE)?
            .ok_or_else(|| Error::Config(format!("no {CALIBRATION_FILE} in {}", dir.display())))?,
        mn: archive(CALIBRATION_MN_FILE)?,
        mn3: archive(CALIBRATION_MN3_FILE)?,
        thresholds: io::read_csv(fs::File::open(dir.join(THRESHOLDS_FILE))?)?,
    })
}

fn state_bit(s: RegisterState, k: usize) -> u8 {
    s.get(k).is_dark() as u8
}

fn push_rows(rows: &mut Vec<VerdictRow>, method: &str, n: usize, trial: u64, truth: RegisterState, v: &Verdict) {
    for k in 0..truth.n_ions() {
        rows.push(VerdictRow {
            method: method.to_string(),
            n,
            trial,
            ion: k,
            truth: state_bit(truth, k),
            verdict: state_bit(v.state, k),
            r: v.log_likelihood_ratios.get(k).copied().unwrap_or(0.0),
            pixels_used: v.pixels_used.get(k).copied().unwrap_or(n),
            iterations: if v.exposures_used > 1 {
                v.exposures_used
            } else {
                v.iterations
            },
        });
    }
}

/// One verdict row per (trial, method, ROI size, ion), trial-major. For
/// the decay-aware methods `iterations` holds the exposures consumed.
pub fn classify<S: TrialSource>(
    cfg: &ExperimentConfig,
    exec: &Executor,
    src: &S,
    cal: &CalibrationSet,
) -> Result<Vec<VerdictRow>> {
    let c = &cfg.classify;
    let (n_min, n_max) = (c.n_min, c.n_max);
    let depth = cal.ml.roi;
    if n_max > depth {
        return Err(Error::Config(format!(
            "ROI sizes up to {n_max} requested but the calibration covers {depth}"
        )));
    }
    let need = |d: &Option<Distributions>, m: Method| {
        d.clone().ok_or_else(|| Error::Config(format!("method {} needs a multi-ion calibration", m.tag())))
    };
    let mn = if c.methods.contains(&Method::Iterative) {
        Some(need(&cal.mn, Method::Iterative)?)
    } else {
        None
    };
    let mn3 = if c.methods.contains(&Method::Iterative3) {
        Some(need(&cal.mn3, Method::Iterative3)?)
    } else {
        None
    };
    let theta: HashMap<(usize, usize), u64> = cal.thresholds.iter().map(|t| ((t.ion, t.n), t.theta)).collect();
    let n_ions = src.n_ions();
    if c.methods.contains(&Method::Threshold) {
        for k in 0..n_ions {
            for n in n_min..=n_max {
                if !theta.contains_key(&(k, n)) {
                    return Err(Error::Config(format!("no threshold for ion {k} at N={n}")));
                }
            }
        }
    }
    let st_rois: Vec<usize> = c.time_resolved_rois.iter().copied().filter(|&n| n <= depth).collect();
    let tf = test_frame(cfg);
    let t_s = cfg.protocol().exposure_s();
    let tau = cfg.decay.lifetime_ms * 1e-3;
    let result = exec.fold(
        src.len(),
        || Ok(Vec::new()),
        |acc: &mut Result<Vec<VerdictRow>>, range| {
            let Ok(rows) = acc else { return };
            let mut rec = src.record();
            let run = || -> Result<()> {
                for i in range {
                    src.fill(i, &mut rec);
                    let truth = rec.prepared_state;
                    let counts = &rec.frames[tf].counts;
                    let t0 = LikelihoodTable::new(counts, &cal.ml, n_max)?;
                    for &m in &c.methods {
                        match m {
                            Method::Threshold => {
                                for n in n_min..=n_max {
                                    let mut state = RegisterState::all_bright(n_ions);
                                    for k in 0..n_ions {
                                        let sum = roi_sum(counts, &cal.ml.pixels[k][..n]);
                                        if sum < theta[&(k, n)] {
                                            state = state.with(k, crate::register::IonState::Dark);
                                        }
                                    }
                                    let v = Verdict {
                                        state,
                                        log_likelihood_ratios: vec![0.0; n_ions],
                                        pixels_used: vec![n; n_ions],
                                        exposures_used: 1,
                                        iterations: 0,
                                    };
                                    push_rows(rows, m.tag(), n, i, truth, &v);
                                }
                            }
                            Method::Ml => {
                                for n in n_min..=n_max {
                                    push_rows(rows, m.tag(), n, i, truth, &t0.ml(n));
                                }
                            }
                            Method::Adaptive => {
                                push_rows(rows, m.tag(), n_max, i, truth, &t0.adaptive(c.r_stop, n_max));
                            }
                            Method::Iterative | Method::Iterative3 => {
                                let d = if m == Method::Iterative { &mn } else { &mn3 };
                                let t = LikelihoodTable::new(counts, d.as_ref().unwrap(), n_max)?;
                                for n in n_min..=n_max {
                                    push_rows(rows, m.tag(), n, i, truth, &t.iterative(n, c.max_iter));
                                }
                            }
                            Method::Spatiotemporal | Method::SpatiotemporalAdaptive => {
                                let frames: Vec<&[u32]> = rec.frames.iter().map(|f| f.counts.as_slice()).collect();
                                for &n in &st_rois {
                                    let v = if m == Method::Spatiotemporal {
                                        classify_spatiotemporal(&frames, &cal.ml, n, t_s, tau)?
                                    } else {
                                        classify_spatiotemporal_adaptive(&frames, &cal.ml, n, t_s, tau, c.r_stop)?
                                    };
                                    push_rows(rows, m.tag(), n, i, truth, &v);
                                }
                            }
                        }
                    }
                }
                Ok(())
            };
            if let Err(e) = run() {
                *acc = Err(e);
            }
        },
        |a, b| match (a.as_mut(), b) {
            (Ok(x), Ok(y)) => x.extend(y),
            (Ok(_), Err(e)) => *a = Err(e),
            (Err(_), _) => {}
        },
    );
    result
}
