//! The four experiments. Each one streams trials through the executor
//! with integer accumulators and only keeps per-trial data where a later
//! pass needs it (post-selection labels).

use crate::calibration::{
    brightness_order, check_order, cumulative_signal, fit_distributions, nearest_neighbors,
    Distributions, FitOptions, PixelOrder, StateHistograms,
};
use crate::classify::{decide, optimize_threshold, spatiotemporal_log_pd_prefix, LikelihoodTable, ThresholdChoice};
use crate::emccd::PreparedExposure;
use crate::error::{Error, Result};
use crate::metrics::{
    postselect, tune_dual_thresholds, DualThresholds, EpsilonReport, ErrorCounts, PrePost,
};
use crate::optics::{pixel_rate_map, relative_crosstalk, ImagingModel, PointSpreadFunction};
use crate::register::{RegisterState, TrialRecord};

use super::config::{ExperimentConfig, OrderSource};
use super::exec::{Executor, SimulatedSource, TrialSource};
use super::pipeline::simulator;
use super::rng::stream_for;

/// An ROI size counts as having reached the floor when its error is within
/// this fraction of the minimum over the sweep.
pub const FLOOR_TOLERANCE: f64 = 0.10;

/// ROI size used by the bright-signal oracle.
pub const ORACLE_ROI: usize = 30;
/// Discrimination error the default bright signal must beat at
/// [`ORACLE_ROI`] without decay.
pub const ORACLE_TARGET_ERROR: f64 = 1e-5;

/// Histograms of integer sums, one per slot, grown on demand.
#[derive(Debug, Clone, Default)]
pub(crate) struct SumHists(Vec<Vec<u64>>);

impl SumHists {
    pub(crate) fn new(slots: usize) -> Self {
        Self(vec![Vec::new(); slots])
    }

    #[inline]
    pub(crate) fn add(&mut self, slot: usize, value: u64) {
        let h = &mut self.0[slot];
        let v = value as usize;
        if h.len() <= v {
            h.resize(v + 1, 0);
        }
        h[v] += 1;
    }

    pub(crate) fn merge(&mut self, other: SumHists) {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            if a.len() < b.len() {
                a.resize(b.len(), 0);
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub(crate) fn get(&self, slot: usize) -> &[u64] {
        &self.0[slot]
    }
}

fn merge_counts(a: &mut [ErrorCounts], b: &[ErrorCounts]) {
    for (x, y) in a.iter_mut().zip(b) {
        x.merge(y);
    }
}

/// Error counts for a threshold chosen on `fit` histograms and applied to
/// `eval` histograms (the same ones for in-sample optimisation).
fn threshold_counts(
    fit_bright: &[u64],
    fit_dark: &[u64],
    eval_bright: &[u64],
    eval_dark: &[u64],
) -> Result<(ThresholdChoice, ErrorCounts)> {
    let choice = optimize_threshold(fit_bright, fit_dark)?;
    let t = choice.theta as usize;
    let below = |h: &[u64]| h.iter().take(t).sum::<u64>();
    let counts = ErrorCounts {
        bright_trials: eval_bright.iter().sum(),
        bright_errors: below(eval_bright),
        dark_trials: eval_dark.iter().sum(),
        dark_errors: eval_dark.iter().sum::<u64>() - below(eval_dark),
    };
    Ok((choice, counts))
}

/// State histograms over the listed frames of every trial with a label.
pub fn collect_histograms<S, L>(
    exec: &Executor,
    src: &S,
    n_pixels: usize,
    frames: &[usize],
    label: L,
) -> StateHistograms
where
    S: TrialSource,
    L: Fn(u64, &TrialRecord) -> Option<RegisterState> + Sync,
{
    let n_ions = src.n_ions();
    exec.fold(
        src.len(),
        || StateHistograms::new(n_ions, n_pixels),
        |h, range| {
            let mut rec = src.record();
            for i in range {
                src.fill(i, &mut rec);
                if let Some(state) = label(i, &rec) {
                    for &f in frames {
                        h.add(state, &rec.frames[f].counts);
                    }
                }
            }
        },
        |a, b| a.merge(&b),
    )
}

/// Pixel ranking per ion from labelled calibration data.
pub fn pixel_order(
    cfg: &ExperimentConfig,
    imaging: &ImagingModel,
    hist: &StateHistograms,
) -> Result<PixelOrder> {
    match cfg.calibration.order {
        OrderSource::Differential => brightness_order(&hist.differential_images()?),
        OrderSource::Check => {
            let check = hist
                .mean_image(|m| m == 0)
                .ok_or(Error::Empty("all-bright calibration frames"))?;
            let pitch = imaging.pixel_pitch_um;
            let ions: Vec<[f64; 2]> = imaging
                .ion_positions_um
                .iter()
                .map(|p| [p[0] / pitch, p[1] / pitch])
                .collect();
            check_order(&check, cfg.camera.cic_per_pixel, imaging.width, &ions)
        }
    }
}

pub fn fit_options(cfg: &ExperimentConfig) -> FitOptions {
    FitOptions {
        alpha: cfg.calibration.alpha,
        floor: cfg.calibration.floor,
        min_samples: cfg.calibration.min_samples,
        pad: cfg.calibration.pad,
    }
}

pub fn fit(
    cfg: &ExperimentConfig,
    hist: &StateHistograms,
    order: &PixelOrder,
    roi: usize,
    arity: usize,
) -> Result<Distributions> {
    let neighbors = nearest_neighbors(&cfg.offsets_um(), arity)?;
    fit_distributions(hist, order, roi, &neighbors, &fit_options(cfg))
}

fn subtraction(cfg: &ExperimentConfig) -> Option<f64> {
    (cfg.protocol.subtract_prep_error > 0.0).then_some(cfg.protocol.subtract_prep_error)
}

/// Smallest N whose error is within [`FLOOR_TOLERANCE`] of the minimum.
pub fn floor_n(reports: &[EpsilonReport]) -> Option<usize> {
    let best = best(reports)?;
    reports
        .iter()
        .find(|r| r.epsilon <= best.epsilon * (1.0 + FLOOR_TOLERANCE))
        .map(|r| r.n)
}

/// The report with the smallest error, earliest on ties.
pub fn best(reports: &[EpsilonReport]) -> Option<&EpsilonReport> {
    reports
        .iter()
        .fold(None, |b: Option<&EpsilonReport>, r| match b {
            Some(b) if b.epsilon <= r.epsilon => Some(b),
            _ => Some(r),
        })
}

/// Same as [`best`] on the per-qubit error.
pub fn best_x(reports: &[EpsilonReport]) -> Option<&EpsilonReport> {
    reports
        .iter()
        .fold(None, |b: Option<&EpsilonReport>, r| match b {
            Some(b) if b.epsilon_x <= r.epsilon_x => Some(b),
            _ => Some(r),
        })
}

// Single exposure

#[derive(Debug, Clone)]
pub struct SingleExposureResult {
    pub threshold: Vec<EpsilonReport>,
    /// Per ROI size, the thresholds for each ion.
    pub thresholds: Vec<Vec<ThresholdChoice>>,
    pub ml: Vec<EpsilonReport>,
    /// One report per stopping level, `n` = pixel cap, mean pixels used.
    pub adaptive: Vec<EpsilonReport>,
    pub r_stops: Vec<f64>,
    /// Frames where adaptive ML with an infinite stopping level disagreed
    /// with full ML at the pixel cap, and frames checked.
    pub infinite_mismatches: u64,
    pub infinite_frames: u64,
    /// Dark-prepared ions and how many of them decayed during the exposure.
    pub dark_ions: u64,
    pub decays: u64,
    pub exposure_s: f64,
    pub pixel_order: PixelOrder,
}

impl SingleExposureResult {
    /// Smallest stopping level whose error matches the best full-ML error
    /// within one standard error.
    pub fn tuned_adaptive(&self) -> Option<&EpsilonReport> {
        let ml = best(&self.ml)?;
        let target = ml.epsilon + ml.sigma;
        let mut idx: Vec<usize> = (0..self.r_stops.len()).collect();
        idx.sort_by(|&a, &b| self.r_stops[a].total_cmp(&self.r_stops[b]));
        idx.into_iter()
            .map(|i| &self.adaptive[i])
            .find(|r| r.epsilon <= target)
    }

    pub fn reports(&self) -> Vec<EpsilonReport> {
        let mut out = self.threshold.clone();
        out.extend(self.ml.iter().cloned());
        out.extend(self.adaptive.iter().cloned());
        out
    }
}

#[derive(Debug, Clone)]
struct SingleAcc {
    sums: SumHists,
    ml: Vec<ErrorCounts>,
    adaptive: Vec<(ErrorCounts, u64)>,
    infinite_mismatches: u64,
    frames: u64,
    dark_ions: u64,
    decays: u64,
}

/// First pixel count at which the running |LLR| reaches `r`, else `max_n`.
/// `running_max[m - 1]` is the largest |LLR| over the first m pixels.
#[inline]
fn stop_point(running_max: &[f64], r: f64) -> usize {
    let m = running_max.partition_point(|&x| x < r);
    (m + 1).min(running_max.len())
}

pub fn single_exposure(cfg: &ExperimentConfig, exec: &Executor) -> Result<SingleExposureResult> {
    let imaging = cfg.imaging_model()?;
    let sim = simulator(cfg)?;
    let n_ions = sim.n_ions();
    let n_pixels = cfg.n_pixels();
    let cal = SimulatedSource {
        sim: &sim,
        seed: cfg.seed,
        tag: "cal",
        trials: cfg.calibration.trials,
    };
    if cal.is_empty() {
        return Err(Error::Config("calibration.trials must be at least 1".into()));
    }
    let hist = collect_histograms(exec, &cal, n_pixels, &[0], |_, r| Some(r.prepared_state));
    let order = pixel_order(cfg, &imaging, &hist)?;
    let (n_min, n_max) = (cfg.classify.n_min, cfg.classify.n_max);
    let n_count = n_max - n_min + 1;
    let dists = fit(cfg, &hist, &order, n_max, 0)?;
    let r_stops = cfg.classify.r_stop_scan.clone();

    let test = SimulatedSource {
        sim: &sim,
        seed: cfg.seed,
        tag: "test",
        trials: cfg.trials,
    };
    let init = || SingleAcc {
        sums: SumHists::new(n_ions * n_count * 2),
        ml: vec![ErrorCounts::default(); n_count],
        adaptive: vec![(ErrorCounts::default(), 0); r_stops.len()],
        infinite_mismatches: 0,
        frames: 0,
        dark_ions: 0,
        decays: 0,
    };
    let acc = exec.fold(
        test.len(),
        init,
        |acc, range| {
            let mut rec = test.record();
            let mut running = vec![0.0; n_max];
            for i in range {
                test.fill(i, &mut rec);
                let truth = rec.prepared_state;
                let counts = &rec.frames[0].counts;
                let table = LikelihoodTable::new(counts, &dists, n_max).expect("ROI within calibration");
                for k in 0..n_ions {
                    let t = truth.get(k);
                    let s = t.is_dark() as usize;
                    if t.is_dark() {
                        acc.dark_ions += 1;
                        acc.decays += rec.decay_events.iter().filter(|d| d.ion == k).count() as u64;
                    }
                    let mut sum = 0u64;
                    let mut peak = 0.0f64;
                    for n in 1..=n_max {
                        sum += counts[order.ranks[k][n - 1]] as u64;
                        let l = table.llr(k, 0, n);
                        peak = peak.max(l.abs());
                        running[n - 1] = peak;
                        if n >= n_min {
                            let ni = n - n_min;
                            acc.sums.add((k * n_count + ni) * 2 + s, sum);
                            acc.ml[ni].add(t, decide(l));
                        }
                    }
                    for (j, &r) in r_stops.iter().enumerate() {
                        let m = stop_point(&running, r);
                        acc.adaptive[j].0.add(t, decide(table.llr(k, 0, m)));
                        acc.adaptive[j].1 += m as u64;
                    }
                }
                acc.frames += 1;
                if table.adaptive(f64::INFINITY, n_max).state != table.ml(n_max).state {
                    acc.infinite_mismatches += 1;
                }
            }
        },
        |a, b| {
            a.sums.merge(b.sums);
            merge_counts(&mut a.ml, &b.ml);
            for (x, y) in a.adaptive.iter_mut().zip(&b.adaptive) {
                x.0.merge(&y.0);
                x.1 += y.1;
            }
            a.infinite_mismatches += b.infinite_mismatches;
            a.frames += b.frames;
            a.dark_ions += b.dark_ions;
            a.decays += b.decays;
        },
    );

    let sub = subtraction(cfg);
    let mut threshold = Vec::with_capacity(n_count);
    let mut thresholds = Vec::with_capacity(n_count);
    let mut ml = Vec::with_capacity(n_count);
    for ni in 0..n_count {
        let mut counts = ErrorCounts::default();
        let mut choices = Vec::with_capacity(n_ions);
        for k in 0..n_ions {
            let slot = (k * n_count + ni) * 2;
            let (b, d) = (acc.sums.get(slot), acc.sums.get(slot + 1));
            let (choice, c) = threshold_counts(b, d, b, d)?;
            counts.merge(&c);
            choices.push(choice);
        }
        threshold.push(EpsilonReport::from_counts("T", n_min + ni, &counts, sub)?);
        thresholds.push(choices);
        ml.push(EpsilonReport::from_counts("M", n_min + ni, &acc.ml[ni], sub)?);
    }
    let adaptive = r_stops
        .iter()
        .zip(&acc.adaptive)
        .map(|(r, (c, used))| {
            Ok(EpsilonReport::from_counts(&format!("adaptive:R={r}"), n_max, c, sub)?
                .with_mean_used(*used as f64 / c.trials() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SingleExposureResult {
        threshold,
        thresholds,
        ml,
        adaptive,
        r_stops,
        infinite_mismatches: acc.infinite_mismatches,
        infinite_frames: acc.frames,
        dark_ions: acc.dark_ions,
        decays: acc.decays,
        exposure_s: cfg.protocol().exposure_s(),
        pixel_order: order,
    })
}

// Time resolved

#[derive(Debug, Clone)]
pub struct TimeResolvedResult {
    pub rois: Vec<usize>,
    pub exposures: usize,
    /// [m][roi index]: decay-aware ML over the first m + 1 exposures.
    pub st_ml: Vec<Vec<EpsilonReport>>,
    /// [m][roi index]: threshold on counts summed over m + 1 exposures.
    pub threshold: Vec<Vec<EpsilonReport>>,
    /// Per ROI: exposures consumed until |LLR| reaches the stopping level.
    pub adaptive: Vec<EpsilonReport>,
}

impl TimeResolvedResult {
    /// For each exposure count, the best ROI size.
    pub fn best_per_m(&self) -> Vec<EpsilonReport> {
        self.st_ml.iter().map(|row| best(row).unwrap().clone()).collect()
    }

    pub fn best(&self) -> EpsilonReport {
        best(&self.best_per_m()).unwrap().clone()
    }

    pub fn reports(&self) -> Vec<EpsilonReport> {
        let mut out: Vec<EpsilonReport> = self.threshold.iter().flatten().cloned().collect();
        out.extend(self.st_ml.iter().flatten().cloned());
        out.extend(self.adaptive.iter().cloned());
        out
    }
}

#[derive(Debug, Clone)]
struct TimeAcc {
    sums: SumHists,
    st: Vec<ErrorCounts>,
    adaptive: Vec<(ErrorCounts, u64)>,
}

pub fn time_resolved(cfg: &ExperimentConfig, exec: &Executor) -> Result<TimeResolvedResult> {
    let imaging = cfg.imaging_model()?;
    let sim = simulator(cfg)?;
    let n_ions = sim.n_ions();
    let protocol = cfg.protocol();
    let m_max = protocol.n_frames();
    let t_s = protocol.exposure_s();
    let tau = cfg.decay.lifetime_ms * 1e-3;
    let rois = cfg.classify.time_resolved_rois.clone();
    let depth = rois.iter().copied().max().ok_or(Error::Empty("time-resolved ROI list"))?;
    if rois.iter().any(|&n| n == 0 || n > cfg.n_pixels()) {
        return Err(Error::Config("time-resolved ROI sizes must be within the grid".into()));
    }
    let n_rois = rois.len();
    let cal = SimulatedSource {
        sim: &sim,
        seed: cfg.seed,
        tag: "cal",
        trials: cfg.calibration.trials,
    };
    if cal.is_empty() {
        return Err(Error::Config("calibration.trials must be at least 1".into()));
    }
    let hist = collect_histograms(exec, &cal, cfg.n_pixels(), &[0], |_, r| Some(r.prepared_state));
    let order = pixel_order(cfg, &imaging, &hist)?;
    let dists = fit(cfg, &hist, &order, depth, 0)?;
    let r_stop = cfg.classify.r_stop;

    let test = SimulatedSource {
        sim: &sim,
        seed: cfg.seed,
        tag: "test",
        trials: cfg.trials,
    };
    let slot = |k: usize, m: usize, ri: usize, s: usize| ((k * m_max + m) * n_rois + ri) * 2 + s;
    let acc = exec.fold(
        test.len(),
        || TimeAcc {
            sums: SumHists::new(n_ions * m_max * n_rois * 2),
            st: vec![ErrorCounts::default(); m_max * n_rois],
            adaptive: vec![(ErrorCounts::default(), 0); n_rois],
        },
        |acc, range| {
            let mut rec = test.record();
            let mut lb = vec![0.0; m_max];
            let mut ld = vec![0.0; m_max];
            for i in range {
                test.fill(i, &mut rec);
                let truth = rec.prepared_state;
                let tables: Vec<LikelihoodTable> = rec
                    .frames
                    .iter()
                    .map(|f| LikelihoodTable::new(&f.counts, &dists, depth).expect("ROI within calibration"))
                    .collect();
                for k in 0..n_ions {
                    let t = truth.get(k);
                    let s = t.is_dark() as usize;
                    for (ri, &n) in rois.iter().enumerate() {
                        let roi = order.roi(k, n);
                        let mut sum = 0u64;
                        for (m, f) in rec.frames.iter().enumerate() {
                            sum += roi.iter().map(|&p| f.counts[p] as u64).sum::<u64>();
                            acc.sums.add(slot(k, m, ri, s), sum);
                            let (b, d) = tables[m].log_likelihoods(k, 0, n);
                            lb[m] = b;
                            ld[m] = d;
                        }
                        let pd = spatiotemporal_log_pd_prefix(&lb, &ld, t_s, tau).expect("validated window");
                        let mut pb = 0.0;
                        let mut stopped = None;
                        for m in 0..m_max {
                            pb += lb[m];
                            let l = pb - pd[m];
                            acc.st[m * n_rois + ri].add(t, decide(l));
                            if stopped.is_none() && (l.abs() >= r_stop || m + 1 == m_max) {
                                stopped = Some((m + 1, decide(l)));
                            }
                        }
                        let (used, v) = stopped.unwrap();
                        acc.adaptive[ri].0.add(t, v);
                        acc.adaptive[ri].1 += used as u64;
                    }
                }
            }
        },
        |a, b| {
            a.sums.merge(b.sums);
            merge_counts(&mut a.st, &b.st);
            for (x, y) in a.adaptive.iter_mut().zip(&b.adaptive) {
                x.0.merge(&y.0);
                x.1 += y.1;
            }
        },
    );

    let sub = subtraction(cfg);
    let mut st_ml = Vec::with_capacity(m_max);
    let mut threshold = Vec::with_capacity(m_max);
    for m in 0..m_max {
        let mut st_row = Vec::with_capacity(n_rois);
        let mut t_row = Vec::with_capacity(n_rois);
        for (ri, &n) in rois.iter().enumerate() {
            st_row.push(EpsilonReport::from_counts(
                &format!("st_ml:M={}", m + 1),
                n,
                &acc.st[m * n_rois + ri],
                sub,
            )?);
            let mut counts = ErrorCounts::default();
            for k in 0..n_ions {
                let (b, d) = (acc.sums.get(slot(k, m, ri, 0)), acc.sums.get(slot(k, m, ri, 1)));
                counts.merge(&threshold_counts(b, d, b, d)?.1);
            }
            t_row.push(EpsilonReport::from_counts(&format!("T:M={}", m + 1), n, &counts, sub)?);
        }
        st_ml.push(st_row);
        threshold.push(t_row);
    }
    let adaptive = rois
        .iter()
        .zip(&acc.adaptive)
        .map(|(&n, (c, used))| {
            Ok(EpsilonReport::from_counts("st_adaptive", n, c, sub)?
                .with_mean_used(*used as f64 / c.trials() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TimeResolvedResult {
        rois,
        exposures: m_max,
        st_ml,
        threshold,
        adaptive,
    })
}

// Qunybble

#[derive(Debug, Clone)]
pub struct QunybbleResult {
    pub dual: DualThresholds,
    pub n_trials: u64,
    pub n_retained: u64,
    /// Retained trials whose inferred state equals the simulated state at
    /// the start of the test exposure.
    pub truth_matches: u64,
    pub threshold: Vec<EpsilonReport>,
    pub ml: Vec<EpsilonReport>,
    pub iterative: Vec<EpsilonReport>,
    pub iterative3: Vec<EpsilonReport>,
    pub rect_rois: Vec<Vec<usize>>,
}

impl QunybbleResult {
    pub fn truth_accuracy(&self) -> f64 {
        self.truth_matches as f64 / self.n_retained as f64
    }

    pub fn reports(&self) -> Vec<EpsilonReport> {
        let mut out = self.threshold.clone();
        out.extend(self.ml.iter().cloned());
        out.extend(self.iterative.iter().cloned());
        out.extend(self.iterative3.iter().cloned());
        out
    }
}

/// Rectangle of `w` x `h` pixels around each ion, clipped to the grid.
pub fn rectangular_rois(imaging: &ImagingModel, w: usize, h: usize) -> Vec<Vec<usize>> {
    let pitch = imaging.pixel_pitch_um;
    imaging
        .ion_positions_um
        .iter()
        .map(|p| {
            let corner = |c: f64, size: usize, limit: usize| {
                let lo = (c / pitch).floor() as i64 - (size / 2) as i64;
                let lo = lo.clamp(0, limit.saturating_sub(size) as i64) as usize;
                lo..(lo + size).min(limit)
            };
            let xs = corner(p[0], w, imaging.width);
            let ys = corner(p[1], h, imaging.height);
            ys.flat_map(|y| xs.clone().map(move |x| y * imaging.width + x))
                .collect()
        })
        .collect()
}

struct PassOne {
    sums: PrePost,
    truth: Vec<RegisterState>,
}

struct PassThree {
    cal: SumHists,
    test: SumHists,
    ml: Vec<ErrorCounts>,
    mn: Vec<ErrorCounts>,
    mn3: Vec<ErrorCounts>,
}

/// Frames of the six-exposure sequence used for calibration (pre and post)
/// and for the test readout.
pub const QUNYBBLE_CAL_FRAMES: [usize; 4] = [1, 2, 4, 5];
pub const QUNYBBLE_TEST_FRAME: usize = 3;

pub fn qunybble(cfg: &ExperimentConfig, exec: &Executor) -> Result<QunybbleResult> {
    let imaging = cfg.imaging_model()?;
    let sim = simulator(cfg)?;
    let n_ions = sim.n_ions();
    let src = SimulatedSource {
        sim: &sim,
        seed: cfg.seed,
        tag: "qunybble",
        trials: cfg.trials,
    };
    let rect = rectangular_rois(&imaging, cfg.postselect.roi_width_px, cfg.postselect.roi_height_px);
    let test_start = sim.timeline().windows[QUNYBBLE_TEST_FRAME].0;

    let one = exec.fold(
        src.len(),
        || PassOne {
            sums: PrePost::new(n_ions),
            truth: Vec::new(),
        },
        |acc, range| {
            let mut rec = src.record();
            let mut pre = vec![0u64; n_ions];
            let mut post = vec![0u64; n_ions];
            for i in range {
                src.fill(i, &mut rec);
                let f = &rec.frames;
                for (k, roi) in rect.iter().enumerate() {
                    let s = |j: usize| roi.iter().map(|&p| f[j].counts[p] as u64).sum::<u64>();
                    pre[k] = s(1) + s(2);
                    post[k] = s(4) + s(5);
                }
                acc.sums.push(&pre, &post);
                acc.truth.push(rec.state_at(test_start));
            }
        },
        |a, b| {
            a.sums.extend(&b.sums);
            a.truth.extend(b.truth);
        },
    );
    let dual = tune_dual_thresholds(&one.sums, cfg.postselect.target_retained)?;
    let labels = postselect(&one.sums, dual.lower, dual.upper)?;
    let n_retained = labels.iter().filter(|l| l.is_some()).count() as u64;
    if n_retained == 0 {
        return Err(Error::Empty("post-selected trials"));
    }
    let truth_matches = labels
        .iter()
        .zip(&one.truth)
        .filter(|(l, t)| **l == Some(**t))
        .count() as u64;

    let hist = collect_histograms(exec, &src, cfg.n_pixels(), &QUNYBBLE_CAL_FRAMES, |i, _| {
        labels[i as usize]
    });
    let order = pixel_order(cfg, &imaging, &hist)?;
    let (n_min, n_max) = (cfg.classify.n_min, cfg.classify.n_max);
    let n_count = n_max - n_min + 1;
    let d0 = fit(cfg, &hist, &order, n_max, 0)?;
    let d2 = fit(cfg, &hist, &order, n_max, 2.min(n_ions - 1))?;
    let d3 = fit(cfg, &hist, &order, n_max, 3.min(n_ions - 1))?;
    let max_iter = cfg.classify.max_iter;

    let slot = |k: usize, ni: usize, s: usize| (k * n_count + ni) * 2 + s;
    let three = exec.fold(
        src.len(),
        || PassThree {
            cal: SumHists::new(n_ions * n_count * 2),
            test: SumHists::new(n_ions * n_count * 2),
            ml: vec![ErrorCounts::default(); n_count],
            mn: vec![ErrorCounts::default(); n_count],
            mn3: vec![ErrorCounts::default(); n_count],
        },
        |acc, range| {
            let mut rec = src.record();
            for i in range {
                let Some(label) = labels[i as usize] else {
                    continue;
                };
                src.fill(i, &mut rec);
                for k in 0..n_ions {
                    let s = label.get(k).is_dark() as usize;
                    let ranks = &order.ranks[k];
                    for &f in &QUNYBBLE_CAL_FRAMES {
                        let c = &rec.frames[f].counts;
                        let mut sum = 0u64;
                        for n in 1..=n_max {
                            sum += c[ranks[n - 1]] as u64;
                            if n >= n_min {
                                acc.cal.add(slot(k, n - n_min, s), sum);
                            }
                        }
                    }
                    let c = &rec.frames[QUNYBBLE_TEST_FRAME].counts;
                    let mut sum = 0u64;
                    for n in 1..=n_max {
                        sum += c[ranks[n - 1]] as u64;
                        if n >= n_min {
                            acc.test.add(slot(k, n - n_min, s), sum);
                        }
                    }
                }
                let c = &rec.frames[QUNYBBLE_TEST_FRAME].counts;
                let t0 = LikelihoodTable::new(c, &d0, n_max).expect("ROI within calibration");
                let t2 = LikelihoodTable::new(c, &d2, n_max).expect("ROI within calibration");
                let t3 = LikelihoodTable::new(c, &d3, n_max).expect("ROI within calibration");
                for n in n_min..=n_max {
                    let ni = n - n_min;
                    let mut m = RegisterState::all_bright(n_ions);
                    for k in 0..n_ions {
                        m = m.with(k, decide(t0.llr(k, 0, n)));
                    }
                    acc.ml[ni].add_register(label, m);
                    acc.mn[ni].add_register(label, t2.iterative(n, max_iter).state);
                    acc.mn3[ni].add_register(label, t3.iterative(n, max_iter).state);
                }
            }
        },
        |a, b| {
            a.cal.merge(b.cal);
            a.test.merge(b.test);
            merge_counts(&mut a.ml, &b.ml);
            merge_counts(&mut a.mn, &b.mn);
            merge_counts(&mut a.mn3, &b.mn3);
        },
    );

    let (total, sub) = (cfg.trials, subtraction(cfg));
    let report = |name: &str, n: usize, c: &ErrorCounts| -> Result<EpsilonReport> {
        Ok(EpsilonReport::from_counts(name, n, c, sub)?.with_retention(total, n_retained))
    };
    let mut threshold = Vec::with_capacity(n_count);
    let (mut ml, mut iterative, mut iterative3) = (Vec::new(), Vec::new(), Vec::new());
    for ni in 0..n_count {
        let n = n_min + ni;
        let mut counts = ErrorCounts::default();
        for k in 0..n_ions {
            let (_, c) = threshold_counts(
                three.cal.get(slot(k, ni, 0)),
                three.cal.get(slot(k, ni, 1)),
                three.test.get(slot(k, ni, 0)),
                three.test.get(slot(k, ni, 1)),
            )?;
            counts.merge(&c);
        }
        threshold.push(report("T", n, &counts)?);
        ml.push(report("M", n, &three.ml[ni])?);
        iterative.push(report("MN", n, &three.mn[ni])?);
        iterative3.push(report("MN3", n, &three.mn3[ni])?);
    }
    Ok(QunybbleResult {
        dual,
        n_trials: total,
        n_retained,
        truth_matches,
        threshold,
        ml,
        iterative,
        iterative3,
        rect_rois: rect,
    })
}

// Cross-talk study

#[derive(Debug, Clone)]
pub struct CrosstalkRow {
    pub diameter_um: f64,
    pub nearest: f64,
    pub next_nearest: Option<f64>,
    pub airy_diameter_um: f64,
    pub airy_nearest: f64,
    pub airy_next_nearest: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CrosstalkResult {
    /// The ion whose pixel order the cumulative curves follow.
    pub roi_ion: usize,
    /// [source ion][rank] from averaged single-ion-bright frames.
    pub measured: Vec<Vec<f64>>,
    /// Same from expected diffraction-limited footprints.
    pub diffraction: Vec<Vec<f64>>,
    pub table: Vec<CrosstalkRow>,
}

pub fn crosstalk_study(cfg: &ExperimentConfig, exec: &Executor) -> Result<CrosstalkResult> {
    let imaging = cfg.imaging_model()?;
    let n_ions = imaging.n_ions();
    if n_ions < 2 {
        return Err(Error::Config("cross-talk study needs at least two ions".into()));
    }
    let camera = cfg.camera_model();
    let t = cfg.protocol.exposure_us * 1e-6;
    let fpi = cfg.crosstalk.frames_per_ion;
    if fpi == 0 {
        return Err(Error::Config("crosstalk.frames_per_ion must be at least 1".into()));
    }
    // Configuration c < n_ions has only ion c bright; c == n_ions is dark.
    let exposures: Vec<PreparedExposure> = (0..=n_ions)
        .map(|c| {
            let bright: Vec<usize> = if c < n_ions { vec![c] } else { vec![] };
            let map = pixel_rate_map(&imaging, &bright)?;
            let photons: Vec<f64> = map.rates.iter().map(|r| r * t).collect();
            Ok(PreparedExposure::new(&camera, &photons))
        })
        .collect::<Result<_>>()?;
    let n_pixels = cfg.n_pixels();
    let n_configs = n_ions + 1;
    let sums = exec.fold(
        n_configs as u64 * fpi,
        || vec![0u64; n_configs * n_pixels],
        |acc, range| {
            let mut frame = vec![0u32; n_pixels];
            for i in range {
                let c = (i / fpi) as usize;
                let mut rng = stream_for(cfg.seed, i, "crosstalk");
                exposures[c].sample_into(&camera, &mut rng, &mut frame);
                for (a, &v) in acc[c * n_pixels..(c + 1) * n_pixels].iter_mut().zip(&frame) {
                    *a += v as u64;
                }
            }
        },
        |a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        },
    );
    let mean = |c: usize| -> Vec<f64> {
        sums[c * n_pixels..(c + 1) * n_pixels]
            .iter()
            .map(|&s| s as f64 / fpi as f64)
            .collect()
    };
    let dark = mean(n_ions);
    let attributable: Vec<Vec<f64>> = (0..n_ions)
        .map(|k| mean(k).iter().zip(&dark).map(|(a, b)| a - b).collect())
        .collect();
    let roi_ion = 1.min(n_ions - 1);
    let order = brightness_order(&attributable)?;
    let measured = cumulative_signal(&order, roi_ion, &attributable);

    let scale = cfg.crosstalk.diffraction_spacing_um / cfg.geometry.spacing_um;
    let airy_psf = PointSpreadFunction::airy(
        cfg.psf.wavelength_nm * 1e-9,
        cfg.psf.numerical_aperture,
    )?;
    let mut airy = ImagingModel::linear_chain(
        &cfg.offsets_um().iter().map(|o| o * scale).collect::<Vec<_>>(),
        airy_psf,
        cfg.geometry.pixel_pitch_um * scale,
        imaging.width,
        imaging.height,
        imaging.bright_rate_per_s,
    );
    for (a, p) in airy.ion_positions_um.iter_mut().zip(&imaging.ion_positions_um) {
        a[1] = p[1] * scale;
    }
    airy.subsamples = 8;
    let footprints = airy.footprints()?;
    let airy_order = brightness_order(&footprints)?;
    let diffraction = cumulative_signal(&airy_order, roi_ion, &footprints);

    let nearest = if roi_ion + 1 < n_ions { roi_ion + 1 } else { roi_ion - 1 };
    let next = (roi_ion + 2 < n_ions).then_some(roi_ion + 2);
    let table = cfg
        .crosstalk
        .roi_diameters_um
        .iter()
        .map(|&d| {
            Ok(CrosstalkRow {
                diameter_um: d,
                nearest: relative_crosstalk(&imaging, roi_ion, nearest, d)?,
                next_nearest: next.map(|j| relative_crosstalk(&imaging, roi_ion, j, d)).transpose()?,
                airy_diameter_um: d * scale,
                airy_nearest: relative_crosstalk(&airy, roi_ion, nearest, d * scale)?,
                airy_next_nearest: next
                    .map(|j| relative_crosstalk(&airy, roi_ion, j, d * scale))
                    .transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrosstalkResult {
        roi_ion,
        measured,
        diffraction,
        table,
    })
}

// Bright-signal oracle

fn ln_poisson(k: u64, mu: f64) -> f64 {
    if mu == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    -mu + k as f64 * mu.ln() - libm::lgamma(k as f64 + 1.0)
}

/// Minimum over integer thresholds of the mean of the two error rates for
/// Poisson bright and dark sums.
pub fn poisson_overlap_error(mu_bright: f64, mu_dark: f64) -> f64 {
    let top = (mu_bright + 20.0 * mu_bright.sqrt() + 50.0).ceil() as u64;
    let pmf = |mu: f64| -> Vec<f64> { (0..=top).map(|k| ln_poisson(k, mu).exp()).collect() };
    let (pb, pd) = (pmf(mu_bright), pmf(mu_dark));
    let mut b_below = 0.0;
    let mut d_above: f64 = pd.iter().sum();
    let mut best = 0.5 * (b_below + d_above);
    for theta in 1..=top as usize {
        b_below += pb[theta - 1];
        d_above -= pd[theta - 1];
        best = best.min(0.5 * (b_below + d_above.max(0.0)));
    }
    best
}

/// Mean ROI sums, bright and dark, for a signal `s` (counts per 400 us,
/// effective-QE units) over the `ORACLE_ROI` brightest pixels of ion 0.
fn oracle_means(cfg: &ExperimentConfig, fraction: f64, s: f64) -> (f64, f64) {
    let scale = cfg.protocol.exposure_us * 1e-6 / super::config::REFERENCE_EXPOSURE_S;
    let dark = ORACLE_ROI as f64 * cfg.camera.cic_per_pixel;
    (s * scale * fraction + dark, dark)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalOracle {
    /// Share of an ion's light in its brightest [`ORACLE_ROI`] pixels.
    pub roi_fraction: f64,
    /// Smallest signal meeting [`ORACLE_TARGET_ERROR`].
    pub min_counts_per_400us: f64,
    /// Predicted decay-free error at the configured signal.
    pub error_at_configured: f64,
}

/// Histogram-overlap oracle for the bright signal: bisection on the signal
/// until the decay-free Poisson error at ROI size 30 drops below 1e-5.
pub fn bright_signal_oracle(cfg: &ExperimentConfig) -> Result<SignalOracle> {
    let imaging = cfg.imaging_model()?;
    let mut fp = imaging.ion_footprint(0)?;
    fp.sort_by(|a, b| b.total_cmp(a));
    let fraction: f64 = fp.iter().take(ORACLE_ROI).sum();
    let err = |s: f64| {
        let (b, d) = oracle_means(cfg, fraction, s);
        poisson_overlap_error(b, d)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while err(hi) >= ORACLE_TARGET_ERROR {
        hi *= 2.0;
        if hi > 1e7 {
            return Err(Error::InvalidModel("no bright signal reaches the oracle target".into()));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if err(mid) < ORACLE_TARGET_ERROR {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(SignalOracle {
        roi_fraction: fraction,
        min_counts_per_400us: hi,
        error_at_configured: err(cfg.signal.bright_counts_per_400us),
    })
}
