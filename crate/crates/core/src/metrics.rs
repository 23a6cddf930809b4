//! Error accounting, post-selection and CSV reports.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::{IonState, RegisterState};

/// Counts of classification outcomes split by true state. Merging is plain
/// integer addition, so reductions are order independent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub bright_trials: u64,
    pub bright_errors: u64,
    pub dark_trials: u64,
    pub dark_errors: u64,
}

impl ErrorCounts {
    #[inline]
    pub fn add(&mut self, truth: IonState, verdict: IonState) {
        match truth {
            IonState::Bright => {
                self.bright_trials += 1;
                self.bright_errors += (verdict != truth) as u64;
            }
            IonState::Dark => {
                self.dark_trials += 1;
                self.dark_errors += (verdict != truth) as u64;
            }
        }
    }

    pub fn add_register(&mut self, truth: RegisterState, verdict: RegisterState) {
        for k in 0..truth.n_ions() {
            self.add(truth.get(k), verdict.get(k));
        }
    }

    pub fn merge(&mut self, other: &ErrorCounts) {
        self.bright_trials += other.bright_trials;
        self.bright_errors += other.bright_errors;
        self.dark_trials += other.dark_trials;
        self.dark_errors += other.dark_errors;
    }

    pub fn trials(&self) -> u64 {
        self.bright_trials + self.dark_trials
    }

    pub fn errors(&self) -> u64 {
        self.bright_errors + self.dark_errors
    }
}

fn binomial_sigma(p: f64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonReport {
    pub method: String,
    pub n: usize,
    pub epsilon: f64,
    pub epsilon_b: f64,
    pub epsilon_d: f64,
    pub sigma: f64,
    pub sigma_b: f64,
    pub sigma_d: f64,
    /// Per-qubit error averaged over every qubit trial.
    pub epsilon_x: f64,
    pub sigma_x: f64,
    /// Qubit trials classified.
    pub n_trials: u64,
    /// Register trials before and after post-selection.
    pub n_total: u64,
    pub n_retained: u64,
    pub n_rejected: u64,
    pub subtracted_prep_error: Option<f64>,
    /// Mean pixels (adaptive) or exposures (time-resolved) consumed.
    pub mean_used: Option<f64>,
}

impl EpsilonReport {
    /// Builds a report from error counts. A known preparation-error
    /// contribution to epsilon is removed from the dark error (which is
    /// where shelving failures land), keeping epsilon = (e_B + e_D) / 2.
    pub fn from_counts(
        method: &str,
        n: usize,
        counts: &ErrorCounts,
        subtract_prep_error: Option<f64>,
    ) -> Result<Self> {
        if counts.bright_trials == 0 && counts.dark_trials == 0 {
            return Err(Error::Empty("verdicts"));
        }
        let frac = |e: u64, t: u64| if t == 0 { 0.0 } else { e as f64 / t as f64 };
        let epsilon_b = frac(counts.bright_errors, counts.bright_trials);
        let mut epsilon_d = frac(counts.dark_errors, counts.dark_trials);
        if let Some(s) = subtract_prep_error {
            epsilon_d = (epsilon_d - 2.0 * s).max(0.0);
        }
        let sigma_b = binomial_sigma(epsilon_b, counts.bright_trials);
        let sigma_d = binomial_sigma(epsilon_d, counts.dark_trials);
        let epsilon_x = frac(counts.errors(), counts.trials());
        Ok(Self {
            method: method.to_string(),
            n,
            epsilon: 0.5 * (epsilon_b + epsilon_d),
            epsilon_b,
            epsilon_d,
            sigma: 0.5 * sigma_b.hypot(sigma_d),
            sigma_b,
            sigma_d,
            epsilon_x,
            sigma_x: binomial_sigma(epsilon_x, counts.trials()),
            n_trials: counts.trials(),
            n_total: counts.trials(),
            n_retained: counts.trials(),
            n_rejected: 0,
            subtracted_prep_error: subtract_prep_error,
            mean_used: None,
        })
    }

    pub fn with_retention(mut self, total: u64, retained: u64) -> Self {
        self.n_total = total;
        self.n_retained = retained;
        self.n_rejected = total - retained;
        self
    }

    pub fn with_mean_used(mut self, mean: f64) -> Self {
        self.mean_used = Some(mean);
        self
    }

    pub fn retained_fraction(&self) -> f64 {
        if self.n_total == 0 {
            0.0
        } else {
            self.n_retained as f64 / self.n_total as f64
        }
    }
}

/// Single-qubit style accounting over aligned verdicts and truths.
pub fn compute_epsilon(
    method: &str,
    n: usize,
    verdicts: &[RegisterState],
    truths: &[RegisterState],
    subtract_prep_error: Option<f64>,
) -> Result<EpsilonReport> {
    if verdicts.len() != truths.len() {
        return Err(Error::InvalidModel("verdicts and truths not aligned".into()));
    }
    let mut c = ErrorCounts::default();
    for (v, t) in verdicts.iter().zip(truths) {
        c.add_register(*t, *v);
    }
    EpsilonReport::from_counts(method, n, &c, subtract_prep_error)
}

/// One report per ROI size; `classify(trial, n)` gives the verdict.
pub fn sweep_roi<F>(
    method: &str,
    ns: &[usize],
    truths: &[RegisterState],
    mut classify: F,
) -> Result<Vec<EpsilonReport>>
where
    F: FnMut(usize, usize) -> Result<RegisterState>,
{
    ns.iter()
        .map(|&n| {
            let mut c = ErrorCounts::default();
            for (i, t) in truths.iter().enumerate() {
                c.add_register(*t, classify(i, n)?);
            }
            EpsilonReport::from_counts(method, n, &c, None)
        })
        .collect()
}

/// Per ion per trial, the summed pre (exposures 2+3) and post (5+6)
/// counts, flattened as [trial * n_ions + ion].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrePost {
    pub n_ions: usize,
    pub pre: Vec<u64>,
    pub post: Vec<u64>,
}

impl PrePost {
    pub fn new(n_ions: usize) -> Self {
        Self {
            n_ions,
            ..Default::default()
        }
    }

    pub fn n_trials(&self) -> usize {
        if self.n_ions == 0 {
            0
        } else {
            self.pre.len() / self.n_ions
        }
    }

    pub fn push(&mut self, pre: &[u64], post: &[u64]) {
        self.pre.extend_from_slice(pre);
        self.post.extend_from_slice(post);
    }

    pub fn extend(&mut self, other: &PrePost) {
        self.pre.extend_from_slice(&other.pre);
        self.post.extend_from_slice(&other.post);
    }
}

/// Keeps an ion when pre and post are both at or above `upper` (bright) or
/// both below `lower` (dark); keeps a trial when all its ions are kept.
pub fn postselect(sums: &PrePost, lower: u64, upper: u64) -> Result<Vec<Option<RegisterState>>> {
    if lower > upper {
        return Err(Error::InvalidModel(format!(
            "lower threshold {lower} above upper {upper}"
        )));
    }
    let k = sums.n_ions;
    Ok((0..sums.n_trials())
        .map(|t| {
            let mut state = RegisterState::all_bright(k);
            for ion in 0..k {
                let (a, b) = (sums.pre[t * k + ion], sums.post[t * k + ion]);
                if a >= upper && b >= upper {
                    continue;
                } else if a < lower && b < lower {
                    state = state.with(ion, IonState::Dark);
                } else {
                    return None;
                }
            }
            Some(state)
        })
        .collect())
}

pub fn retained_fraction(selected: &[Option<RegisterState>]) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    selected.iter().filter(|s| s.is_some()).count() as f64 / selected.len() as f64
}

/// Otsu threshold of a histogram: the t maximising the between-class
/// variance of {values < t} and {values >= t}.
pub fn otsu_threshold(hist: &[u64]) -> Result<u64> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::Empty("post-selection histogram"));
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let (mut w0, mut s0) = (0u64, 0.0f64);
    let mut best = (f64::NEG_INFINITY, 0u64);
    for t in 1..hist.len() {
        w0 += hist[t - 1];
        s0 += (t - 1) as f64 * hist[t - 1] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = s0 / w0 as f64;
        let m1 = (sum_all - s0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1).powi(2);
        if between > best.0 {
            best = (between, t as u64);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualThresholds {
    pub single: u64,
    pub lower: u64,
    pub upper: u64,
    pub retained_fraction: f64,
    pub single_retained_fraction: f64,
}

/// Threshold pairs symmetric about the single threshold (Otsu on the
/// pooled, unlabelled pre and post sums), widened one count at a time
/// until the retained fraction crosses `target`; of the two gaps straddling
/// the crossing, the one closer to `target` is returned.
pub fn tune_dual_thresholds(sums: &PrePost, target: f64) -> Result<DualThresholds> {
    let max = sums.pre.iter().chain(&sums.post).copied().max().unwrap_or(0) as usize;
    let mut hist = vec![0u64; max + 1];
    for &v in sums.pre.iter().chain(&sums.post) {
        hist[v as usize] += 1;
    }
    let single = otsu_threshold(&hist)?;
    let frac = |g: u64| -> Result<f64> {
        Ok(retained_fraction(&postselect(
            sums,
            single.saturating_sub(g),
            single + g,
        )?))
    };
    let single_frac = frac(0)?;
    let mut prev = (0u64, single_frac);
    let mut chosen = prev;
    if single_frac > target {
        for g in 1..=single.max(max as u64) + 1 {
            let f = frac(g)?;
            if f <= target {
                chosen = if (prev.1 - target).abs() < (f - target).abs() {
                    prev
                } else {
                    (g, f)
                };
                break;
            }
            prev = (g, f);
            chosen = prev;
        }
    }
    Ok(DualThresholds {
        single,
        lower: single.saturating_sub(chosen.0),
        upper: single + chosen.0,
        retained_fraction: chosen.1,
        single_retained_fraction: single_frac,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportRow {
    method: String,
    #[serde(rename = "N")]
    n: usize,
    epsilon: f64,
    #[serde(rename = "epsilon_B")]
    epsilon_b: f64,
    #[serde(rename = "epsilon_D")]
    epsilon_d: f64,
    sigma: f64,
    n_trials: u64,
    retained_fraction: f64,
    #[serde(rename = "epsilon_X")]
    epsilon_x: f64,
    #[serde(rename = "sigma_X")]
    sigma_x: f64,
    mean_used: Option<f64>,
}

pub fn write_reports_csv<W: Write>(w: W, reports: &[EpsilonReport]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in reports {
        wtr.serialize(ReportRow {
            method: r.method.clone(),
            n: r.n,
            epsilon: r.epsilon,
            epsilon_b: r.epsilon_b,
            epsilon_d: r.epsilon_d,
            sigma: r.sigma,
            n_trials: r.n_trials,
            retained_fraction: r.retained_fraction(),
            epsilon_x: r.epsilon_x,
            sigma_x: r.sigma_x,
            mean_used: r.mean_used,
        })
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// One verdict per (trial, ion) as emitted by the `classify` step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub method: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub trial: u64,
    pub ion: usize,
    pub truth: u8,
    pub verdict: u8,
    #[serde(rename = "R")]
    pub r: f64,
    pub pixels_used: usize,
    pub iterations: usize,
}

pub fn write_verdicts_csv<W: Write>(w: W, rows: &[VerdictRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_verdicts_csv<R: Read>(r: R) -> Result<Vec<VerdictRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(csv_err))
        .collect()
}

/// Groups verdict rows by (method, N), in order of first appearance, and
/// builds one report per group.
pub fn reports_from_verdicts(rows: &[VerdictRow]) -> Result<Vec<EpsilonReport>> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    let mut counts: Vec<ErrorCounts> = Vec::new();
    let mut used: Vec<u64> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.n);
        let i = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                counts.push(ErrorCounts::default());
                used.push(0);
                keys.len() - 1
            }
        };
        let st = |b: u8| if b == 0 { IonState::Bright } else { IonState::Dark };
        counts[i].add(st(r.truth), st(r.verdict));
        used[i] += r.pixels_used as u64;
    }
    keys.iter()
        .zip(&counts)
        .zip(&used)
        .map(|(((m, n), c), u)| {
            Ok(EpsilonReport::from_counts(m, *n, c, None)?
                .with_mean_used(*u as f64 / c.trials() as f64))
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("CSV", e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(x: &str) -> RegisterState {
        RegisterState::parse(x).unwrap()
    }

    #[test]
    fn perfect_verdicts() {
        let t = vec![s("0"), s("1"), s("0")];
        let r = compute_epsilon("ml", 5, &t, &t, None).unwrap();
        assert_eq!((r.epsilon, r.sigma), (0.0, 0.0));
        assert!(compute_epsilon("ml", 5, &[], &[], None).is_err());
    }

    #[test]
    fn hand_counted_errors() {
        // 4 bright with 1 wrong, 5 dark with 2 wrong
        let truth: Vec<_> = ["0", "0", "0", "0", "1", "1", "1", "1", "1"].iter().map(|x| s(x)).collect();
        let verd: Vec<_> = ["1", "0", "0", "0", "0", "0", "1", "1", "1"].iter().map(|x| s(x)).collect();
        let r = compute_epsilon("t", 1, &verd, &truth, None).unwrap();
        assert_eq!(r.epsilon_b, 0.25);
        assert_eq!(r.epsilon_d, 0.4);
        assert_eq!(r.epsilon, 0.5 * (0.25 + 0.4));
        assert_eq!(r.epsilon_x, 3.0 / 9.0);
        let sub = compute_epsilon("t", 1, &verd, &truth, Some(0.05)).unwrap();
        assert!((sub.epsilon - (r.epsilon - 0.05)).abs() < 1e-15);
        assert_eq!(sub.epsilon, 0.5 * (sub.epsilon_b + sub.epsilon_d));
    }

    #[test]
    fn paper_style_report_format() {
        // 103744 trials split evenly, no bright errors, 9 dark errors
        let c = ErrorCounts {
            bright_trials: 51_872,
            bright_errors: 0,
            dark_trials: 51_872,
            dark_errors: 9,
        };
        let r = EpsilonReport::from_counts("threshold", 28, &c, None).unwrap();
        assert_eq!(r.epsilon_b, 0.0);
        assert!((r.epsilon - 0.87e-4).abs() < 0.01e-4);
        assert!((r.sigma - 0.29e-4).abs() < 0.01e-4);
    }

    #[test]
    fn sigma_covers_truth_about_68_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = 0.05;
        let n = 2000;
        let mut covered = 0;
        for _ in 0..1000 {
            let errs = (0..n).filter(|_| rng.random::<f64>() < p).count() as u64;
            let c = ErrorCounts {
                bright_trials: n,
                bright_errors: errs,
                ..Default::default()
            };
            let r = EpsilonReport::from_counts("x", 1, &c, None).unwrap();
            covered += ((r.epsilon_b - p).abs() <= r.sigma_b) as usize;
        }
        assert!((630..=730).contains(&covered), "{covered}");
    }

    #[test]
    fn single_threshold_needs_only_agreement() {
        let mut pp = PrePost::new(2);
        pp.push(&[50, 2], &[60, 1]);
        pp.push(&[50, 2], &[10, 1]); // ion 0 decayed or flipped
        pp.push(&[31, 29], &[32, 28]); // near threshold
        let single = postselect(&pp, 30, 30).unwrap();
        assert_eq!(single, vec![Some(s("01")), None, Some(s("01"))]);
        let dual = postselect(&pp, 20, 40).unwrap();
        assert_eq!(dual, vec![Some(s("01")), None, None]);
        assert!(postselect(&pp, 41, 40).is_err());
    }

    #[test]
    fn otsu_splits_two_clusters() {
        let mut h = vec![0u64; 60];
        h[1] = 100;
        h[2] = 80;
        h[40] = 90;
        h[45] = 70;
        let t = otsu_threshold(&h).unwrap();
        assert!((3..=40).contains(&t), "{t}");
    }

    #[test]
    fn report_csv_columns() {
        let c = ErrorCounts {
            bright_trials: 10,
            bright_errors: 1,
            dark_trials: 10,
            dark_errors: 0,
        };
        let r = EpsilonReport::from_counts("ml", 7, &c, None).unwrap().with_retention(25, 20);
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with(
            "method,N,epsilon,epsilon_B,epsilon_D,sigma,n_trials,retained_fraction"
        ));
        assert!(text.lines().nth(1).unwrap().starts_with("ml,7,0.05,0.1,0.0,"));
    }

    #[test]
    fn verdict_rows_round_trip_to_reports() {
        let rows: Vec<VerdictRow> = (0..10)
            .map(|i| VerdictRow {
                method: "ml".into(),
                n: 3,
                trial: i,
                ion: 0,
                truth: (i % 2) as u8,
                verdict: if i == 3 { 0 } else { (i % 2) as u8 },
                r: 1.5,
                pixels_used: 3,
                iterations: 0,
            })
            .collect();
        let mut buf = Vec::new();
        write_verdicts_csv(&mut buf, &rows).unwrap();
        let back = read_verdicts_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
        let rep = reports_from_verdicts(&back).unwrap();
        assert_eq!(rep.len(), 1);
        assert_eq!(rep[0].epsilon_d, 0.2);
    }

    proptest! {
        #[test]
        fn epsilon_identity_and_bounds(
            bt in 1u64..10_000, bd in 1u64..10_000,
            be in 0u64..10_000, de in 0u64..10_000,
        ) {
            let c = ErrorCounts {
                bright_trials: bt,
                bright_errors: be.min(bt),
                dark_trials: bd,
                dark_errors: de.min(bd),
            };
            let r = EpsilonReport::from_counts("p", 1, &c, None).unwrap();
            prop_assert_eq!(r.epsilon, 0.5 * (r.epsilon_b + r.epsilon_d));
            for v in [r.epsilon, r.epsilon_b, r.epsilon_d, r.epsilon_x] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn retained_plus_rejected_is_total(total in 1u64..1000, kept in 0u64..1000) {
            let kept = kept.min(total);
            let c = ErrorCounts { bright_trials: 1, ..Default::default() };
            let r = EpsilonReport::from_counts("p", 1, &c, None).unwrap().with_retention(total, kept);
            prop_assert_eq!(r.n_retained + r.n_rejected, r.n_total);
        }
    }
}
