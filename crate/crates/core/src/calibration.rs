//! Per-pixel count statistics from labelled calibration frames.
//!
//! Frames are reduced into [`StateHistograms`] (count histograms and sums
//! per full register state and pixel). Everything downstream, brightness
//! order and the fitted [`Distributions`], is a function of those
//! histograms only.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::register::{IonState, RegisterState};

/// Per ion, pixel indices in order of decreasing brightness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelOrder {
    pub ranks: Vec<Vec<usize>>,
}

impl PixelOrder {
    pub fn n_ions(&self) -> usize {
        self.ranks.len()
    }

    pub fn roi(&self, ion: usize, n: usize) -> &[usize] {
        &self.ranks[ion][..n.min(self.ranks[ion].len())]
    }
}

/// Sorts pixels by decreasing attributable brightness, ties by row-major
/// index. `attributable[k]` is ion k's mean signal per pixel with the
/// background removed.
pub fn brightness_order(attributable: &[Vec<f64>]) -> Result<PixelOrder> {
    let ranks = attributable
        .iter()
        .enumerate()
        .map(|(k, img)| {
            if !img.iter().any(|&v| v > 0.0) {
                return Err(Error::NoSignal(k));
            }
            let mut idx: Vec<usize> = (0..img.len()).collect();
            idx.sort_by(|&a, &b| img[b].total_cmp(&img[a]).then(a.cmp(&b)));
            Ok(idx)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PixelOrder { ranks })
}

/// Brightness order from an all-bright "check" image. Each ion first takes
/// the pixels nearest to it (by pixel-centre distance to `ion_pixels`,
/// fractional pixel coordinates) in order of decreasing brightness, then
/// all remaining pixels by increasing distance.
pub fn check_order(
    check_mean: &[f64],
    background: f64,
    width: usize,
    ion_pixels: &[[f64; 2]],
) -> Result<PixelOrder> {
    let dist = |p: usize, k: usize| {
        let (x, y) = ((p % width) as f64 + 0.5, (p / width) as f64 + 0.5);
        (x - ion_pixels[k][0]).hypot(y - ion_pixels[k][1])
    };
    let owner = |p: usize| {
        (0..ion_pixels.len())
            .min_by(|&a, &b| dist(p, a).total_cmp(&dist(p, b)).then(a.cmp(&b)))
            .unwrap()
    };
    let ranks = (0..ion_pixels.len())
        .map(|k| {
            let (mut own, mut rest): (Vec<usize>, Vec<usize>) =
                (0..check_mean.len()).partition(|&p| owner(p) == k);
            if !own.iter().any(|&p| check_mean[p] > background) {
                return Err(Error::NoSignal(k));
            }
            own.sort_by(|&a, &b| check_mean[b].total_cmp(&check_mean[a]).then(a.cmp(&b)));
            rest.sort_by(|&a, &b| dist(a, k).total_cmp(&dist(b, k)).then(a.cmp(&b)));
            own.extend(rest);
            Ok(own)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PixelOrder { ranks })
}

/// Count histograms and count sums for every (full register state, pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct StateHistograms {
    n_ions: usize,
    n_pixels: usize,
    samples: Vec<u64>,
    sums: Vec<u64>,
    hist: Vec<Vec<u64>>,
}

impl StateHistograms {
    pub fn new(n_ions: usize, n_pixels: usize) -> Self {
        let n_states = 1usize << n_ions;
        Self {
            n_ions,
            n_pixels,
            samples: vec![0; n_states],
            sums: vec![0; n_states * n_pixels],
            hist: vec![Vec::new(); n_states * n_pixels],
        }
    }

    pub fn n_ions(&self) -> usize {
        self.n_ions
    }

    pub fn n_pixels(&self) -> usize {
        self.n_pixels
    }

    pub fn add(&mut self, state: RegisterState, counts: &[u32]) {
        debug_assert_eq!(counts.len(), self.n_pixels);
        let s = state.mask() as usize;
        self.samples[s] += 1;
        let base = s * self.n_pixels;
        for (p, &c) in counts.iter().enumerate() {
            self.sums[base + p] += c as u64;
            let h = &mut self.hist[base + p];
            let c = c as usize;
            if h.len() <= c {
                h.resize(c + 1, 0);
            }
            h[c] += 1;
        }
    }

    pub fn merge(&mut self, other: &StateHistograms) {
        assert_eq!((self.n_ions, self.n_pixels), (other.n_ions, other.n_pixels));
        for (a, b) in self.samples.iter_mut().zip(&other.samples) {
            *a += b;
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.hist.iter_mut().zip(&other.hist) {
            if a.len() < b.len() {
                a.resize(b.len(), 0);
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn samples(&self, state: RegisterState) -> u64 {
        self.samples[state.mask() as usize]
    }

    pub fn histogram(&self, state_mask: u32, pixel: usize) -> &[u64] {
        &self.hist[state_mask as usize * self.n_pixels + pixel]
    }

    /// Mean count per pixel over all frames whose state satisfies `pred`.
    pub fn mean_image(&self, pred: impl Fn(u32) -> bool) -> Option<Vec<f64>> {
        let mut total = 0u64;
        let mut acc = vec![0u64; self.n_pixels];
        for m in 0..self.samples.len() {
            if pred(m as u32) && self.samples[m] > 0 {
                total += self.samples[m];
                let base = m * self.n_pixels;
                for (a, s) in acc.iter_mut().zip(&self.sums[base..base + self.n_pixels]) {
                    *a += s;
                }
            }
        }
        (total > 0).then(|| acc.iter().map(|&a| a as f64 / total as f64).collect())
    }

    /// Per ion: mean image with the ion bright minus mean image with it
    /// dark, the remaining ions mixed as they occurred.
    pub fn differential_images(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.n_ions)
            .map(|k| {
                let b = self.mean_image(|m| m >> k & 1 == 0);
                let d = self.mean_image(|m| m >> k & 1 == 1);
                match (b, d) {
                    (Some(b), Some(d)) => Ok(b.iter().zip(&d).map(|(x, y)| x - y).collect()),
                    _ => Err(Error::NoSignal(k)),
                }
            })
            .collect()
    }
}

/// The `arity` nearest other ions of each ion, nearest first, ties by
/// index. Positions are along the chain axis.
pub fn nearest_neighbors(positions: &[f64], arity: usize) -> Result<Vec<Vec<usize>>> {
    if arity >= positions.len() && arity > 0 {
        return Err(Error::InvalidModel(format!(
            "neighbour arity {arity} needs more than {} ions",
            positions.len()
        )));
    }
    Ok((0..positions.len())
        .map(|k| {
            let mut others: Vec<usize> = (0..positions.len()).filter(|&j| j != k).collect();
            others.sort_by(|&a, &b| {
                let da = (positions[a] - positions[k]).abs();
                let db = (positions[b] - positions[k]).abs();
                da.total_cmp(&db).then(a.cmp(&b))
            });
            others.truncate(arity);
            others
        })
        .collect())
}

/// Neighbour-state index for `ion` within a register state: bit j set when
/// neighbour j is dark.
pub fn neighbor_index(neighbors: &[usize], state_mask: u32) -> usize {
    neighbors
        .iter()
        .enumerate()
        .fold(0, |nu, (j, &n)| nu | ((state_mask >> n & 1) as usize) << j)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub alpha: f64,
    pub floor: f64,
    pub min_samples: u64,
    /// Count values past the observed maximum that still get smoothed mass.
    pub pad: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            floor: 1e-9,
            min_samples: 100,
            pad: 5,
        }
    }
}

/// Smoothed probability mass function over counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    probs: Vec<f64>,
    logs: Vec<f64>,
    floor_log: f64,
}

impl Pmf {
    /// Add-alpha smoothing over [0, max observed + pad]; `floor` beyond.
    pub fn from_histogram(hist: &[u64], alpha: f64, floor: f64, pad: usize) -> Self {
        let last = hist.iter().rposition(|&c| c > 0).unwrap_or(0);
        let k = last + 1 + pad;
        let total: u64 = hist.iter().sum();
        let denom = total as f64 + alpha * k as f64;
        let probs: Vec<f64> = (0..k)
            .map(|n| (hist.get(n).copied().unwrap_or(0) as f64 + alpha) / denom)
            .collect();
        Self::from_probs(probs, floor)
    }

    pub fn from_probs(probs: Vec<f64>, floor: f64) -> Self {
        let logs = probs.iter().map(|p| p.ln()).collect();
        Self {
            probs,
            logs,
            floor_log: floor.ln(),
        }
    }

    #[inline]
    pub fn log_prob(&self, n: u32) -> f64 {
        self.logs
            .get(n as usize)
            .copied()
            .unwrap_or(self.floor_log)
    }

    pub fn prob(&self, n: u32) -> f64 {
        self.probs
            .get(n as usize)
            .copied()
            .unwrap_or(self.floor_log.exp())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(n, p)| n as f64 * p).sum()
    }
}

/// Fitted PMFs per (ion, rank < roi, state, neighbour state).
#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    pub n_ions: usize,
    pub roi: usize,
    pub arity: usize,
    pub alpha: f64,
    pub floor: f64,
    pub neighbors: Vec<Vec<usize>>,
    /// First `roi` pixels of each ion's brightness order.
    pub pixels: Vec<Vec<usize>>,
    pmfs: Vec<Pmf>,
}

impl Distributions {
    pub fn n_nu(&self) -> usize {
        1 << self.arity
    }

    fn index(&self, ion: usize, rank: usize, state: IonState, nu: usize) -> usize {
        ((ion * self.roi + rank) * 2 + state.is_dark() as usize) * self.n_nu() + nu
    }

    pub fn pmf(&self, ion: usize, rank: usize, state: IonState, nu: usize) -> &Pmf {
        &self.pmfs[self.index(ion, rank, state, nu)]
    }

    pub fn pixel(&self, ion: usize, rank: usize) -> usize {
        self.pixels[ion][rank]
    }

    /// Neighbour-state index for `ion` given a full register estimate.
    pub fn nu_of(&self, ion: usize, state: RegisterState) -> usize {
        neighbor_index(&self.neighbors[ion], state.mask())
    }

    /// Writes the calibration archive: a text header, the pixel orders and
    /// neighbour lists, then one CSV row per PMF entry.
    pub fn write_archive<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# ionreadout calibration archive v1")?;
        writeln!(w, "ions={}", self.n_ions)?;
        writeln!(w, "roi={}", self.roi)?;
        writeln!(w, "arity={}", self.arity)?;
        writeln!(w, "alpha={}", self.alpha)?;
        writeln!(w, "floor={:e}", self.floor)?;
        for k in 0..self.n_ions {
            let px: Vec<String> = self.pixels[k].iter().map(|p| p.to_string()).collect();
            writeln!(w, "pixels.{k}={}", px.join(" "))?;
            let nb: Vec<String> = self.neighbors[k].iter().map(|p| p.to_string()).collect();
            writeln!(w, "neighbors.{k}={}", nb.join(" "))?;
        }
        writeln!(w, "ion,rank,state,nu,count,probability")?;
        for ion in 0..self.n_ions {
            for rank in 0..self.roi {
                for state in [IonState::Bright, IonState::Dark] {
                    for nu in 0..self.n_nu() {
                        let pmf = self.pmf(ion, rank, state, nu);
                        for (n, p) in pmf.probs.iter().enumerate() {
                            writeln!(
                                w,
                                "{ion},{rank},{},{nu},{n},{p:e}",
                                state.bit()
                            )?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_archive<R: BufRead>(r: R) -> Result<Self> {
        let bad = |d: String| Error::format("calibration archive", d);
        let mut lines = r.lines();
        let mut header = std::collections::BTreeMap::new();
        loop {
            let line = lines
                .next()
                .ok_or_else(|| bad("missing table".into()))??;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if line == "ion,rank,state,nu,count,probability" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("bad header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String> {
            header.get(k).ok_or_else(|| bad(format!("missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| bad(format!("bad {k}")))
        };
        let n_ions = num("ions")?;
        let roi = num("roi")?;
        let arity = num("arity")?;
        let alpha: f64 = get("alpha")?.parse().map_err(|_| bad("bad alpha".into()))?;
        let floor: f64 = get("floor")?.parse().map_err(|_| bad("bad floor".into()))?;
        let list = |k: String| -> Result<Vec<usize>> {
            get(&k)?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(format!("bad entry in {k}"))))
                .collect()
        };
        let mut pixels = Vec::new();
        let mut neighbors = Vec::new();
        for k in 0..n_ions {
            let p = list(format!("pixels.{k}"))?;
            if p.len() != roi {
                return Err(bad(format!("ion {k} lists {} pixels, expected {roi}", p.len())));
            }
            pixels.push(p);
            neighbors.push(list(format!("neighbors.{k}"))?);
        }
        let n_nu = 1usize << arity;
        let mut tables: Vec<Vec<f64>> = vec![Vec::new(); n_ions * roi * 2 * n_nu];
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("bad row {line:?}")));
            }
            let p = |i: usize| -> Result<usize> {
                f[i].parse().map_err(|_| bad(format!("bad row {line:?}")))
            };
            let (ion, rank, nu, n) = (p(0)?, p(1)?, p(3)?, p(4)?);
            let state = match f[2] {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad(format!("bad state in {line:?}"))),
            };
            let prob: f64 = f[5].parse().map_err(|_| bad(format!("bad row {line:?}")))?;
            if ion >= n_ions || rank >= roi || nu >= n_nu {
                return Err(bad(format!("row out of range {line:?}")));
            }
            let t = &mut tables[((ion * roi + rank) * 2 + state) * n_nu + nu];
            if t.len() != n {
                return Err(bad(format!("counts out of order at {line:?}")));
            }
            t.push(prob);
        }
        if tables.iter().any(|t| t.is_empty()) {
            return Err(bad("missing PMF table".into()));
        }
        Ok(Self {
            n_ions,
            roi,
            arity,
            alpha,
            floor,
            neighbors,
            pixels,
            pmfs: tables.into_iter().map(|t| Pmf::from_probs(t, floor)).collect(),
        })
    }
}

/// Fits PMFs for the first `roi` pixels of each ion's order, conditioned on
/// the ion's state and on the states of its `neighbors`.
pub fn fit_distributions(
    hist: &StateHistograms,
    order: &PixelOrder,
    roi: usize,
    neighbors: &[Vec<usize>],
    opts: &FitOptions,
) -> Result<Distributions> {
    let n_ions = hist.n_ions;
    if order.n_ions() != n_ions || neighbors.len() != n_ions {
        return Err(Error::InvalidModel(
            "pixel order, neighbours and histograms disagree on ion count".into(),
        ));
    }
    if roi == 0 || roi > hist.n_pixels {
        return Err(Error::InvalidModel(format!(
            "ROI size {roi} outside 1..={}",
            hist.n_pixels
        )));
    }
    let arity = neighbors.first().map(|n| n.len()).unwrap_or(0);
    if neighbors.iter().any(|n| n.len() != arity) {
        return Err(Error::InvalidModel("neighbour lists of unequal length".into()));
    }
    let n_nu = 1usize << arity;
    let n_states = 1u32 << n_ions;
    let mut pmfs = Vec::with_capacity(n_ions * roi * 2 * n_nu);
    let mut pixels = Vec::with_capacity(n_ions);
    for ion in 0..n_ions {
        let cells: Vec<Vec<u32>> = (0..2 * n_nu)
            .map(|cell| {
                let (s, nu) = (cell / n_nu, cell % n_nu);
                (0..n_states)
                    .filter(|&m| {
                        (m >> ion & 1) as usize == s && neighbor_index(&neighbors[ion], m) == nu
                    })
                    .collect()
            })
            .collect();
        for (cell, masks) in cells.iter().enumerate() {
            let samples: u64 = masks.iter().map(|&m| hist.samples[m as usize]).sum();
            if samples < opts.min_samples {
                let (s, nu) = (cell / n_nu, cell % n_nu);
                return Err(Error::StarvedCell {
                    ion,
                    state: if s == 0 { "bright" } else { "dark" }.into(),
                    nu: (0..arity)
                        .map(|j| if nu >> j & 1 == 1 { '1' } else { '0' })
                        .collect(),
                    samples,
                    minimum: opts.min_samples,
                });
            }
        }
        let ion_pixels: Vec<usize> = order.roi(ion, roi).to_vec();
        if ion_pixels.len() < roi {
            return Err(Error::InvalidModel(format!("ion {ion} order shorter than {roi}")));
        }
        for &pixel in &ion_pixels {
            for masks in &cells {
                let mut merged: Vec<u64> = Vec::new();
                for &m in masks {
                    let h = hist.histogram(m, pixel);
                    if merged.len() < h.len() {
                        merged.resize(h.len(), 0);
                    }
                    for (a, b) in merged.iter_mut().zip(h) {
                        *a += b;
                    }
                }
                pmfs.push(Pmf::from_histogram(&merged, opts.alpha, opts.floor, opts.pad));
            }
        }
        pixels.push(ion_pixels);
    }
    Ok(Distributions {
        n_ions,
        roi,
        arity,
        alpha: opts.alpha,
        floor: opts.floor,
        neighbors: neighbors.to_vec(),
        pixels,
        pmfs,
    })
}

/// Cumulative share of each ion's signal collected by `roi_ion`'s pixels
/// taken in brightness order. Entry [j][r] is ion j's signal in the first
/// r + 1 pixels divided by ion j's total over the grid.
pub fn cumulative_signal(order: &PixelOrder, roi_ion: usize, images: &[Vec<f64>]) -> Vec<Vec<f64>> {
    images
        .iter()
        .map(|img| {
            let total: f64 = img.iter().sum();
            let mut acc = 0.0;
            order.ranks[roi_ion]
                .iter()
                .map(|&p| {
                    acc += img[p];
                    acc / total
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    #[test]
    fn order_ties_break_row_major() {
        let o = brightness_order(&[vec![1.0, 3.0, 3.0, 0.5]]).unwrap();
        assert_eq!(o.ranks[0], vec![1, 2, 0, 3]);
        assert!(matches!(brightness_order(&[vec![0.0, -1.0]]), Err(Error::NoSignal(0))));
    }

    #[test]
    fn check_order_prefers_own_cell() {
        // two ions on a 4x1 strip at x = 0.5 and 3.5
        let img = [5.0, 4.0, 4.5, 6.0];
        let o = check_order(&img, 0.0, 4, &[[0.5, 0.5], [3.5, 0.5]]).unwrap();
        assert_eq!(o.ranks[0], vec![0, 1, 2, 3]);
        assert_eq!(o.ranks[1], vec![3, 2, 1, 0]);
    }

    #[test]
    fn neighbors_for_chain_of_four() {
        let nb = nearest_neighbors(&[0.0, 14.0, 28.0, 42.0], 2).unwrap();
        assert_eq!(nb, vec![vec![1, 2], vec![0, 2], vec![1, 3], vec![2, 1]]);
        let nb3 = nearest_neighbors(&[0.0, 14.0, 28.0, 42.0], 3).unwrap();
        assert_eq!(nb3[0], vec![1, 2, 3]);
        assert!(nearest_neighbors(&[0.0, 1.0], 2).is_err());
        assert_eq!(neighbor_index(&[1, 2], 0b0100), 0b10);
    }

    #[test]
    fn poisson_fit_is_close_in_total_variation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mu: f64 = 3.0;
        let pois = Poisson::new(mu).unwrap();
        let mut hist = StateHistograms::new(1, 1);
        let bright = RegisterState::all_bright(1);
        for _ in 0..100_000 {
            hist.add(bright, &[pois.sample(&mut rng) as u32]);
        }
        for _ in 0..100 {
            hist.add(RegisterState::all_dark(1), &[0]);
        }
        let order = PixelOrder { ranks: vec![vec![0]] };
        let d = fit_distributions(&hist, &order, 1, &[vec![]], &FitOptions::default()).unwrap();
        let pmf = d.pmf(0, 0, IonState::Bright, 0);
        let mut tv = 0.0;
        let mut p_exact = (-mu).exp();
        for n in 0..40u32 {
            let q = pmf.probs().get(n as usize).copied().unwrap_or(0.0);
            tv += (q - p_exact).abs();
            p_exact *= mu / (n + 1) as f64;
        }
        assert!(tv / 2.0 < 0.02, "TV {}", tv / 2.0);
    }

    #[test]
    fn starved_cell_is_named() {
        let mut hist = StateHistograms::new(1, 1);
        for _ in 0..150 {
            hist.add(RegisterState::all_bright(1), &[3]);
        }
        for _ in 0..10 {
            hist.add(RegisterState::all_dark(1), &[0]);
        }
        let order = PixelOrder { ranks: vec![vec![0]] };
        let e = fit_distributions(&hist, &order, 1, &[vec![]], &FitOptions::default()).unwrap_err();
        match e {
            Error::StarvedCell { ion, state, samples, .. } => {
                assert_eq!((ion, state.as_str(), samples), (0, "dark", 10));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn merge_is_associative_with_add() {
        let mut a = StateHistograms::new(2, 3);
        let mut b = StateHistograms::new(2, 3);
        let mut all = StateHistograms::new(2, 3);
        let s = RegisterState::from_mask(2, 0b10);
        a.add(s, &[1, 2, 3]);
        b.add(s, &[4, 0, 9]);
        all.add(s, &[1, 2, 3]);
        all.add(s, &[4, 0, 9]);
        a.merge(&b);
        assert_eq!(a, all);
    }

    #[test]
    fn archive_round_trip() {
        let mut hist = StateHistograms::new(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..800u32 {
            let s = RegisterState::from_mask(2, i % 4);
            let c: Vec<u32> = (0..4).map(|p| Poisson::new(1.0 + p as f64).unwrap().sample(&mut rng) as u32).collect();
            hist.add(s, &c);
        }
        let order = brightness_order(&[vec![4.0, 3.0, 2.0, 1.0], vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let nb = nearest_neighbors(&[0.0, 1.0], 1).unwrap();
        let d = fit_distributions(&hist, &order, 3, &nb, &FitOptions::default()).unwrap();
        let mut buf = Vec::new();
        d.write_archive(&mut buf).unwrap();
        let back = Distributions::read_archive(buf.as_slice()).unwrap();
        assert_eq!(back.pixels, d.pixels);
        assert_eq!(back.neighbors, d.neighbors);
        for ion in 0..2 {
            for r in 0..3 {
                for s in [IonState::Bright, IonState::Dark] {
                    for nu in 0..2 {
                        assert_eq!(back.pmf(ion, r, s, nu).probs(), d.pmf(ion, r, s, nu).probs());
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn smoothed_pmf_normalised_and_positive(
            hist in proptest::collection::vec(0u64..1000, 1..60),
            alpha in 0.01f64..2.0,
        ) {
            let pmf = Pmf::from_histogram(&hist, alpha, 1e-9, 5);
            let total: f64 = pmf.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(pmf.probs().iter().all(|&p| p > 0.0));
            prop_assert!(pmf.log_prob(10_000).is_finite());
        }

        #[test]
        fn order_independent_of_frame_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<Vec<u32>> = (0..50)
                .map(|_| (0..9).map(|p| Poisson::new(0.5 + (p % 4) as f64).unwrap().sample(&mut rng) as u32).collect())
                .collect();
            let mut fwd = StateHistograms::new(1, 9);
            let mut rev = StateHistograms::new(1, 9);
            let s = RegisterState::all_bright(1);
            frames.iter().for_each(|f| fwd.add(s, f));
            frames.iter().rev().for_each(|f| rev.add(s, f));
            let a = brightness_order(&[fwd.mean_image(|m| m == 0).unwrap()]).unwrap();
            let b = brightness_order(&[rev.mean_image(|m| m == 0).unwrap()]).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
