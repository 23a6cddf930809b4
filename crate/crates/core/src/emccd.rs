//! EM-CCD camera model: shot noise, multiplication excess noise and
//! clock-induced charge, plus the IRF1 frame container.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};

use crate::error::{Error, Result};
use crate::optics::RateMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    /// Photon counting with the quantum efficiency halved, the usual
    /// equivalence for an EM register's excess noise factor of sqrt(2).
    EffectiveQe,
    /// Poisson electrons, each multiplied by an exponential register of
    /// mean gain `gain`, then divided by the gain and rounded.
    AnalogGain { gain: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub quantum_efficiency: f64,
    pub mode: NoiseMode,
    /// Expected clock-induced-charge electrons per pixel per readout.
    pub cic_rate: f64,
    /// Gaussian read noise, photon-equivalent units. Zero disables it.
    pub read_noise: f64,
    pub readout_dead_time_s: f64,
    pub frame_read_time_per_pixel_s: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            quantum_efficiency: 0.48,
            mode: NoiseMode::EffectiveQe,
            cic_rate: 0.05,
            read_noise: 0.0,
            readout_dead_time_s: 6e-6,
            frame_read_time_per_pixel_s: 0.1e-6,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantum_efficiency > 0.0 && self.quantum_efficiency <= 1.0) {
            return Err(Error::InvalidModel(format!(
                "quantum efficiency must be in (0, 1], got {}",
                self.quantum_efficiency
            )));
        }
        if !(self.cic_rate >= 0.0) || !(self.read_noise >= 0.0) {
            return Err(Error::InvalidModel(
                "CIC rate and read noise must be nonnegative".into(),
            ));
        }
        if !(self.readout_dead_time_s >= 0.0) || !(self.frame_read_time_per_pixel_s >= 0.0) {
            return Err(Error::InvalidModel("camera timings must be nonnegative".into()));
        }
        if let NoiseMode::AnalogGain { gain } = self.mode {
            if !(gain >= 1.0) {
                return Err(Error::InvalidModel(format!("EM gain must be >= 1, got {gain}")));
            }
        }
        Ok(())
    }

    /// Detection efficiency applied to arriving photons before the
    /// Poisson draw.
    pub fn detection_efficiency(&self) -> f64 {
        match self.mode {
            NoiseMode::EffectiveQe => self.quantum_efficiency / 2.0,
            NoiseMode::AnalogGain { .. } => self.quantum_efficiency,
        }
    }

    /// Poisson mean of the first counting stage for a pixel that receives
    /// `photons` on average during one exposure.
    pub fn electron_mean(&self, photons: f64) -> f64 {
        photons * self.detection_efficiency() + self.cic_rate
    }

    /// Converts a Poisson draw of the first stage into the reported count.
    pub fn convert<R: Rng + ?Sized>(&self, electrons: u64, rng: &mut R) -> u32 {
        let mut value = match self.mode {
            NoiseMode::EffectiveQe => electrons as f64,
            NoiseMode::AnalogGain { gain } => {
                if electrons == 0 {
                    0.0
                } else {
                    let g = Gamma::new(electrons as f64, gain).expect("valid gamma");
                    g.sample(rng) / gain
                }
            }
        };
        if self.read_noise > 0.0 {
            value += Normal::new(0.0, self.read_noise).expect("valid normal").sample(rng);
        }
        if matches!(self.mode, NoiseMode::EffectiveQe) && self.read_noise == 0.0 {
            return electrons.min(u32::MAX as u64) as u32;
        }
        value.round_ties_even().clamp(0.0, u32::MAX as f64) as u32
    }
}

/// One exposure's counts, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
    pub exposure_ns: u32,
    pub timestamp_index: u32,
}

impl Frame {
    pub fn zeros(width: usize, height: usize, exposure_ns: u32, timestamp_index: u32) -> Self {
        Self {
            width,
            height,
            counts: vec![0; width * height],
            exposure_ns,
            timestamp_index,
        }
    }

    pub fn exposure_s(&self) -> f64 {
        self.exposure_ns as f64 * 1e-9
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

pub fn seconds_to_ns(t: f64) -> u32 {
    (t * 1e9).round().clamp(0.0, u32::MAX as f64) as u32
}

/// Draws Poisson(mean), treating a zero mean as a certain zero.
pub fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
    }
}

/// Per-pixel samplers for a fixed mean-photon map. Building the Poisson
/// samplers once and reusing them for every trial with the same
/// illumination avoids recomputing their set-up constants per draw.
#[derive(Debug, Clone)]
pub struct PreparedExposure {
    samplers: Vec<Option<Poisson<f64>>>,
    means: Vec<f64>,
}

impl PreparedExposure {
    /// `photons` are expected photons per pixel arriving during the exposure.
    pub fn new(camera: &CameraModel, photons: &[f64]) -> Self {
        let means: Vec<f64> = photons.iter().map(|&p| camera.electron_mean(p)).collect();
        let samplers = means
            .iter()
            .map(|&m| if m > 0.0 { Poisson::new(m).ok() } else { None })
            .collect();
        Self { samplers, means }
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, camera: &CameraModel, rng: &mut R, out: &mut [u32]) {
        for (o, s) in out.iter_mut().zip(&self.samplers) {
            let e = match s {
                Some(p) => p.sample(rng) as u64,
                None => 0,
            };
            *o = camera.convert(e, rng);
        }
    }
}

/// One noisy exposure of duration `t` under a constant rate map.
pub fn expose<R: Rng + ?Sized>(camera: &CameraModel, rates: &RateMap, t: f64, rng: &mut R) -> Frame {
    expose_indexed(camera, rates, t, 0, rng)
}

fn expose_indexed<R: Rng + ?Sized>(
    camera: &CameraModel,
    rates: &RateMap,
    t: f64,
    index: u32,
    rng: &mut R,
) -> Frame {
    let mut frame = Frame::zeros(rates.width, rates.height, seconds_to_ns(t), index);
    for (c, &r) in frame.counts.iter_mut().zip(&rates.rates) {
        let e = poisson(camera.electron_mean(r * t.max(0.0)), rng);
        *c = camera.convert(e, rng);
    }
    frame
}

/// Frames for a schedule of (rate map, duration) exposures, separated by
/// the camera's dead time. Returns the frames and the total wall time
/// including a dead interval after each exposure.
pub fn expose_sequence<R: Rng + ?Sized>(
    camera: &CameraModel,
    schedule: &[(RateMap, f64)],
    rng: &mut R,
) -> Result<(Vec<Frame>, f64)> {
    if schedule.is_empty() {
        return Err(Error::Empty("exposure schedule"));
    }
    let mut wall = 0.0;
    let frames = schedule
        .iter()
        .enumerate()
        .map(|(i, (map, t))| {
            wall += t + camera.readout_dead_time_s;
            expose_indexed(camera, map, *t, i as u32, rng)
        })
        .collect();
    Ok((frames, wall))
}

const IRF1_MAGIC: &[u8; 4] = b"IRF1";

/// Writes frames sharing one geometry in the IRF1 layout.
pub fn write_irf1<W: Write>(mut w: W, frames: &[Frame]) -> Result<()> {
    let (width, height) = frames
        .first()
        .map(|f| (f.width, f.height))
        .unwrap_or((0, 0));
    if frames.iter().any(|f| f.width != width || f.height != height) {
        return Err(Error::format("IRF1", "frames have differing dimensions"));
    }
    w.write_all(IRF1_MAGIC)?;
    for v in [width as u32, height as u32, frames.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for f in frames {
        w.write_all(&f.exposure_ns.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(width * height * 2);
    for f in frames {
        buf.clear();
        for &c in &f.counts {
            let c16 = u16::try_from(c).map_err(|_| Error::CountOverflow(c))?;
            buf.extend_from_slice(&c16.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads an IRF1 stream. Frames get consecutive timestamp indices.
pub fn read_irf1<R: Read>(mut r: R) -> Result<Vec<Frame>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("IRF1", "truncated header"))?;
    if &magic != IRF1_MAGIC {
        return Err(Error::format("IRF1", "bad magic"));
    }
    let read_u32 = |r: &mut R| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::format("IRF1", "truncated header"))?;
        Ok(u32::from_le_bytes(b))
    };
    let width = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let n = read_u32(&mut r)? as usize;
    let exposures = (0..n)
        .map(|_| read_u32(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let mut raw = vec![0u8; width * height * 2];
    let mut frames = Vec::with_capacity(n);
    for (i, exposure_ns) in exposures.into_iter().enumerate() {
        r.read_exact(&mut raw)
            .map_err(|_| Error::format("IRF1", format!("truncated data in frame {i}")))?;
        let counts = raw
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as u32)
            .collect();
        frames.push(Frame {
            width,
            height,
            counts,
            exposure_ns,
            timestamp_index: i as u32,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format("IRF1", "trailing bytes after last frame"));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat(rate: f64, n: usize) -> RateMap {
        RateMap {
            width: n,
            height: 1,
            rates: vec![rate; n],
        }
    }

    #[test]
    fn dark_camera_gives_zero_frame() {
        let cam = CameraModel {
            cic_rate: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = expose(&cam, &RateMap::zeros(8, 8), 400e-6, &mut rng);
        assert!(f.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn effective_mode_mean_matches() {
        let cam = CameraModel::default();
        let rate = 2.0e4;
        let t = 400e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 200_000;
        let f = expose(&cam, &flat(rate, n), t, &mut rng);
        let mean = f.total() as f64 / n as f64;
        let expect = rate * t * 0.24 + 0.05;
        let se = (expect / n as f64).sqrt();
        assert!((mean - expect).abs() < 4.0 * se, "{mean} vs {expect}");
    }

    #[test]
    fn analog_mode_doubles_variance() {
        let cam = CameraModel {
            quantum_efficiency: 1.0,
            mode: NoiseMode::AnalogGain { gain: 1000.0 },
            cic_rate: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let f = expose(&cam, &flat(20.0, n), 1.0, &mut rng);
        let mean = f.total() as f64 / n as f64;
        let var = f
            .counts
            .iter()
            .map(|&c| (c as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        let ratio = var / 20.0;
        assert!((ratio - 2.0).abs() < 0.1, "F^2 = {ratio}");
    }

    #[test]
    fn analog_rounds_half_to_even() {
        assert_eq!(2.5f64.round_ties_even(), 2.0);
        assert_eq!(3.5f64.round_ties_even(), 4.0);
    }

    #[test]
    fn sequence_wall_time_includes_dead_time() {
        let cam = CameraModel::default();
        let sched: Vec<_> = (0..18).map(|_| (RateMap::zeros(2, 2), 200e-6)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (frames, wall) = expose_sequence(&cam, &sched, &mut rng).unwrap();
        assert_eq!(frames.len(), 18);
        assert!((wall - 18.0 * 206e-6).abs() < 1e-15);
        assert!(frames.iter().enumerate().all(|(i, f)| f.timestamp_index == i as u32));
        assert!(expose_sequence(&cam, &[], &mut rng).is_err());
    }

    #[test]
    fn single_entry_sequence_matches_expose() {
        let cam = CameraModel::default();
        let map = flat(5.0e4, 50);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let single = expose(&cam, &map, 400e-6, &mut a);
        let (seq, _) = expose_sequence(&cam, &[(map, 400e-6)], &mut b).unwrap();
        assert_eq!(seq[0], single);
    }

    #[test]
    fn prepared_exposure_matches_means() {
        let cam = CameraModel::default();
        let p = PreparedExposure::new(&cam, &[0.0, 10.0]);
        assert_eq!(p.means()[0], 0.05);
        assert!((p.means()[1] - 2.45).abs() < 1e-12);
    }

    #[test]
    fn irf1_round_trip() {
        let frames = vec![
            Frame {
                width: 3,
                height: 2,
                counts: vec![0, 1, 2, 3, 65535, 7],
                exposure_ns: 400_000,
                timestamp_index: 0,
            },
            Frame {
                width: 3,
                height: 2,
                counts: vec![9; 6],
                exposure_ns: 200_000,
                timestamp_index: 1,
            },
        ];
        let mut buf = Vec::new();
        write_irf1(&mut buf, &frames).unwrap();
        assert_eq!(&buf[..4], b"IRF1");
        assert_eq!(buf.len(), 4 + 12 + 8 + 2 * 12);
        assert_eq!(read_irf1(buf.as_slice()).unwrap(), frames);
    }

    #[test]
    fn irf1_rejects_overflow_and_garbage() {
        let f = Frame {
            width: 1,
            height: 1,
            counts: vec![70_000],
            exposure_ns: 1,
            timestamp_index: 0,
        };
        assert!(matches!(
            write_irf1(Vec::new(), &[f]),
            Err(Error::CountOverflow(70_000))
        ));
        assert!(read_irf1(&b"IRF2\0\0\0\0"[..]).is_err());
        assert!(read_irf1(&b"IRF1\x01\0\0\0\x01\0\0\0\x01\0\0\0"[..]).is_err());
    }
}
