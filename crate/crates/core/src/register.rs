//! Ground-truth register trajectories and full trial sequences.

use std::fmt;

use rand::Rng;

use crate::emccd::{seconds_to_ns, CameraModel, Frame, PreparedExposure};
use crate::error::{Error, Result};
use crate::optics::ImagingModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IonState {
    Bright,
    Dark,
}

impl IonState {
    pub fn is_dark(self) -> bool {
        self == IonState::Dark
    }

    pub fn bit(self) -> char {
        match self {
            IonState::Bright => '0',
            IonState::Dark => '1',
        }
    }
}

/// Register labels packed into a bit mask: bit k set means ion k is dark.
/// Printed as one character per ion, ion 0 first, `0` bright and `1` dark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegisterState {
    mask: u32,
    n_ions: u8,
}

pub const MAX_IONS: usize = 16;

impl RegisterState {
    pub fn all_bright(n_ions: usize) -> Self {
        assert!(n_ions <= MAX_IONS, "at most {MAX_IONS} ions");
        Self {
            mask: 0,
            n_ions: n_ions as u8,
        }
    }

    pub fn all_dark(n_ions: usize) -> Self {
        Self::from_mask(n_ions, (1u32 << n_ions) - 1)
    }

    pub fn from_mask(n_ions: usize, mask: u32) -> Self {
        assert!(n_ions <= MAX_IONS, "at most {MAX_IONS} ions");
        Self {
            mask: mask & ((1u32 << n_ions) - 1),
            n_ions: n_ions as u8,
        }
    }

    pub fn from_states(states: &[IonState]) -> Self {
        let mask = states
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_dark())
            .fold(0, |m, (k, _)| m | 1 << k);
        Self::from_mask(states.len(), mask)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let states = s
            .chars()
            .map(|c| match c {
                '0' => Ok(IonState::Bright),
                '1' => Ok(IonState::Dark),
                _ => Err(Error::format("register state", format!("bad character {c:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if states.is_empty() || states.len() > MAX_IONS {
            return Err(Error::format("register state", format!("bad length in {s:?}")));
        }
        Ok(Self::from_states(&states))
    }

    pub fn mask(self) -> u32 {
        self.mask
    }

    pub fn n_ions(self) -> usize {
        self.n_ions as usize
    }

    pub fn get(self, ion: usize) -> IonState {
        if self.mask >> ion & 1 == 1 {
            IonState::Dark
        } else {
            IonState::Bright
        }
    }

    pub fn with(self, ion: usize, state: IonState) -> Self {
        let mask = match state {
            IonState::Dark => self.mask | 1 << ion,
            IonState::Bright => self.mask & !(1 << ion),
        };
        Self { mask, ..self }
    }

    pub fn states(self) -> Vec<IonState> {
        (0..self.n_ions()).map(|k| self.get(k)).collect()
    }
}

impl fmt::Display for RegisterState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in 0..self.n_ions() {
            write!(f, "{}", self.get(k).bit())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayModel {
    pub lifetime_s: f64,
}

impl DecayModel {
    pub fn new(lifetime_s: f64) -> Result<Self> {
        if !(lifetime_s > 0.0) {
            return Err(Error::InvalidModel(format!(
                "decay lifetime must be positive, got {lifetime_s}"
            )));
        }
        Ok(Self { lifetime_s })
    }

    /// Probability that a dark ion decays within `t` seconds.
    pub fn probability(&self, t: f64) -> f64 {
        -(-t / self.lifetime_s).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayEvent {
    pub ion: usize,
    /// Seconds from the start of the trial.
    pub time_s: f64,
}

pub fn prepare_random_state<R: Rng + ?Sized>(
    n_ions: usize,
    shelve_probability: f64,
    rng: &mut R,
) -> RegisterState {
    let mut mask = 0;
    for k in 0..n_ions {
        if rng.random::<f64>() < shelve_probability {
            mask |= 1 << k;
        }
    }
    RegisterState::from_mask(n_ions, mask)
}

/// Decay times (relative to the window start) for each dark ion over a
/// window of `total_time`. One uniform per dark ion: u < p decides the
/// decay and -tau ln(1 - u) is then an exponential time conditioned to lie
/// inside the window.
pub fn sample_decays<R: Rng + ?Sized>(
    state: RegisterState,
    total_time: f64,
    decay: &DecayModel,
    rng: &mut R,
) -> Vec<DecayEvent> {
    let p = decay.probability(total_time.max(0.0));
    let mut out = Vec::new();
    for ion in 0..state.n_ions() {
        if state.get(ion).is_dark() {
            let u: f64 = rng.random();
            if u < p {
                let t = -decay.lifetime_s * (-u).ln_1p();
                out.push(DecayEvent {
                    ion,
                    time_s: t.min(total_time),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    SingleExposure { exposure_s: f64 },
    TimeResolved { exposures: usize, exposure_s: f64 },
    /// Check exposure with every ion bright, random shelving, then
    /// pre (2, 3), test (4) and post (5, 6) exposures.
    QunybbleSixExposure { exposure_s: f64 },
}

impl Protocol {
    pub fn n_frames(&self) -> usize {
        match *self {
            Protocol::SingleExposure { .. } => 1,
            Protocol::TimeResolved { exposures, .. } => exposures,
            Protocol::QunybbleSixExposure { .. } => 6,
        }
    }

    pub fn exposure_s(&self) -> f64 {
        match *self {
            Protocol::SingleExposure { exposure_s }
            | Protocol::TimeResolved { exposure_s, .. }
            | Protocol::QunybbleSixExposure { exposure_s } => exposure_s,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::SingleExposure { .. } => "single_exposure",
            Protocol::TimeResolved { .. } => "time_resolved",
            Protocol::QunybbleSixExposure { .. } => "qunybble",
        }
    }

    /// (start, end) of each exposure, the instant the register is prepared
    /// and the first exposure that sees the prepared state.
    pub fn timeline(&self, dead_time_s: f64) -> Timeline {
        let t = self.exposure_s();
        let step = t + dead_time_s;
        let (prep, first_prepared) = match self {
            Protocol::QunybbleSixExposure { .. } => (step, 1),
            _ => (0.0, 0),
        };
        let windows = (0..self.n_frames())
            .map(|j| (j as f64 * step, j as f64 * step + t))
            .collect::<Vec<_>>();
        let end = windows.last().map(|w| w.1).unwrap_or(0.0);
        Timeline {
            windows,
            preparation_s: prep,
            first_prepared,
            end_s: end,
        }
    }

    pub fn validate(&self, decay: &DecayModel) -> Result<()> {
        let t = self.exposure_s();
        if !(t > 0.0) {
            return Err(Error::InvalidModel("exposure time must be positive".into()));
        }
        if let Protocol::TimeResolved { exposures, .. } = *self {
            if exposures == 0 {
                return Err(Error::InvalidModel("need at least one exposure".into()));
            }
            if exposures as f64 * t >= decay.lifetime_s {
                return Err(Error::DecayWindowTooLong {
                    total_s: exposures as f64 * t,
                    lifetime_s: decay.lifetime_s,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub windows: Vec<(f64, f64)>,
    pub preparation_s: f64,
    pub first_prepared: usize,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    /// State the preparation aimed for; this is the label.
    pub prepared_state: RegisterState,
    /// State actually present after preparation (differs only when a
    /// preparation error is configured).
    pub initial_state: RegisterState,
    pub decay_events: Vec<DecayEvent>,
    pub frames: Vec<Frame>,
    pub protocol: Protocol,
}

impl TrialRecord {
    pub fn empty(protocol: Protocol, n_ions: usize) -> Self {
        Self {
            prepared_state: RegisterState::all_bright(n_ions),
            initial_state: RegisterState::all_bright(n_ions),
            decay_events: Vec::new(),
            frames: Vec::new(),
            protocol,
        }
    }

    /// Register state at time `t` (decays applied).
    pub fn state_at(&self, t: f64) -> RegisterState {
        self.decay_events
            .iter()
            .filter(|d| d.time_s <= t)
            .fold(self.initial_state, |s, d| s.with(d.ion, IonState::Bright))
    }
}

/// How single-qubit style protocols choose the prepared state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preparation {
    /// Even trial indices all bright, odd all dark.
    Alternating,
    /// Each ion independently dark with this probability.
    RandomShelving(f64),
}

/// Reusable trial generator: per-ion footprints and Poisson samplers for
/// every static register state are built once.
#[derive(Debug, Clone)]
pub struct TrialSimulator {
    pub camera: CameraModel,
    pub decay: DecayModel,
    pub protocol: Protocol,
    pub preparation: Preparation,
    /// Probability that an ion meant to be shelved is left bright.
    pub prep_error: f64,
    width: usize,
    height: usize,
    n_ions: usize,
    /// Photons per second on each pixel from each ion when bright.
    ion_rates: Vec<Vec<f64>>,
    static_exposures: Vec<PreparedExposure>,
    timeline: Timeline,
}

impl TrialSimulator {
    pub fn new(
        imaging: &ImagingModel,
        camera: CameraModel,
        decay: DecayModel,
        protocol: Protocol,
        preparation: Preparation,
    ) -> Result<Self> {
        camera.validate()?;
        protocol.validate(&decay)?;
        let n_ions = imaging.n_ions();
        if n_ions == 0 || n_ions > 10 {
            return Err(Error::InvalidModel(format!(
                "simulator supports 1 to 10 ions, got {n_ions}"
            )));
        }
        if let Preparation::RandomShelving(p) = preparation {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidModel(format!("shelve probability {p} not in [0, 1]")));
            }
        }
        let ion_rates: Vec<Vec<f64>> = imaging
            .footprints()?
            .into_iter()
            .map(|fp| fp.into_iter().map(|f| f * imaging.bright_rate_per_s).collect())
            .collect();
        let t = protocol.exposure_s();
        let timeline = protocol.timeline(camera.readout_dead_time_s);
        let mut sim = Self {
            camera,
            decay,
            protocol,
            preparation,
            prep_error: 0.0,
            width: imaging.width,
            height: imaging.height,
            n_ions,
            ion_rates,
            static_exposures: Vec::new(),
            timeline,
        };
        sim.static_exposures = (0..1u32 << n_ions)
            .map(|mask| {
                let photons = sim.photons(|k| if mask >> k & 1 == 1 { 0.0 } else { t });
                PreparedExposure::new(&sim.camera, &photons)
            })
            .collect();
        Ok(sim)
    }

    pub fn with_prep_error(mut self, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidModel(format!("preparation error {p} not in [0, 1]")));
        }
        self.prep_error = p;
        Ok(self)
    }

    pub fn n_ions(&self) -> usize {
        self.n_ions
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn timeline(&self) -> &Timeline {
        &self.timeline
    }

    /// Expected photons per pixel given each ion's bright time.
    fn photons(&self, bright_time: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.width * self.height];
        for k in 0..self.n_ions {
            let bt = bright_time(k);
            if bt > 0.0 {
                for (o, r) in out.iter_mut().zip(&self.ion_rates[k]) {
                    *o += r * bt;
                }
            }
        }
        out
    }

    /// Expected counts per pixel for a static state (camera efficiency and
    /// CIC included).
    pub fn expected_counts(&self, state: RegisterState) -> &[f64] {
        self.static_exposures[state.mask() as usize].means()
    }

    pub fn prepare<R: Rng + ?Sized>(&self, trial_index: u64, rng: &mut R) -> RegisterState {
        match self.preparation {
            Preparation::Alternating => {
                if trial_index % 2 == 0 {
                    RegisterState::all_bright(self.n_ions)
                } else {
                    RegisterState::all_dark(self.n_ions)
                }
            }
            Preparation::RandomShelving(p) => prepare_random_state(self.n_ions, p, rng),
        }
    }

    /// Full trial: preparation, decays and every frame.
    pub fn run_into<R: Rng + ?Sized>(&self, trial_index: u64, rng: &mut R, rec: &mut TrialRecord) {
        let label = self.prepare(trial_index, rng);
        let mut initial = label;
        if self.prep_error > 0.0 {
            for k in 0..self.n_ions {
                if label.get(k).is_dark() && rng.random::<f64>() < self.prep_error {
                    initial = initial.with(k, IonState::Bright);
                }
            }
        }
        let window = self.timeline.end_s - self.timeline.preparation_s;
        let mut decays = sample_decays(initial, window, &self.decay, rng);
        for d in &mut decays {
            d.time_s += self.timeline.preparation_s;
        }
        self.run_with_into(label, initial, decays, rng, rec);
    }

    /// Frames for a given trajectory. Decay events must refer to ions dark
    /// in `initial` and carry absolute trial times.
    pub fn run_with_into<R: Rng + ?Sized>(
        &self,
        label: RegisterState,
        initial: RegisterState,
        decays: Vec<DecayEvent>,
        rng: &mut R,
        rec: &mut TrialRecord,
    ) {
        let n_frames = self.protocol.n_frames();
        let exposure_ns = seconds_to_ns(self.protocol.exposure_s());
        rec.protocol = self.protocol;
        rec.prepared_state = label;
        rec.initial_state = initial;
        rec.decay_events = decays;
        rec.frames.resize_with(n_frames, || Frame::zeros(self.width, self.height, 0, 0));
        for (j, frame) in rec.frames.iter_mut().enumerate() {
            frame.width = self.width;
            frame.height = self.height;
            frame.counts.resize(self.width * self.height, 0);
            frame.exposure_ns = exposure_ns;
            frame.timestamp_index = j as u32;
            let (a, b) = self.timeline.windows[j];
            if j < self.timeline.first_prepared {
                self.static_exposures[0].sample_into(&self.camera, rng, &mut frame.counts);
                continue;
            }
            let start_state = rec
                .decay_events
                .iter()
                .filter(|d| d.time_s <= a)
                .fold(initial, |s, d| s.with(d.ion, IonState::Bright));
            let partial = rec
                .decay_events
                .iter()
                .any(|d| d.time_s > a && d.time_s < b && start_state.get(d.ion).is_dark());
            if !partial {
                self.static_exposures[start_state.mask() as usize].sample_into(
                    &self.camera,
                    rng,
                    &mut frame.counts,
                );
            } else {
                let photons = self.photons(|k| {
                    if !start_state.get(k).is_dark() {
                        return b - a;
                    }
                    rec.decay_events
                        .iter()
                        .find(|d| d.ion == k && d.time_s > a && d.time_s < b)
                        .map(|d| b - d.time_s)
                        .unwrap_or(0.0)
                });
                PreparedExposure::new(&self.camera, &photons).sample_into(
                    &self.camera,
                    rng,
                    &mut frame.counts,
                );
            }
        }
    }

    pub fn run<R: Rng + ?Sized>(&self, trial_index: u64, rng: &mut R) -> TrialRecord {
        let mut rec = TrialRecord::empty(self.protocol, self.n_ions);
        self.run_into(trial_index, rng, &mut rec);
        rec
    }
}

/// Everything a trial needs besides its random stream.
#[derive(Debug, Clone)]
pub struct Models {
    pub imaging: ImagingModel,
    pub camera: CameraModel,
    pub decay: DecayModel,
}

/// One-off trial. Builds a [`TrialSimulator`]; reuse one for batches.
pub fn run_trial<R: Rng + ?Sized>(
    protocol: Protocol,
    models: &Models,
    preparation: Preparation,
    trial_index: u64,
    rng: &mut R,
) -> Result<TrialRecord> {
    let sim = TrialSimulator::new(
        &models.imaging,
        models.camera.clone(),
        models.decay,
        protocol,
        preparation,
    )?;
    Ok(sim.run(trial_index, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::PointSpreadFunction;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qunybble_sim() -> TrialSimulator {
        let imaging = ImagingModel::uniform_chain(
            4,
            14.0,
            PointSpreadFunction::gaussian(2.0).unwrap(),
            2.6,
            30,
            8,
            40.0 / (400e-6 * 0.24),
        );
        TrialSimulator::new(
            &imaging,
            CameraModel::default(),
            DecayModel::new(1.168).unwrap(),
            Protocol::QunybbleSixExposure { exposure_s: 400e-6 },
            Preparation::RandomShelving(0.46),
        )
        .unwrap()
    }

    #[test]
    fn state_formatting_round_trips() {
        let s = RegisterState::parse("0110").unwrap();
        assert_eq!(s.mask(), 0b0110);
        assert_eq!(s.to_string(), "0110");
        assert_eq!(s.get(1), IonState::Dark);
        assert!(RegisterState::parse("01x").is_err());
        assert!(RegisterState::parse("").is_err());
    }

    #[test]
    fn degenerate_shelving() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(prepare_random_state(4, 0.0, &mut rng).mask(), 0);
        assert_eq!(prepare_random_state(4, 1.0, &mut rng).mask(), 0b1111);
    }

    #[test]
    fn decay_probability_over_400us() {
        let d = DecayModel::new(1.168).unwrap();
        let p = d.probability(400e-6);
        assert!((p - 3.4241e-4).abs() < 1e-8, "{p}");
    }

    #[test]
    fn bright_ions_never_decay() {
        let d = DecayModel::new(1e-6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(sample_decays(RegisterState::all_bright(4), 1.0, &d, &mut rng).is_empty());
        }
        let ev = sample_decays(RegisterState::all_dark(2), 1.0, &d, &mut rng);
        assert_eq!(ev.len(), 2);
        assert!(ev.iter().all(|e| e.time_s >= 0.0 && e.time_s <= 1.0));
    }

    #[test]
    fn time_resolved_window_must_be_short() {
        let d = DecayModel::new(1e-3).unwrap();
        let p = Protocol::TimeResolved {
            exposures: 10,
            exposure_s: 200e-6,
        };
        assert!(matches!(p.validate(&d), Err(Error::DecayWindowTooLong { .. })));
    }

    #[test]
    fn protocol_frame_counts() {
        let sim = qunybble_sim();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rec = sim.run(0, &mut rng);
        assert_eq!(rec.frames.len(), 6);
        assert!(rec.frames.iter().all(|f| f.exposure_ns == 400_000));
        let tl = sim.timeline();
        assert_eq!(tl.windows.len(), 6);
        assert!((tl.windows[1].0 - 406e-6).abs() < 1e-15);
    }

    #[test]
    fn decays_only_flip_dark_ions() {
        let sim = qunybble_sim();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fast = TrialSimulator {
            decay: DecayModel::new(2e-3).unwrap(),
            ..sim
        };
        for i in 0..500 {
            let rec = fast.run(i, &mut rng);
            let mut seen = 0u32;
            for d in &rec.decay_events {
                assert!(rec.initial_state.get(d.ion).is_dark());
                assert_eq!(seen >> d.ion & 1, 0, "two decays for one ion");
                seen |= 1 << d.ion;
                assert!(d.time_s >= fast.timeline().preparation_s);
            }
        }
    }

    #[test]
    fn forced_decay_before_test_exposure() {
        let sim = qunybble_sim();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dark = RegisterState::parse("0100").unwrap();
        let t4 = sim.timeline().windows[3].0;
        let rec = {
            let mut r = TrialRecord::empty(sim.protocol, 4);
            sim.run_with_into(dark, dark, vec![DecayEvent { ion: 1, time_s: t4 }], &mut rng, &mut r);
            r
        };
        assert_eq!(rec.state_at(sim.timeline().windows[2].1).get(1), IonState::Dark);
        assert_eq!(rec.state_at(t4).get(1), IonState::Bright);
    }
}
