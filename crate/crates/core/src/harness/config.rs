//! Experiment configuration: TOML with one table per concern and units in
//! every physical key name. User files are merged over the defaults for
//! the chosen experiment, so a config only needs the keys it changes.

use serde::{Deserialize, Serialize};

use crate::emccd::{CameraModel, NoiseMode};
use crate::error::{Error, Result};
use crate::optics::{ImagingModel, PointSpreadFunction};
use crate::register::{DecayModel, Protocol};

/// Exposure length the bright-signal parameter refers to.
pub const REFERENCE_EXPOSURE_S: f64 = 400e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SingleExposure,
    TimeResolved,
    Qunybble,
    CrosstalkStudy,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SingleExposure => "single_exposure",
            ExperimentKind::TimeResolved => "time_resolved",
            ExperimentKind::Qunybble => "qunybble",
            ExperimentKind::CrosstalkStudy => "crosstalk_study",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub n_ions: usize,
    pub spacing_um: f64,
    /// Explicit offsets along the chain from the grid centre; overrides
    /// the uniform spacing when nonempty.
    pub offsets_um: Vec<f64>,
    pub pixel_pitch_um: f64,
    pub width_px: usize,
    pub height_px: usize,
    pub subsamples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsfChoice {
    Aberrated,
    CoreHalo,
    Airy,
    Gaussian,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsfConfig {
    pub kind: PsfChoice,
    pub wavelength_nm: f64,
    pub numerical_aperture: f64,
    pub sigma_um: f64,
    pub halo_weight: f64,
    pub halo_length_um: f64,
    pub extent_um: f64,
    pub tabulated_radii_um: Vec<f64>,
    pub tabulated_values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseChoice {
    EffectiveQe,
    AnalogGain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub quantum_efficiency: f64,
    pub noise_mode: NoiseChoice,
    pub em_gain: f64,
    pub cic_per_pixel: f64,
    pub read_noise_counts: f64,
    pub dead_time_us: f64,
    pub pixel_read_time_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    /// Mean detected counts from one bright ion over the whole image plane
    /// in a 400 us exposure, in effective-QE photon units.
    pub bright_counts_per_400us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    pub lifetime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub exposure_us: f64,
    pub time_resolved_exposures: usize,
    pub time_resolved_exposure_us: f64,
    pub shelve_probability: f64,
    pub prep_error: f64,
    /// Known preparation-error contribution removed from reported epsilon.
    pub subtract_prep_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderSource {
    /// Mean image with the ion bright minus mean image with it dark.
    Differential,
    /// All-bright check exposures with nearest-ion pixel assignment.
    Check,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub trials: u64,
    pub min_samples: u64,
    pub alpha: f64,
    pub floor: f64,
    pub pad: usize,
    pub order: OrderSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Threshold,
    Ml,
    Adaptive,
    Spatiotemporal,
    SpatiotemporalAdaptive,
    Iterative,
    Iterative3,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Threshold => "T",
            Method::Ml => "M",
            Method::Adaptive => "adaptive",
            Method::Spatiotemporal => "st_ml",
            Method::SpatiotemporalAdaptive => "st_adaptive",
            Method::Iterative => "MN",
            Method::Iterative3 => "MN3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub methods: Vec<Method>,
    pub n_min: usize,
    pub n_max: usize,
    pub r_stop: f64,
    /// Stopping levels tried when tuning the adaptive classifier.
    pub r_stop_scan: Vec<f64>,
    pub max_iter: usize,
    /// ROI sizes for the spatio-temporal sweep.
    pub time_resolved_rois: Vec<usize>,
    /// ROI size used by the standalone `classify` step.
    pub roi_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostselectConfig {
    pub roi_width_px: usize,
    pub roi_height_px: usize,
    pub target_retained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrosstalkConfig {
    pub frames_per_ion: u64,
    pub roi_diameters_um: Vec<f64>,
    /// Spacing for the diffraction-limited comparison.
    pub diffraction_spacing_um: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub trials: u64,
    /// Worker threads; 0 uses every core. Never affects results.
    pub threads: usize,
    /// Trials per parallel work unit. Part of the reproducibility contract
    /// only through the RNG streams, which are per trial.
    pub batch_size: u64,
    pub geometry: GeometryConfig,
    pub psf: PsfConfig,
    pub camera: CameraConfig,
    pub signal: SignalConfig,
    pub decay: DecayConfig,
    pub protocol: ProtocolConfig,
    pub calibration: CalibrationConfig,
    pub classify: ClassifyConfig,
    pub postselect: PostselectConfig,
    pub crosstalk: CrosstalkConfig,
    pub output: OutputConfig,
    /// Values computed by a run and echoed into its manifest; ignored on
    /// input.
    #[serde(default, skip_serializing)]
    pub derived: Option<toml::Table>,
}

impl ExperimentConfig {
    /// Defaults for `kind`; `seed` has no default and must be supplied.
    pub fn defaults(kind: ExperimentKind, seed: u64) -> Self {
        let multi = matches!(kind, ExperimentKind::Qunybble | ExperimentKind::CrosstalkStudy);
        Self {
            experiment: kind,
            seed,
            trials: match kind {
                ExperimentKind::SingleExposure => 1_000_000,
                ExperimentKind::TimeResolved => 200_000,
                ExperimentKind::Qunybble => 110_000,
                ExperimentKind::CrosstalkStudy => 1,
            },
            threads: 0,
            batch_size: 4096,
            geometry: GeometryConfig {
                n_ions: if multi { 4 } else { 1 },
                spacing_um: 14.0,
                offsets_um: Vec::new(),
                pixel_pitch_um: 2.6,
                width_px: if multi { 50 } else { 15 },
                height_px: if multi { 10 } else { 15 },
                subsamples: 4,
            },
            psf: PsfConfig {
                kind: PsfChoice::Aberrated,
                wavelength_nm: 397.0,
                numerical_aperture: 0.25,
                sigma_um: crate::optics::ABERRATED_CORE_SIGMA_UM,
                halo_weight: crate::optics::ABERRATED_HALO_WEIGHT,
                halo_length_um: crate::optics::ABERRATED_HALO_LENGTH_UM,
                extent_um: crate::optics::ABERRATED_EXTENT_UM,
                tabulated_radii_um: Vec::new(),
                tabulated_values: Vec::new(),
            },
            camera: CameraConfig {
                quantum_efficiency: 0.48,
                noise_mode: NoiseChoice::EffectiveQe,
                em_gain: 1000.0,
                cic_per_pixel: DEFAULT_CIC,
                read_noise_counts: 0.0,
                dead_time_us: 6.0,
                pixel_read_time_us: 0.1,
            },
            signal: SignalConfig {
                bright_counts_per_400us: if multi {
                    DEFAULT_QUNYBBLE_COUNTS
                } else {
                    DEFAULT_SINGLE_COUNTS
                },
            },
            decay: DecayConfig { lifetime_ms: 1168.0 },
            protocol: ProtocolConfig {
                exposure_us: 400.0,
                time_resolved_exposures: 18,
                time_resolved_exposure_us: 200.0,
                shelve_probability: 0.46,
                prep_error: 0.0,
                subtract_prep_error: 0.0,
            },
            calibration: CalibrationConfig {
                trials: if multi { 0 } else { 200_000 },
                min_samples: 100,
                alpha: 0.5,
                floor: 1e-9,
                pad: 5,
                order: OrderSource::Differential,
            },
            classify: ClassifyConfig {
                methods: match kind {
                    ExperimentKind::SingleExposure => {
                        vec![Method::Threshold, Method::Ml, Method::Adaptive]
                    }
                    ExperimentKind::TimeResolved => vec![
                        Method::Threshold,
                        Method::Spatiotemporal,
                        Method::SpatiotemporalAdaptive,
                    ],
                    _ => vec![
                        Method::Threshold,
                        Method::Ml,
                        Method::Iterative,
                        Method::Iterative3,
                    ],
                },
                n_min: 1,
                n_max: if multi { 100 } else { 60 },
                r_stop: -(1e-6f64).ln(),
                r_stop_scan: (1..=28).map(|i| i as f64 * 0.5).collect(),
                max_iter: 64,
                time_resolved_rois: vec![5, 10, 15, 20, 30],
                roi_pixels: if multi { 60 } else { 10 },
            },
            postselect: PostselectConfig {
                roi_width_px: 5,
                roi_height_px: 10,
                target_retained: 0.95,
            },
            crosstalk: CrosstalkConfig {
                frames_per_ion: 4000,
                roi_diameters_um: (1..=15).map(|i| i as f64 * 2.0).collect(),
                diffraction_spacing_um: 1.4,
            },
            output: OutputConfig { dir: "out".into() },
            derived: None,
        }
    }

    /// Parses a TOML document over the defaults of its `experiment`.
    /// `seed_override` satisfies the no-default seed rule when the file
    /// has none.
    pub fn from_toml(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let kind: ExperimentKind = match user.get("experiment") {
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
            None => return Err(Error::Config("missing `experiment`".into())),
        };
        let seed = match (seed_override, user.get("seed")) {
            (Some(s), _) => s,
            (None, Some(v)) => v
                .as_integer()
                .filter(|s| *s >= 0)
                .ok_or_else(|| Error::Config("`seed` must be a nonnegative integer".into()))?
                as u64,
            (None, None) => return Err(Error::Config("no seed given (config or --seed)".into())),
        };
        let defaults = toml::Table::try_from(Self::defaults(kind, seed))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = defaults;
        merge(&mut merged, user);
        merged.insert("seed".into(), toml::Value::Integer(seed as i64));
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.geometry.n_ions == 0 {
            return bad("need at least one ion".into());
        }
        if !self.geometry.offsets_um.is_empty()
            && self.geometry.offsets_um.len() != self.geometry.n_ions
        {
            return bad("offsets_um must list one offset per ion".into());
        }
        let c = &self.classify;
        if c.n_min == 0 || c.n_min > c.n_max || c.n_max > self.n_pixels() {
            return bad(format!(
                "ROI range {}..={} invalid for {} pixels",
                c.n_min,
                c.n_max,
                self.n_pixels()
            ));
        }
        if !(self.signal.bright_counts_per_400us >= 0.0) {
            return bad("bright signal must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.protocol.shelve_probability) {
            return bad("shelve_probability must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.postselect.target_retained) {
            return bad("target_retained must be in [0, 1)".into());
        }
        self.camera_model().validate()?;
        let decay = self.decay_model()?;
        self.protocol_for(self.experiment).validate(&decay)?;
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.geometry.width_px * self.geometry.height_px
    }

    pub fn camera_model(&self) -> CameraModel {
        let c = &self.camera;
        CameraModel {
            quantum_efficiency: c.quantum_efficiency,
            mode: match c.noise_mode {
                NoiseChoice::EffectiveQe => NoiseMode::EffectiveQe,
                NoiseChoice::AnalogGain => NoiseMode::AnalogGain { gain: c.em_gain },
            },
            cic_rate: c.cic_per_pixel,
            read_noise: c.read_noise_counts,
            readout_dead_time_s: c.dead_time_us * 1e-6,
            frame_read_time_per_pixel_s: c.pixel_read_time_us * 1e-6,
        }
    }

    pub fn decay_model(&self) -> Result<DecayModel> {
        DecayModel::new(self.decay.lifetime_ms * 1e-3)
    }

    pub fn psf(&self) -> Result<PointSpreadFunction> {
        let p = &self.psf;
        match p.kind {
            PsfChoice::Aberrated => Ok(PointSpreadFunction::aberrated_default()),
            PsfChoice::CoreHalo => {
                PointSpreadFunction::core_halo(p.sigma_um, p.halo_weight, p.halo_length_um, p.extent_um)
            }
            PsfChoice::Airy => PointSpreadFunction::airy(p.wavelength_nm * 1e-9, p.numerical_aperture),
            PsfChoice::Gaussian => PointSpreadFunction::gaussian(p.sigma_um),
            PsfChoice::Tabulated => PointSpreadFunction::tabulated(
                p.tabulated_radii_um.clone(),
                p.tabulated_values.clone(),
            ),
        }
    }

    /// Photons per second reaching the sensor from one bright ion such that
    /// a 400 us exposure yields the configured counts at QE/2.
    pub fn bright_rate_per_s(&self) -> f64 {
        self.signal.bright_counts_per_400us
            / (REFERENCE_EXPOSURE_S * self.camera.quantum_efficiency / 2.0)
    }

    pub fn offsets_um(&self) -> Vec<f64> {
        let g = &self.geometry;
        if !g.offsets_um.is_empty() {
            return g.offsets_um.clone();
        }
        (0..g.n_ions)
            .map(|i| (i as f64 - (g.n_ions as f64 - 1.0) / 2.0) * g.spacing_um)
            .collect()
    }

    /// The imaging model. A single ion sits on the centre of a pixel.
    pub fn imaging_model(&self) -> Result<ImagingModel> {
        let g = &self.geometry;
        let mut m = ImagingModel::linear_chain(
            &self.offsets_um(),
            self.psf()?,
            g.pixel_pitch_um,
            g.width_px,
            g.height_px,
            self.bright_rate_per_s(),
        );
        m.subsamples = g.subsamples;
        let centre = |n: usize| ((n / 2) as f64 + 0.5) * g.pixel_pitch_um;
        for p in &mut m.ion_positions_um {
            if g.n_ions == 1 {
                p[0] = centre(g.width_px);
            }
            p[1] = centre(g.height_px);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn protocol_for(&self, kind: ExperimentKind) -> Protocol {
        let p = &self.protocol;
        match kind {
            ExperimentKind::TimeResolved => Protocol::TimeResolved {
                exposures: p.time_resolved_exposures,
                exposure_s: p.time_resolved_exposure_us * 1e-6,
            },
            ExperimentKind::Qunybble | ExperimentKind::CrosstalkStudy => {
                Protocol::QunybbleSixExposure {
                    exposure_s: p.exposure_us * 1e-6,
                }
            }
            ExperimentKind::SingleExposure => Protocol::SingleExposure {
                exposure_s: p.exposure_us * 1e-6,
            },
        }
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol_for(self.experiment)
    }

    pub fn roi_sizes(&self) -> Vec<usize> {
        (self.classify.n_min..=self.classify.n_max).collect()
    }
}

pub const DEFAULT_CIC: f64 = 0.05;
pub const DEFAULT_SINGLE_COUNTS: f64 = 80.0;
pub const DEFAULT_QUNYBBLE_COUNTS: f64 = 42.0;

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_toml("experiment = \"qunybble\"\nseed = 7\n", None).unwrap();
        assert_eq!(c.geometry.n_ions, 4);
        assert_eq!(c.seed, 7);
        assert_eq!(c, ExperimentConfig::defaults(ExperimentKind::Qunybble, 7));
    }

    #[test]
    fn seed_is_required() {
        assert!(ExperimentConfig::from_toml("experiment = \"qunybble\"\n", None).is_err());
        let c = ExperimentConfig::from_toml("experiment = \"qunybble\"\n", Some(3)).unwrap();
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn nested_override_and_unknown_keys() {
        let c = ExperimentConfig::from_toml(
            "experiment = \"single_exposure\"\nseed = 1\n[camera]\ncic_per_pixel = 0.1\n",
            None,
        )
        .unwrap();
        assert_eq!(c.camera.cic_per_pixel, 0.1);
        assert_eq!(c.camera.quantum_efficiency, 0.48);
        assert!(ExperimentConfig::from_toml(
            "experiment = \"single_exposure\"\nseed = 1\n[camera]\ncic = 0.1\n",
            None
        )
        .is_err());
    }

    #[test]
    fn time_resolved_window_checked() {
        let r = ExperimentConfig::from_toml(
            "experiment = \"time_resolved\"\nseed = 1\n[decay]\nlifetime_ms = 1.0\n",
            None,
        );
        assert!(r.is_err());
    }

    #[test]
    fn round_trip_through_toml() {
        let c = ExperimentConfig::defaults(ExperimentKind::TimeResolved, 99);
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, None).unwrap(), c);
    }

    #[test]
    fn bright_rate_gives_configured_counts() {
        let c = ExperimentConfig::defaults(ExperimentKind::SingleExposure, 0);
        let cam = c.camera_model();
        let counts = c.bright_rate_per_s() * REFERENCE_EXPOSURE_S * cam.detection_efficiency();
        assert!((counts - DEFAULT_SINGLE_COUNTS).abs() < 1e-9);
    }
}
