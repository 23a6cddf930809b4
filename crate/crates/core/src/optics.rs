//! Imaging of ion fluorescence onto the camera.
//!
//! A [`PointSpreadFunction`] is a radially symmetric surface density in the
//! object plane, normalised to unit integral. [`ImagingModel`] places ions on
//! a pixel grid and integrates the PSF over each pixel to produce expected
//! photon rates, and [`crosstalk_fraction`] integrates it over circular ROIs.
//!
//! All lengths are micrometres in the object plane unless a name says
//! otherwise.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// First zero of the Bessel function J1.
pub const BESSEL_J1_FIRST_ZERO: f64 = 3.831_705_970_207_512;
/// Second zero of J1 (second dark ring of the Airy pattern).
pub const BESSEL_J1_SECOND_ZERO: f64 = 7.015_586_669_815_619;

/// Fraction of energy the PSF support radius must enclose.
pub const SUPPORT_ENERGY: f64 = 0.9999;

/// Radial profile sampled on increasing radii, linearly interpolated and
/// zero beyond the last sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialTable {
    radii: Vec<f64>,
    density: Vec<f64>,
    /// Encircled energy at each sample radius.
    cumulative: Vec<f64>,
}

impl RadialTable {
    /// Builds a table from raw (unnormalised) samples. The first radius must
    /// be zero and radii strictly increasing.
    pub fn new(radii: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if radii.len() != values.len() || radii.len() < 2 {
            return Err(Error::InvalidModel(
                "tabulated PSF needs at least two (radius, value) samples".into(),
            ));
        }
        if radii[0] != 0.0 || radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidModel(
                "tabulated PSF radii must start at 0 and increase strictly".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidModel(
                "tabulated PSF values must be finite and nonnegative".into(),
            ));
        }
        let mut cumulative = Vec::with_capacity(radii.len());
        cumulative.push(0.0);
        for i in 1..radii.len() {
            let seg = ring_integral(radii[i - 1], radii[i], values[i - 1], values[i]);
            cumulative.push(cumulative[i - 1] + seg);
        }
        let total = *cumulative.last().unwrap();
        if total <= 0.0 {
            return Err(Error::InvalidModel("tabulated PSF has zero energy".into()));
        }
        let density = values.iter().map(|v| v / total).collect();
        cumulative.iter_mut().for_each(|c| *c /= total);
        Ok(Self {
            radii,
            density,
            cumulative,
        })
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn density_samples(&self) -> &[f64] {
        &self.density
    }

    fn locate(&self, r: f64) -> Option<usize> {
        if r >= *self.radii.last().unwrap() {
            return None;
        }
        // index i such that radii[i] <= r < radii[i+1]
        Some(self.radii.partition_point(|&x| x <= r) - 1)
    }

    fn density(&self, r: f64) -> f64 {
        match self.locate(r) {
            None => 0.0,
            Some(i) => {
                let (r0, r1) = (self.radii[i], self.radii[i + 1]);
                let t = (r - r0) / (r1 - r0);
                self.density[i] + t * (self.density[i + 1] - self.density[i])
            }
        }
    }

    fn encircled(&self, r: f64) -> f64 {
        match self.locate(r) {
            None => 1.0,
            Some(i) => {
                let (r0, r1) = (self.radii[i], self.radii[i + 1]);
                let f0 = self.density[i];
                let f_r = self.density(r);
                let _ = r1;
                self.cumulative[i] + ring_integral(r0, r, f0, f_r)
            }
        }
    }
}

/// Exact integral of 2*pi*r*f(r) over [r0, r1] when f is linear between f0
/// and f1.
fn ring_integral(r0: f64, r1: f64, f0: f64, f1: f64) -> f64 {
    if r1 <= r0 {
        return 0.0;
    }
    let b = (f1 - f0) / (r1 - r0);
    let a = f0 - b * r0;
    let prim = |r: f64| a * r * r / 2.0 + b * r * r * r / 3.0;
    2.0 * PI * (prim(r1) - prim(r0))
}

#[derive(Debug, Clone, PartialEq)]
pub enum PsfKind {
    /// Diffraction-limited circular aperture.
    Airy {
        wavelength_m: f64,
        numerical_aperture: f64,
    },
    Gaussian {
        sigma_um: f64,
    },
    Tabulated(RadialTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSpreadFunction {
    kind: PsfKind,
}

impl PointSpreadFunction {
    pub fn airy(wavelength_m: f64, numerical_aperture: f64) -> Result<Self> {
        if !(wavelength_m > 0.0) || !(numerical_aperture > 0.0 && numerical_aperture < 1.0) {
            return Err(Error::InvalidModel(format!(
                "Airy PSF needs wavelength > 0 and 0 < NA < 1 (got {wavelength_m}, {numerical_aperture})"
            )));
        }
        Ok(Self {
            kind: PsfKind::Airy {
                wavelength_m,
                numerical_aperture,
            },
        })
    }

    pub fn gaussian(sigma_um: f64) -> Result<Self> {
        if !(sigma_um > 0.0) {
            return Err(Error::InvalidModel(format!(
                "Gaussian PSF needs sigma > 0 (got {sigma_um})"
            )));
        }
        Ok(Self {
            kind: PsfKind::Gaussian { sigma_um },
        })
    }

    pub fn tabulated(radii_um: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Ok(Self {
            kind: PsfKind::Tabulated(RadialTable::new(radii_um, values)?),
        })
    }

    /// Gaussian core plus exponential halo, tabulated out to `extent_um`.
    ///
    /// Stand-in for an aberrated objective: the core carries
    /// `1 - halo_weight` of the light, the halo decays with length
    /// `halo_length_um`.
    pub fn core_halo(
        core_sigma_um: f64,
        halo_weight: f64,
        halo_length_um: f64,
        extent_um: f64,
    ) -> Result<Self> {
        if !(core_sigma_um > 0.0 && halo_length_um > 0.0 && (0.0..1.0).contains(&halo_weight)) {
            return Err(Error::InvalidModel(
                "core/halo PSF needs sigma > 0, length > 0, 0 <= weight < 1".into(),
            ));
        }
        let step = (core_sigma_um.min(halo_length_um) / 40.0).min(0.05);
        let n = (extent_um / step).ceil() as usize + 1;
        let radii: Vec<f64> = (0..n).map(|i| i as f64 * step).collect();
        let values = radii
            .iter()
            .map(|&r| core_halo_density(r, core_sigma_um, halo_weight, halo_length_um))
            .collect();
        Self::tabulated(radii, values)
    }

    /// The default aberrated-objective model: core/halo profile whose ROI
    /// cross-talk between ions 14 um apart is 4.0 % (nearest) and 0.9 %
    /// (next-nearest) of the ion's own signal for a 14 um diameter ROI.
    /// See [`fit_core_halo`] for how the constants were obtained.
    pub fn aberrated_default() -> Self {
        Self::core_halo(
            ABERRATED_CORE_SIGMA_UM,
            ABERRATED_HALO_WEIGHT,
            ABERRATED_HALO_LENGTH_UM,
            ABERRATED_EXTENT_UM,
        )
        .expect("default aberrated PSF constants are valid")
    }

    pub fn kind(&self) -> &PsfKind {
        &self.kind
    }

    /// Surface density at radius `r_um`, per um^2; integrates to 1 over the
    /// plane.
    pub fn density(&self, r_um: f64) -> f64 {
        match &self.kind {
            PsfKind::Airy {
                wavelength_m,
                numerical_aperture,
            } => {
                let k = airy_scale(*wavelength_m, *numerical_aperture);
                airy_pattern(k * r_um) * k * k / (4.0 * PI)
            }
            PsfKind::Gaussian { sigma_um } => {
                let s2 = sigma_um * sigma_um;
                (-r_um * r_um / (2.0 * s2)).exp() / (2.0 * PI * s2)
            }
            PsfKind::Tabulated(t) => t.density(r_um),
        }
    }

    /// Fraction of the total energy within radius `r_um` of the centre.
    pub fn encircled_energy(&self, r_um: f64) -> f64 {
        if r_um <= 0.0 {
            return 0.0;
        }
        match &self.kind {
            PsfKind::Airy {
                wavelength_m,
                numerical_aperture,
            } => {
                let x = airy_scale(*wavelength_m, *numerical_aperture) * r_um;
                let (j0, j1) = (libm::j0(x), libm::j1(x));
                1.0 - j0 * j0 - j1 * j1
            }
            PsfKind::Gaussian { sigma_um } => {
                1.0 - (-r_um * r_um / (2.0 * sigma_um * sigma_um)).exp()
            }
            PsfKind::Tabulated(t) => t.encircled(r_um),
        }
    }

    /// Radius enclosing [`SUPPORT_ENERGY`] of the light.
    pub fn support_radius(&self) -> f64 {
        let tail = 1.0 - SUPPORT_ENERGY;
        match &self.kind {
            PsfKind::Airy {
                wavelength_m,
                numerical_aperture,
            } => {
                // 1 - EE(x) ~ 2 / (pi x) for large x
                let x = 2.0 / (PI * tail);
                x / airy_scale(*wavelength_m, *numerical_aperture)
            }
            PsfKind::Gaussian { sigma_um } => sigma_um * (-2.0 * tail.ln()).sqrt(),
            PsfKind::Tabulated(t) => {
                let i = t.cumulative.partition_point(|&c| c < SUPPORT_ENERGY);
                t.radii[i.min(t.radii.len() - 1)]
            }
        }
    }
}

fn core_halo_density(r: f64, sigma: f64, weight: f64, length: f64) -> f64 {
    let core = (-r * r / (2.0 * sigma * sigma)).exp() / (2.0 * PI * sigma * sigma);
    let halo = (-r / length).exp() / (2.0 * PI * length * length);
    (1.0 - weight) * core + weight * halo
}

// Fitted with `fit_core_halo(3.5, 14.0, 14.0, 0.040, 0.009)`; the unit tests
// re-run the fit and check these values.
pub const ABERRATED_CORE_SIGMA_UM: f64 = 3.5;
pub const ABERRATED_HALO_WEIGHT: f64 = 0.3222;
pub const ABERRATED_HALO_LENGTH_UM: f64 = 14.19;
pub const ABERRATED_EXTENT_UM: f64 = 250.0;

/// [2 J1(x) / x]^2, equal to 1 at the origin.
fn airy_pattern(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        return 1.0;
    }
    let v = 2.0 * libm::j1(x) / x;
    v * v
}

/// Radial scale k (1/um) such that the first dark ring sits at
/// 0.61 lambda / tan(alpha), i.e. the Airy disc diameter is
/// 1.22 lambda / tan(alpha).
fn airy_scale(wavelength_m: f64, numerical_aperture: f64) -> f64 {
    BESSEL_J1_FIRST_ZERO / airy_first_null_radius_um(wavelength_m, numerical_aperture)
}

/// Radius of the first dark ring in um.
pub fn airy_first_null_radius_um(wavelength_m: f64, numerical_aperture: f64) -> f64 {
    let sin_a = numerical_aperture;
    let tan_a = sin_a / (1.0 - sin_a * sin_a).sqrt();
    0.61 * wavelength_m * 1e6 / tan_a
}

/// Normalised Airy intensity at radius `r_um` (1 at the centre).
pub fn airy_radial_intensity(r_um: f64, wavelength_m: f64, numerical_aperture: f64) -> f64 {
    airy_pattern(airy_scale(wavelength_m, numerical_aperture) * r_um)
}

/// Energy of `psf` inside a disc of radius `radius` whose centre is
/// `offset` away from the PSF centre.
///
/// Integrates over rings around the PSF centre: each ring of radius rho
/// contributes density(rho) times the arc length falling in the disc. The
/// partial-overlap range is mapped through rho = a + (b-a)(1-cos phi)/2,
/// which removes the square-root behaviour of the arc angle at both ends.
pub fn disc_energy(psf: &PointSpreadFunction, offset: f64, radius: f64) -> f64 {
    if radius <= 0.0 {
        return 0.0;
    }
    let d = offset.abs();
    if d < 1e-12 {
        return psf.encircled_energy(radius);
    }
    let inner = if d < radius {
        psf.encircled_energy(radius - d)
    } else {
        0.0
    };
    let a = (d - radius).abs();
    let b = d + radius;
    const PANELS: usize = 4096;
    let h = PI / PANELS as f64;
    let integrand = |phi: f64| -> f64 {
        let rho = a + (b - a) * (1.0 - phi.cos()) / 2.0;
        if rho <= 0.0 {
            return 0.0;
        }
        let c = ((rho * rho + d * d - radius * radius) / (2.0 * rho * d)).clamp(-1.0, 1.0);
        let jac = (b - a) / 2.0 * phi.sin();
        psf.density(rho) * rho * 2.0 * c.acos() * jac
    };
    let mut sum = integrand(0.0) + integrand(PI);
    for i in 1..PANELS {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * integrand(i as f64 * h);
    }
    inner + sum * h / 3.0
}

/// Per-pixel expected photon rates (photons/s arriving at the sensor),
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMap {
    pub width: usize,
    pub height: usize,
    pub rates: Vec<f64>,
}

impl RateMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rates: vec![0.0; width * height],
        }
    }

    pub fn total(&self) -> f64 {
        self.rates.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagingModel {
    /// Object-plane ion coordinates, um, in the frame where pixel (x, y)
    /// covers [x, x+1) * pitch by [y, y+1) * pitch.
    pub ion_positions_um: Vec<[f64; 2]>,
    pub psf: PointSpreadFunction,
    pub pixel_pitch_um: f64,
    pub width: usize,
    pub height: usize,
    /// Photons per second reaching the sensor from one bright ion.
    pub bright_rate_per_s: f64,
    /// Sub-samples per pixel side for the midpoint rule.
    pub subsamples: usize,
}

impl ImagingModel {
    /// Ions on a horizontal line through the grid centre. Offsets are
    /// measured along the line from the grid centre.
    pub fn linear_chain(
        offsets_um: &[f64],
        psf: PointSpreadFunction,
        pixel_pitch_um: f64,
        width: usize,
        height: usize,
        bright_rate_per_s: f64,
    ) -> Self {
        let cx = width as f64 * pixel_pitch_um / 2.0;
        let cy = height as f64 * pixel_pitch_um / 2.0;
        Self {
            ion_positions_um: offsets_um.iter().map(|o| [cx + o, cy]).collect(),
            psf,
            pixel_pitch_um,
            width,
            height,
            bright_rate_per_s,
            subsamples: 4,
        }
    }

    /// `n` ions with uniform spacing, centred on the grid.
    pub fn uniform_chain(
        n: usize,
        spacing_um: f64,
        psf: PointSpreadFunction,
        pixel_pitch_um: f64,
        width: usize,
        height: usize,
        bright_rate_per_s: f64,
    ) -> Self {
        let offsets: Vec<f64> = (0..n)
            .map(|i| (i as f64 - (n as f64 - 1.0) / 2.0) * spacing_um)
            .collect();
        Self::linear_chain(&offsets, psf, pixel_pitch_um, width, height, bright_rate_per_s)
    }

    pub fn n_ions(&self) -> usize {
        self.ion_positions_um.len()
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidModel("pixel grid is empty".into()));
        }
        if !(self.pixel_pitch_um > 0.0) || self.subsamples == 0 {
            return Err(Error::InvalidModel(
                "pixel pitch and subsampling must be positive".into(),
            ));
        }
        if !(self.bright_rate_per_s >= 0.0) {
            return Err(Error::InvalidModel("bright rate must be nonnegative".into()));
        }
        for (i, a) in self.ion_positions_um.iter().enumerate() {
            for b in &self.ion_positions_um[i + 1..] {
                if a == b {
                    return Err(Error::InvalidModel(format!(
                        "ion positions must be distinct ({:?} repeated)",
                        a
                    )));
                }
            }
        }
        let support = self.psf.support_radius();
        let (w, h) = (
            self.width as f64 * self.pixel_pitch_um,
            self.height as f64 * self.pixel_pitch_um,
        );
        for (ion, &[x, y]) in self.ion_positions_um.iter().enumerate() {
            let dx = (0.0 - x).max(x - w).max(0.0);
            let dy = (0.0 - y).max(y - h).max(0.0);
            if dx.hypot(dy) > support {
                return Err(Error::IonOutsideField { ion, x, y });
            }
        }
        Ok(())
    }

    /// Fraction of ion `ion`'s light landing on each pixel.
    pub fn ion_footprint(&self, ion: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let &[x0, y0] = self
            .ion_positions_um
            .get(ion)
            .ok_or_else(|| Error::InvalidModel(format!("no ion {ion}")))?;
        let s = self.subsamples;
        let p = self.pixel_pitch_um;
        let offsets: Vec<f64> = (0..s).map(|i| (i as f64 + 0.5) / s as f64 * p).collect();
        let area = p * p / (s * s) as f64;
        let mut out = Vec::with_capacity(self.n_pixels());
        for py in 0..self.height {
            for px in 0..self.width {
                let mut acc = 0.0;
                for oy in &offsets {
                    let dy = py as f64 * p + oy - y0;
                    for ox in &offsets {
                        let dx = px as f64 * p + ox - x0;
                        acc += self.psf.density(dx.hypot(dy));
                    }
                }
                out.push(acc * area);
            }
        }
        Ok(out)
    }

    pub fn footprints(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.n_ions()).map(|k| self.ion_footprint(k)).collect()
    }

    /// Light from `ion` that misses the grid.
    pub fn spill_fraction(&self, ion: usize) -> Result<f64> {
        Ok(1.0 - self.ion_footprint(ion)?.iter().sum::<f64>())
    }
}

/// Expected photon rate per pixel with the listed ions bright; dark ions
/// contribute nothing.
pub fn pixel_rate_map(model: &ImagingModel, bright_ions: &[usize]) -> Result<RateMap> {
    model.validate()?;
    let mut map = RateMap::zeros(model.width, model.height);
    let mut ions: Vec<usize> = bright_ions.to_vec();
    ions.sort_unstable();
    ions.dedup();
    for ion in ions {
        let fp = model.ion_footprint(ion)?;
        for (r, f) in map.rates.iter_mut().zip(fp) {
            *r += f * model.bright_rate_per_s;
        }
    }
    Ok(map)
}

/// Fraction of `source_ion`'s total signal inside the circular ROI.
pub fn crosstalk_fraction(
    model: &ImagingModel,
    roi_center_um: [f64; 2],
    roi_diameter_um: f64,
    source_ion: usize,
) -> Result<f64> {
    if !(roi_diameter_um > 0.0) {
        return Err(Error::InvalidModel("ROI diameter must be positive".into()));
    }
    let [sx, sy] = *model
        .ion_positions_um
        .get(source_ion)
        .ok_or_else(|| Error::InvalidModel(format!("no ion {source_ion}")))?;
    let d = (roi_center_um[0] - sx).hypot(roi_center_um[1] - sy);
    Ok(disc_energy(&model.psf, d, roi_diameter_um / 2.0))
}

/// Signal from `source_ion` inside an ROI centred on `own_ion`, relative to
/// `own_ion`'s signal in the same ROI.
pub fn relative_crosstalk(
    model: &ImagingModel,
    own_ion: usize,
    source_ion: usize,
    roi_diameter_um: f64,
) -> Result<f64> {
    let center = *model
        .ion_positions_um
        .get(own_ion)
        .ok_or_else(|| Error::InvalidModel(format!("no ion {own_ion}")))?;
    let own = crosstalk_fraction(model, center, roi_diameter_um, own_ion)?;
    let other = crosstalk_fraction(model, center, roi_diameter_um, source_ion)?;
    Ok(other / own)
}

/// Relative cross-talk for an isolated PSF: ratio of energy in a disc
/// offset by `distance` to energy in the centred disc.
fn relative_disc(psf: &PointSpreadFunction, distance: f64, roi_diameter: f64) -> f64 {
    disc_energy(psf, distance, roi_diameter / 2.0) / psf.encircled_energy(roi_diameter / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoreHaloFit {
    pub core_sigma_um: f64,
    pub halo_weight: f64,
    pub halo_length_um: f64,
    pub nearest: f64,
    pub next_nearest: f64,
}

/// Solves for the halo weight and length of a core/halo profile so that an
/// ROI of `roi_diameter_um` centred on one ion collects `nearest` (resp.
/// `next_nearest`) of its own signal from an ion at `spacing_um` (resp.
/// twice that).
///
/// Nested bisection: for a fixed halo length the nearest-neighbour ratio
/// grows with the halo weight; the ratio of next-nearest to nearest grows
/// with the halo length.
pub fn fit_core_halo(
    core_sigma_um: f64,
    spacing_um: f64,
    roi_diameter_um: f64,
    nearest: f64,
    next_nearest: f64,
) -> Result<CoreHaloFit> {
    let eval = |w: f64, l: f64| -> Result<(f64, f64)> {
        let psf = PointSpreadFunction::core_halo(core_sigma_um, w, l, 20.0 * l + 10.0 * core_sigma_um)?;
        Ok((
            relative_disc(&psf, spacing_um, roi_diameter_um),
            relative_disc(&psf, 2.0 * spacing_um, roi_diameter_um),
        ))
    };
    let weight_for = |l: f64| -> Result<f64> {
        let (mut lo, mut hi) = (0.0, 0.999);
        if eval(hi, l)?.0 < nearest {
            return Ok(hi);
        }
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if eval(mid, l)?.0 < nearest {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    };
    let target_ratio = next_nearest / nearest;
    let (mut lo, mut hi) = (1.0, 60.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let w = weight_for(mid)?;
        let (a, b) = eval(w, mid)?;
        if b / a < target_ratio {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let halo_length_um = 0.5 * (lo + hi);
    let halo_weight = weight_for(halo_length_um)?;
    let (nn, nnn) = eval(halo_weight, halo_length_um)?;
    Ok(CoreHaloFit {
        core_sigma_um,
        halo_weight,
        halo_length_um,
        nearest: nn,
        next_nearest: nnn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LAMBDA: f64 = 397e-9;
    const NA: f64 = 0.25;

    #[test]
    fn airy_centre_is_one() {
        assert_eq!(airy_radial_intensity(0.0, LAMBDA, NA), 1.0);
    }

    #[test]
    fn airy_first_null_matches_disc_diameter() {
        let r1 = airy_first_null_radius_um(LAMBDA, NA);
        assert!((2.0 * r1 - 1.9).abs() < 0.05, "diameter {}", 2.0 * r1);
        assert!(airy_radial_intensity(r1, LAMBDA, NA) < 1e-12);
        assert!((r1 - 0.94).abs() < 0.01);
    }

    #[test]
    fn gaussian_encircled_energy_closed_form() {
        let psf = PointSpreadFunction::gaussian(2.0).unwrap();
        assert!((psf.encircled_energy(2.0) - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
        assert!((psf.encircled_energy(psf.support_radius()) - SUPPORT_ENERGY).abs() < 1e-9);
    }

    #[test]
    fn tabulated_normalises_and_is_linear() {
        let psf = PointSpreadFunction::tabulated(vec![0.0, 1.0, 2.0], vec![2.0, 1.0, 0.0]).unwrap();
        assert!((psf.encircled_energy(10.0) - 1.0).abs() < 1e-15);
        let mid = psf.density(0.5);
        assert!((mid / psf.density(0.0) - 0.75).abs() < 1e-12);
        assert_eq!(psf.density(2.5), 0.0);
    }

    #[test]
    fn tabulated_rejects_bad_input() {
        assert!(PointSpreadFunction::tabulated(vec![0.5, 1.0], vec![1.0, 1.0]).is_err());
        assert!(PointSpreadFunction::tabulated(vec![0.0, 1.0], vec![1.0, -1.0]).is_err());
        assert!(PointSpreadFunction::tabulated(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn disc_energy_centred_equals_encircled() {
        let psf = PointSpreadFunction::aberrated_default();
        let a = disc_energy(&psf, 1e-9, 7.0);
        let b = disc_energy(&psf, 0.0, 7.0);
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn aberrated_default_reproduces_fit() {
        let fit = fit_core_halo(ABERRATED_CORE_SIGMA_UM, 14.0, 14.0, 0.040, 0.009).unwrap();
        assert!((fit.halo_weight - ABERRATED_HALO_WEIGHT).abs() < 2e-3, "{fit:?}");
        assert!((fit.halo_length_um - ABERRATED_HALO_LENGTH_UM).abs() < 0.1, "{fit:?}");
        let psf = PointSpreadFunction::aberrated_default();
        assert!((relative_disc(&psf, 14.0, 14.0) - 0.040).abs() < 1e-3);
        assert!((relative_disc(&psf, 28.0, 14.0) - 0.009).abs() < 1e-3);
    }

    fn single_ion(psf: PointSpreadFunction) -> ImagingModel {
        let mut m = ImagingModel::uniform_chain(1, 0.0, psf, 2.6, 11, 11, 1000.0);
        // centre of pixel (5, 5)
        m.ion_positions_um = vec![[5.5 * 2.6, 5.5 * 2.6]];
        m
    }

    #[test]
    fn empty_bright_set_gives_zero_map() {
        let m = single_ion(PointSpreadFunction::gaussian(3.0).unwrap());
        assert!(pixel_rate_map(&m, &[]).unwrap().rates.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn centred_ion_map_is_reflection_symmetric() {
        let m = single_ion(PointSpreadFunction::aberrated_default());
        let map = pixel_rate_map(&m, &[0]).unwrap();
        let at = |x: usize, y: usize| map.rates[y * 11 + x];
        let mut worst: f64 = 0.0;
        for y in 0..11 {
            for x in 0..11 {
                let v = at(x, y);
                for w in [at(10 - x, y), at(x, 10 - y), at(10 - x, 10 - y)] {
                    worst = worst.max((v - w).abs() / v.max(1e-300));
                }
            }
        }
        assert!(worst < 1e-9, "asymmetry {worst}");
        let (imax, _) = map
            .rates
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert_eq!(imax, 5 * 11 + 5);
    }

    #[test]
    fn superposition_is_exact() {
        let m = ImagingModel::uniform_chain(
            3,
            14.0,
            PointSpreadFunction::aberrated_default(),
            2.6,
            30,
            10,
            2.0e5,
        );
        let a = pixel_rate_map(&m, &[0]).unwrap();
        let b = pixel_rate_map(&m, &[1]).unwrap();
        let ab = pixel_rate_map(&m, &[0, 1]).unwrap();
        for i in 0..ab.rates.len() {
            assert_eq!(ab.rates[i], a.rates[i] + b.rates[i]);
        }
    }

    #[test]
    fn rates_plus_spill_conserve_energy() {
        let m = single_ion(PointSpreadFunction::gaussian(2.0).unwrap());
        let map = pixel_rate_map(&m, &[0]).unwrap();
        let spill = m.spill_fraction(0).unwrap();
        let total = map.total() + spill * m.bright_rate_per_s;
        assert!((total - m.bright_rate_per_s).abs() < 1e-9 * m.bright_rate_per_s);
        assert!(spill >= 0.0 && spill < 1e-3);
    }

    #[test]
    fn ion_far_outside_grid_is_rejected() {
        let mut m = single_ion(PointSpreadFunction::gaussian(1.0).unwrap());
        m.ion_positions_um = vec![[-100.0, 10.0]];
        assert!(matches!(
            pixel_rate_map(&m, &[0]),
            Err(Error::IonOutsideField { ion: 0, .. })
        ));
    }

    #[test]
    fn duplicate_positions_rejected() {
        let mut m = single_ion(PointSpreadFunction::gaussian(1.0).unwrap());
        m.ion_positions_um = vec![[10.0, 10.0], [10.0, 10.0]];
        assert!(m.validate().is_err());
    }

    #[test]
    fn crosstalk_complete_for_huge_roi() {
        let mut m = single_ion(PointSpreadFunction::aberrated_default());
        m.ion_positions_um = vec![[0.0, 0.0]];
        let f = crosstalk_fraction(&m, [0.0, 0.0], 20.0 * 14.0, 0).unwrap();
        assert!((f - 1.0).abs() < 1e-3, "{f}");
    }

    #[test]
    fn airy_tail_follows_asymptote() {
        // The Airy ring energy falls off only as 2 / (pi x), so even a disc
        // 20 Airy diameters across misses ~0.8 % of the light.
        let psf = PointSpreadFunction::airy(LAMBDA, NA).unwrap();
        let r1 = airy_first_null_radius_um(LAMBDA, NA);
        for mult in [20.0, 100.0, 400.0] {
            let r = mult * r1;
            let x = BESSEL_J1_FIRST_ZERO * mult;
            let miss = 1.0 - psf.encircled_energy(r);
            let asym = 2.0 / (PI * x);
            assert!((miss / asym - 1.0).abs() < 0.05, "{mult}: {miss} vs {asym}");
        }
    }

    #[test]
    fn crosstalk_monotone_in_diameter() {
        let m = ImagingModel::uniform_chain(
            2,
            14.0,
            PointSpreadFunction::aberrated_default(),
            2.6,
            30,
            10,
            1.0,
        );
        let c = m.ion_positions_um[0];
        let mut last = 0.0;
        for i in 1..60 {
            let f = crosstalk_fraction(&m, c, i as f64, 1).unwrap();
            assert!(f >= last - 1e-12);
            last = f;
        }
    }

    #[test]
    fn crosstalk_rejects_nonpositive_diameter() {
        let m = single_ion(PointSpreadFunction::gaussian(1.0).unwrap());
        assert!(crosstalk_fraction(&m, [0.0, 0.0], 0.0, 0).is_err());
    }
}
