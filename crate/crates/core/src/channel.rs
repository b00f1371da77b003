//! Spherical-wave channel synthesis and RIS phase control.
//!
//! Every link coefficient is `k(d) * exp(-j 2 pi d / lambda)` with `d` the
//! exact element-pair distance and `k(d) = lambda / (4 pi d)`. Line-of-sight
//! terms are scaled by one complex gain per link; each non-line-of-sight
//! path is a point scatterer whose two spherical segments are chained.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, shape, Result};
use crate::geometry::{
    classify_region, element_positions, rayleigh_distance, ApertureRule, ArrayGeometry, FieldRegion, Point3,
    PolarCoord,
};
use crate::{Complex, SPEED_OF_LIGHT};

/// Which propagation branch carries the downlink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    /// BS straight to the device (`h_BU`).
    Direct,
    /// BS through the RIS to the device (`h_RE^H Phi H_BR`).
    Cascaded,
}

impl Link {
    /// Direct inside the beamfocusing range, cascaded everywhere beyond it.
    pub fn for_region(region: FieldRegion) -> Self {
        match region {
            FieldRegion::Bfr => Link::Direct,
            FieldRegion::Nbfr | FieldRegion::FarField => Link::Cascaded,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Link::Direct => "bs_directed",
            Link::Cascaded => "ris_assisted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GainModel {
    /// Deterministic gain, used to switch off fading in tests.
    Fixed { re: f64, im: f64 },
    /// Circularly-symmetric complex Gaussian `CN(0, variance)`.
    Rayleigh { variance: f64 },
}

impl GainModel {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Complex {
        match *self {
            GainModel::Fixed { re, im } => Complex::new(re, im),
            GainModel::Rayleigh { variance } => complex_gaussian(rng, variance),
        }
    }
}

/// Draws from `CN(0, variance)`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex::new(s * re, s * im)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// BS ULA element count `N`.
    pub bs_elements: usize,
    /// RIS UPA element count `M` (perfect square).
    pub ris_elements: usize,
    pub carrier_hz: f64,
    /// Transmit power `P_t` in watts.
    pub tx_power: f64,
    /// Element spacing in wavelengths for both arrays.
    pub spacing_wavelengths: f64,
    /// RIS centre in the BS frame.
    pub ris_position: PolarCoord,
    /// Total propagation paths per link, line of sight included.
    pub paths: usize,
    pub los_gain: GainModel,
    pub nlos_variance: f64,
    pub bs_aperture_rule: ApertureRule,
    pub ris_aperture_rule: ApertureRule,
    /// Device sampling region, also used to scatter NLoS points.
    pub r_range: (f64, f64),
    pub theta_range: (f64, f64),
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bs_elements == 0 || self.ris_elements == 0 {
            return Err(config("sim.N and sim.M must be at least 1"));
        }
        if !(self.tx_power > 0.0) {
            return Err(config("sim.Pt must be positive"));
        }
        if !(self.carrier_hz > 0.0) {
            return Err(config("sim.fc must be positive"));
        }
        if self.paths == 0 {
            return Err(config("sim.paths must be at least 1"));
        }
        if !(self.r_range.0 > 0.0 && self.r_range.0 < self.r_range.1) {
            return Err(config("sim.r_min/sim.r_max must satisfy 0 < r_min < r_max"));
        }
        if !(self.theta_range.0 < self.theta_range.1) {
            return Err(config("sim.theta_min must be below sim.theta_max"));
        }
        self.ris_geometry()?;
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn element_spacing(&self) -> f64 {
        self.spacing_wavelengths * self.wavelength()
    }

    pub fn bs_geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::ula(self.bs_elements, self.element_spacing())
    }

    pub fn ris_geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::upa(self.ris_elements, self.element_spacing())
    }

    /// Rayleigh distance of the BS array under the configured aperture rule.
    pub fn bs_rayleigh(&self) -> Result<f64> {
        let g = self.bs_geometry()?;
        rayleigh_distance(g.field_aperture(self.bs_aperture_rule), self.wavelength())
    }

    pub fn ris_rayleigh(&self) -> Result<f64> {
        let g = self.ris_geometry()?;
        rayleigh_distance(g.field_aperture(self.ris_aperture_rule), self.wavelength())
    }
}

/// Channels of one device placement.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// BS to device, length `N`.
    pub h_bu: Vec<Complex>,
    /// BS to RIS, `M x N` row-major (row `m` holds `h_BR^m`).
    pub h_br: Vec<Complex>,
    /// RIS to device, length `M`.
    pub h_re: Vec<Complex>,
    pub wavelength: f64,
    pub device: PolarCoord,
    pub ris: PolarCoord,
    pub bs_geometry: ArrayGeometry,
    pub ris_geometry: ArrayGeometry,
    /// BS Rayleigh distance used for branch selection.
    pub rayleigh: f64,
    pub link: Link,
    /// Line-of-sight gains drawn for `(h_bu, h_br, h_re)`.
    pub los_gains: [Complex; 3],
    pub scatterers: Vec<Scatterer>,
}

impl ChannelSet {
    pub fn n(&self) -> usize {
        self.h_bu.len()
    }

    pub fn m(&self) -> usize {
        self.h_re.len()
    }

    pub fn region(&self) -> FieldRegion {
        classify_region(self.device.r, self.rayleigh).expect("validated at construction")
    }

    /// Field incident on each RIS element for BS weights `w`: `H_BR w`.
    pub fn incident_field(&self, w: &[Complex]) -> Result<Vec<Complex>> {
        let n = self.n();
        if w.len() != n {
            return Err(shape(format!("BS codeword has {} entries, channel has N = {n}", w.len())));
        }
        Ok(self.h_br.chunks_exact(n).map(|row| dot(row, w)).collect())
    }
}

/// Free-space amplitude `lambda / (4 pi d)`.
pub fn path_loss(dist: f64, wavelength: f64) -> Result<f64> {
    if !(dist > 0.0) {
        return Err(domain(format!("path length must be positive, got {dist}")));
    }
    Ok(wavelength / (4.0 * PI * dist))
}

#[inline]
fn spherical(amplitude: f64, dist: f64, wavelength: f64) -> Complex {
    Complex::from_polar(amplitude, -2.0 * PI * dist / wavelength)
}

#[inline]
pub(crate) fn dot(a: &[Complex], b: &[Complex]) -> Complex {
    a.iter().zip(b).fold(Complex::new(0.0, 0.0), |acc, (x, y)| acc + x * y)
}

const COINCIDENT: f64 = 1e-9;

/// Line-of-sight responses from each of `from` to `to`, scaled by `gain`.
pub fn los_vector(from: &[Point3], to: Point3, wavelength: f64, gain: Complex) -> Result<Vec<Complex>> {
    from.iter()
        .map(|p| {
            let d = p.distance(&to);
            if d < COINCIDENT {
                return Err(domain("device coincides with an array element"));
            }
            Ok(gain * spherical(wavelength / (4.0 * PI * d), d, wavelength))
        })
        .collect()
}

/// Adds one scatterer path `a -> q -> b` to every pair of a link.
fn add_scatter(out: &mut [Complex], rows: &[f64], cols: &[f64], wavelength: f64, gain: Complex) {
    let k = wavelength / (4.0 * PI);
    let ncols = cols.len();
    for (i, &d1) in rows.iter().enumerate() {
        for (j, &d2) in cols.iter().enumerate() {
            let d = d1 + d2;
            out[i * ncols + j] += gain * spherical(k / d, d, wavelength);
        }
    }
}

/// A point scatterer shared by every link of a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub point: Point3,
    /// Path gains on the `(BS-device, BS-RIS, RIS-device)` links.
    pub gains: [Complex; 3],
}

/// Per-device links of a [`Scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceLinks {
    pub device: PolarCoord,
    pub h_bu: Vec<Complex>,
    pub h_re: Vec<Complex>,
    /// Line-of-sight gains of `h_bu` and `h_re`.
    pub los_gains: [Complex; 2],
}

/// Several devices sharing one BS-RIS channel and one scatterer field.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub h_br: Vec<Complex>,
    pub br_gain: Complex,
    pub devices: Vec<DeviceLinks>,
    pub scatterers: Vec<Scatterer>,
    pub wavelength: f64,
    pub ris: PolarCoord,
    pub bs_geometry: ArrayGeometry,
    pub ris_geometry: ArrayGeometry,
    pub rayleigh: f64,
}

impl Scene {
    /// `H_BR w`.
    pub fn incident_field(&self, w: &[Complex]) -> Result<Vec<Complex>> {
        let n = self.bs_geometry.num_elements;
        if w.len() != n {
            return Err(shape(format!("BS codeword has {} entries, scene has N = {n}", w.len())));
        }
        Ok(self.h_br.chunks_exact(n).map(|row| dot(row, w)).collect())
    }

    /// The [`ChannelSet`] seen by device `i`.
    pub fn channel(&self, i: usize) -> Result<ChannelSet> {
        let d = self
            .devices
            .get(i)
            .ok_or_else(|| shape(format!("scene has {} devices, asked for {i}", self.devices.len())))?;
        Ok(ChannelSet {
            h_bu: d.h_bu.clone(),
            h_br: self.h_br.clone(),
            h_re: d.h_re.clone(),
            wavelength: self.wavelength,
            device: d.device,
            ris: self.ris,
            bs_geometry: self.bs_geometry,
            ris_geometry: self.ris_geometry,
            rayleigh: self.rayleigh,
            link: Link::for_region(classify_region(d.device.r, self.rayleigh)?),
            los_gains: [d.los_gains[0], self.br_gain, d.los_gains[1]],
            scatterers: self.scatterers.clone(),
        })
    }
}

/// Synthesises the BS-RIS channel plus `h_BU` and `h_RE` for every device.
///
/// Random draws happen in a fixed order: the BS-RIS line-of-sight gain, the
/// `(h_BU, h_RE)` line-of-sight gains of each device, then for each of the
/// `paths - 1` scatterers its range, angle and three path gains.
pub fn gen_scene<R: Rng + ?Sized>(cfg: &SimConfig, devices: &[PolarCoord], ris: PolarCoord, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let lambda = cfg.wavelength();
    let bs_geom = cfg.bs_geometry()?;
    let ris_geom = cfg.ris_geometry()?;
    let bs_el = element_positions(&bs_geom, None);
    let ris_el = element_positions(&ris_geom, Some(ris));
    let (n, m) = (bs_el.len(), ris_el.len());

    let br_gain = cfg.los_gain.draw(rng);
    let mut h_br = Vec::with_capacity(m * n);
    for rp in &ris_el {
        let row = los_vector(&bs_el, *rp, lambda, br_gain)
            .map_err(|_| domain("RIS element coincides with a BS element"))?;
        h_br.extend(row);
    }

    let mut links = Vec::with_capacity(devices.len());
    for &device in devices {
        let g_bu = cfg.los_gain.draw(rng);
        let g_re = cfg.los_gain.draw(rng);
        let dev = device.to_point();
        links.push(DeviceLinks {
            device,
            h_bu: los_vector(&bs_el, dev, lambda, g_bu)?,
            h_re: los_vector(&ris_el, dev, lambda, g_re)?,
            los_gains: [g_bu, g_re],
        });
    }

    let mut scatterers = Vec::with_capacity(cfg.paths - 1);
    for _ in 1..cfg.paths {
        let r = rng.random_range(cfg.r_range.0..cfg.r_range.1);
        let t = rng.random_range(cfg.theta_range.0..cfg.theta_range.1);
        let q = PolarCoord::new(r, t)?.to_point();
        let gains = [
            complex_gaussian(rng, cfg.nlos_variance),
            complex_gaussian(rng, cfg.nlos_variance),
            complex_gaussian(rng, cfg.nlos_variance),
        ];
        let d_bs: Vec<f64> = bs_el.iter().map(|p| p.distance(&q)).collect();
        let d_ris: Vec<f64> = ris_el.iter().map(|p| p.distance(&q)).collect();
        add_scatter(&mut h_br, &d_ris, &d_bs, lambda, gains[1]);
        for l in &mut links {
            let d_dev = [q.distance(&l.device.to_point())];
            add_scatter(&mut l.h_bu, &d_bs, &d_dev, lambda, gains[0]);
            add_scatter(&mut l.h_re, &d_ris, &d_dev, lambda, gains[2]);
        }
        scatterers.push(Scatterer { point: q, gains });
    }

    Ok(Scene {
        h_br,
        br_gain,
        devices: links,
        scatterers,
        wavelength: lambda,
        ris,
        bs_geometry: bs_geom,
        ris_geometry: ris_geom,
        rayleigh: cfg.bs_rayleigh()?,
    })
}

/// Synthesises `h_BU`, `H_BR` and `h_RE` for one device placement.
pub fn gen_channels<R: Rng + ?Sized>(
    cfg: &SimConfig,
    device: PolarCoord,
    ris: PolarCoord,
    rng: &mut R,
) -> Result<ChannelSet> {
    gen_scene(cfg, &[device], ris, rng)?.channel(0)
}

/// RIS phase shifts `theta_m` in `[0, 2 pi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RisPhaseConfig {
    phases: Vec<f64>,
}

impl RisPhaseConfig {
    /// Wraps arbitrary angles into `[0, 2 pi)`.
    pub fn from_angles(angles: impl IntoIterator<Item = f64>) -> Self {
        let phases = angles
            .into_iter()
            .map(|a| {
                let w = a.rem_euclid(2.0 * PI);
                // rem_euclid can round up to exactly 2 pi for tiny negative inputs
                if w >= 2.0 * PI { 0.0 } else { w }
            })
            .collect();
        Self { phases }
    }

    pub fn uniform(m: usize, angle: f64) -> Self {
        Self::from_angles(std::iter::repeat_n(angle, m))
    }

    pub fn random<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Self {
        Self::from_angles((0..m).map(|_| rng.random_range(0.0..2.0 * PI)))
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn factors(&self) -> impl Iterator<Item = Complex> + '_ {
        self.phases.iter().map(|&t| Complex::from_polar(1.0, t))
    }
}

/// `h_RE^H diag(e^{j theta}) H_BR w`.
pub fn cascade_gain(ch: &ChannelSet, phi: &RisPhaseConfig, codeword: &[Complex]) -> Result<Complex> {
    if phi.len() != ch.m() {
        return Err(shape(format!("RIS config has {} phases, channel has M = {}", phi.len(), ch.m())));
    }
    let incident = ch.incident_field(codeword)?;
    Ok(ch
        .h_re
        .iter()
        .zip(phi.factors())
        .zip(&incident)
        .fold(Complex::new(0.0, 0.0), |acc, ((h, f), x)| acc + h.conj() * f * x))
}

/// Phases that make every cascade path arrive co-phased at `focal`.
///
/// `focal` is the geometric focal point expressed in the BS frame. For each
/// element, `theta_m = -arg((H_BR w)_m) - 2 pi d_m / lambda`, which cancels
/// both the incident phase and the conjugated RIS-to-focal phase. Elements
/// with exactly zero incident field get phase 0.
pub fn ris_focus_phases(ch: &ChannelSet, codeword: &[Complex], focal: PolarCoord) -> Result<RisPhaseConfig> {
    let incident = ch.incident_field(codeword)?;
    let ris_el = element_positions(&ch.ris_geometry, Some(ch.ris));
    focus_phases_from_incident(&incident, &ris_el, focal.to_point(), ch.wavelength)
}

/// [`ris_focus_phases`] for an already computed incident field.
pub fn focus_phases_from_incident(
    incident: &[Complex],
    ris_elements: &[Point3],
    focal: Point3,
    wavelength: f64,
) -> Result<RisPhaseConfig> {
    if incident.len() != ris_elements.len() {
        return Err(shape(format!("incident field has {} entries for {} elements", incident.len(), ris_elements.len())));
    }
    let mut angles = Vec::with_capacity(ris_elements.len());
    for (p, x) in ris_elements.iter().zip(incident) {
        let d = p.distance(&focal);
        if d < COINCIDENT {
            return Err(domain("focal point coincides with a RIS element"));
        }
        if x.norm_sqr() == 0.0 {
            angles.push(0.0);
        } else {
            angles.push(-x.arg() - (2.0 * PI * d / wavelength).rem_euclid(2.0 * PI));
        }
    }
    Ok(RisPhaseConfig::from_angles(angles))
}

/// Phases that imprint a constant-modulus RIS profile `w_ris` on top of the
/// incident field: `theta_m = arg(w_ris_m) - arg(incident_m)`.
pub fn ris_phases_for_profile(incident: &[Complex], profile: &[Complex]) -> Result<RisPhaseConfig> {
    if incident.len() != profile.len() {
        return Err(shape(format!("profile length {} vs M = {}", profile.len(), incident.len())));
    }
    Ok(RisPhaseConfig::from_angles(
        incident
            .iter()
            .zip(profile)
            .map(|(x, w)| if x.norm_sqr() == 0.0 { 0.0 } else { w.arg() - x.arg() }),
    ))
}

/// Noise calibration for one SNR point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub snr_db: f64,
    /// Noise power `sigma^2` in watts.
    pub sigma_sq: f64,
    pub seed: u64,
}

impl NoiseModel {
    /// `sigma^2 = reference / 10^(snr/10)`.
    pub fn calibrated(snr_db: f64, reference_power: f64, seed: u64) -> Result<Self> {
        Ok(Self { snr_db, sigma_sq: sigma_from_reference(snr_db, reference_power)?, seed })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Complex {
        complex_gaussian(rng, self.sigma_sq)
    }
}

pub fn sigma_from_reference(snr_db: f64, reference_power: f64) -> Result<f64> {
    if !(reference_power > 0.0) || !reference_power.is_finite() {
        return Err(domain(format!("reference power must be positive, got {reference_power}")));
    }
    Ok(reference_power / 10f64.powf(snr_db / 10.0))
}
