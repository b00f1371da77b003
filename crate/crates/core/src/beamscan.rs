//! Beam-scan feedback maps, datasets and physical link metrics.
//!
//! A scan map holds the received power of every codeword of a codebook for
//! one device, laid out l-major on the `L x S` grid. Maps are the network's
//! input; the exhaustive-search argmax over a map is the reference beam.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    complex_gaussian, dot, focus_phases_from_incident, gen_channels, sigma_from_reference, ChannelSet, Link,
    NoiseModel, RisPhaseConfig, Scene, SimConfig,
};
use crate::codebook::{
    build_coarse_codebook, build_fine_codebook, codebook_to_ris_frame, steering_from_elements, steering_vector,
    Codebook, CodebookSpec, Frame,
};
use crate::error::{config, domain, shape, Error, Result};
use crate::geometry::{element_positions, PolarCoord};
use crate::Complex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamScanMap {
    pub l: usize,
    pub s: usize,
    /// l-major powers, watts or min-max normalised.
    pub powers: Vec<f64>,
    pub valid: Vec<bool>,
    pub snr_db: f64,
    /// Device position in the BS frame.
    pub truth: PolarCoord,
    pub stage: Stage,
    pub link: Link,
    pub normalized: bool,
}

impl BeamScanMap {
    pub fn get(&self, l: usize, s: usize) -> f64 {
        self.powers[l * self.s + s]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Min-max normalisation of the valid cells onto `[0, 1]`.
    ///
    /// A map whose valid cells are all equal becomes all ones.
    pub fn normalize(&mut self) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (p, _) in self.powers.iter().zip(&self.valid).filter(|(_, v)| **v) {
            lo = lo.min(*p);
            hi = hi.max(*p);
        }
        let span = hi - lo;
        for (p, v) in self.powers.iter_mut().zip(&self.valid) {
            *p = match (*v, span > 0.0) {
                (false, _) => 0.0,
                (true, true) => (*p - lo) / span,
                (true, false) => 1.0,
            };
        }
        self.normalized = true;
    }

    pub fn normalized(mut self) -> Self {
        self.normalize();
        self
    }
}

/// Affine map between device coordinates and the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScale {
    pub r_min: f64,
    pub r_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl Default for LabelScale {
    fn default() -> Self {
        Self { r_min: 3.0, r_max: 100.0, theta_min: -PI / 3.0, theta_max: PI / 3.0 }
    }
}

impl LabelScale {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self { r_min: cfg.r_range.0, r_max: cfg.r_range.1, theta_min: cfg.theta_range.0, theta_max: cfg.theta_range.1 }
    }

    pub fn normalize(&self, p: PolarCoord) -> [f64; 2] {
        [
            (p.r - self.r_min) / (self.r_max - self.r_min),
            (p.theta - self.theta_min) / (self.theta_max - self.theta_min),
        ]
    }

    /// Inverse of [`normalize`](Self::normalize). Out-of-range ranges are
    /// clamped to a small positive value so the result is a valid position.
    pub fn denormalize(&self, label: [f64; 2]) -> PolarCoord {
        let r = self.r_min + label[0] * (self.r_max - self.r_min);
        let theta = self.theta_min + label[1] * (self.theta_max - self.theta_min);
        PolarCoord { r: r.max(1e-6), theta: theta.clamp(-PI, PI) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub map: BeamScanMap,
    /// Normalised `(r, theta)`.
    pub label: [f64; 2],
    /// Best cell of the noiseless map.
    pub oracle: (usize, usize),
    /// Normalised 2x2 coarse map of the same device, l-major.
    pub coarse: Option<[f64; 4]>,
    pub seed: u64,
    pub split: Option<Split>,
}

/// `|sqrt(P_t) g + u|^2` with `g` the direct or cascaded gain.
///
/// The branch follows `ch.link`; `phi` must be given on the cascaded
/// branch and is ignored on the direct one.
pub fn received_power(
    ch: &ChannelSet,
    codeword: &[Complex],
    phi: Option<&RisPhaseConfig>,
    noise: Option<Complex>,
    p_t: f64,
) -> Result<f64> {
    let g = match ch.link {
        Link::Direct => {
            if codeword.len() != ch.n() {
                return Err(shape(format!("codeword has {} entries, N = {}", codeword.len(), ch.n())));
            }
            ch.h_bu.iter().zip(codeword).map(|(h, w)| h.conj() * w).sum()
        }
        Link::Cascaded => {
            let phi = phi.ok_or_else(|| config("cascaded branch needs a RIS phase configuration"))?;
            crate::channel::cascade_gain(ch, phi, codeword)?
        }
    };
    Ok((g * p_t.sqrt() + noise.unwrap_or_default()).norm_sqr())
}

/// Per-channel constants that make every cell of a scan cheap.
enum ScanKernel {
    /// `conj(h_BU)`.
    Direct(Vec<Complex>),
    /// `conj(h_RE_m) |x_m| sqrt(M)` with `x = H_BR w_bs`; a RIS-frame
    /// codeword `w` then yields the gain `sum_m c_m w_m`.
    Cascaded(Vec<Complex>),
}

impl ScanKernel {
    fn new(ch: &ChannelSet, cb: &Codebook, bs_to_ris: Option<&[Complex]>) -> Result<Self> {
        match (ch.link, cb.frame) {
            (Link::Direct, Frame::Bs) => Ok(ScanKernel::Direct(ch.h_bu.iter().map(|h| h.conj()).collect())),
            (Link::Cascaded, Frame::Ris) => {
                let w = bs_to_ris.ok_or_else(|| config("cascaded scan needs the BS codeword aimed at the RIS"))?;
                let x = ch.incident_field(w)?;
                let scale = (ch.m() as f64).sqrt();
                Ok(ScanKernel::Cascaded(ch.h_re.iter().zip(&x).map(|(h, x)| h.conj() * x.norm() * scale).collect()))
            }
            (link, frame) => Err(config(format!("{frame:?}-frame codebook cannot scan the {} branch", link.name()))),
        }
    }

    fn gain(&self, weights: &[Complex]) -> Result<Complex> {
        let c = match self {
            ScanKernel::Direct(c) | ScanKernel::Cascaded(c) => c,
        };
        if c.len() != weights.len() {
            return Err(shape(format!("codeword has {} entries, expected {}", weights.len(), c.len())));
        }
        Ok(dot(c, weights))
    }
}

/// One received power per codebook cell.
///
/// The direct branch takes a BS-frame codebook. The cascaded branch takes a
/// RIS-frame codebook plus the BS codeword aimed at the RIS; each cell then
/// sets the RIS phases so the reflected profile matches the cell's codeword.
/// Each cell gets a fresh noise draw from a generator seeded with
/// `noise.seed`. Cells without a codeword are masked out and set to zero.
pub fn scan_map(
    ch: &ChannelSet,
    cb: &Codebook,
    bs_to_ris: Option<&[Complex]>,
    noise: Option<&NoiseModel>,
    p_t: f64,
    snr_db: f64,
) -> Result<BeamScanMap> {
    let kernel = ScanKernel::new(ch, cb, bs_to_ris)?;
    let mut rng = noise.map(|n| ChaCha8Rng::seed_from_u64(n.seed));
    let amp = p_t.sqrt();
    let mut powers = Vec::with_capacity(cb.cells.len());
    let mut valid = Vec::with_capacity(cb.cells.len());
    for cell in &cb.cells {
        let u = match (noise, rng.as_mut()) {
            (Some(n), Some(r)) => n.draw(r),
            _ => Complex::default(),
        };
        match cell {
            Some(cw) => {
                powers.push((kernel.gain(&cw.weights)? * amp + u).norm_sqr());
                valid.push(true);
            }
            None => {
                powers.push(0.0);
                valid.push(false);
            }
        }
    }
    Ok(BeamScanMap {
        l: cb.l,
        s: cb.s,
        powers,
        valid,
        snr_db,
        truth: ch.device,
        stage: if cb.l == 2 && cb.s == 2 { Stage::Coarse } else { Stage::Fine },
        link: ch.link,
        normalized: false,
    })
}

/// `sigma^2 = P / 10^(snr/10)` with `P` the mean noiseless received power
/// over the codebook's valid cells.
pub fn noise_sigma(snr_db: f64, ch: &ChannelSet, cb: &Codebook, bs_to_ris: Option<&[Complex]>, p_t: f64) -> Result<f64> {
    if cb.valid_count() == 0 {
        return Err(domain("codebook has no valid codewords"));
    }
    let clean = scan_map(ch, cb, bs_to_ris, None, p_t, snr_db)?;
    let mean = mean_valid(&clean);
    if mean == 0.0 {
        return Err(domain("every codeword delivers zero power"));
    }
    sigma_from_reference(snr_db, mean)
}

fn mean_valid(map: &BeamScanMap) -> f64 {
    let (sum, n) = map
        .powers
        .iter()
        .zip(&map.valid)
        .filter(|(_, v)| **v)
        .fold((0.0, 0usize), |(s, n), (p, _)| (s + p, n + 1));
    sum / n as f64
}

/// Keeps the cells with even `l + s` (0-based) and masks the rest.
pub fn half_scan_map(full: &BeamScanMap) -> BeamScanMap {
    let mut out = full.clone();
    for l in 0..full.l {
        for s in 0..full.s {
            if (l + s) % 2 == 1 {
                out.powers[l * full.s + s] = 0.0;
                out.valid[l * full.s + s] = false;
            }
        }
    }
    out
}

/// Argmax over valid cells; ties go to the smallest l-major index.
pub fn oracle_best_index(map: &BeamScanMap) -> Result<(usize, usize)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&p, &v)) in map.powers.iter().zip(&map.valid).enumerate() {
        if v && best.is_none_or(|(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    let (i, _) = best.ok_or_else(|| domain("scan map has no valid cells"))?;
    Ok((i / map.s, i % map.s))
}

/// `|a^H b| / (|a| |b|)`, which for constant-modulus vectors with unit
/// entries is `|a^H b| / N`.
pub fn array_gain(a: &[Complex], b: &[Complex]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape(format!("array gain of vectors of length {} and {}", a.len(), b.len())));
    }
    let na: f64 = a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(domain("array gain of a zero vector"));
    }
    let ip: Complex = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
    Ok(ip.norm() / (na * nb))
}

/// `log2(1 + signal / sigma^2)` in bits/s/Hz.
pub fn achievable_rate(signal_power: f64, sigma_sq: f64) -> Result<f64> {
    if !(sigma_sq > 0.0) {
        return Err(domain(format!("noise power must be positive, got {sigma_sq}")));
    }
    Ok((signal_power / sigma_sq).ln_1p() / std::f64::consts::LN_2)
}

/// Radial probe positions `r_lo..=r_hi`, evenly spaced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialSweep {
    pub r_lo: f64,
    pub r_hi: f64,
    pub points: usize,
}

impl RadialSweep {
    /// `[r / factor, r * factor]` with `points` probes.
    pub fn around(r: f64, factor: f64, points: usize) -> Self {
        Self { r_lo: r / factor, r_hi: r * factor, points }
    }

    pub fn radius(&self, i: usize) -> f64 {
        self.r_lo + (self.r_hi - self.r_lo) * i as f64 / (self.points - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FocalDepth {
    /// `r_max - r_min`.
    pub depth: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub peak_r: f64,
    /// The half-power interval reached an end of the sweep, so `depth` is a
    /// lower bound.
    pub truncated: bool,
}

/// Normalised power gain along the BS radial through `focal`.
///
/// Every link uses unit amplitudes, so the pattern shows the focusing
/// alone. On the direct branch the BS focuses on `focal`; on the cascaded
/// branch the BS focuses on the RIS centre and the RIS focuses on `focal`.
pub fn radial_gain_profile(cfg: &SimConfig, focal: PolarCoord, link: Link, sweep: &RadialSweep) -> Result<Vec<f64>> {
    if sweep.points < 3 || !(sweep.r_lo > 0.0 && sweep.r_lo < sweep.r_hi) {
        return Err(config("radial sweep needs 0 < r_lo < r_hi and at least 3 points"));
    }
    if !(sweep.r_lo <= focal.r && focal.r <= sweep.r_hi) {
        return Err(domain("radial sweep does not cover the focal distance"));
    }
    let lambda = cfg.wavelength();
    let k = 2.0 * PI / lambda;
    let bs_el = element_positions(&cfg.bs_geometry()?, None);
    let unit = |d: f64| Complex::from_polar(1.0, -k * d);
    let probe = |i: usize| PolarCoord { r: sweep.radius(i), theta: focal.theta }.to_point();
    let fp = focal.to_point();

    let (elements, out) = match link {
        Link::Direct => {
            let w = steering_from_elements(&bs_el, crate::geometry::Point3::ORIGIN, fp, lambda)?;
            (bs_el, w)
        }
        Link::Cascaded => {
            let ris = cfg.ris_position;
            let ris_el = element_positions(&cfg.ris_geometry()?, Some(ris));
            let w = steering_from_elements(&bs_el, crate::geometry::Point3::ORIGIN, ris.to_point(), lambda)?;
            let incident: Vec<Complex> =
                ris_el.iter().map(|p| bs_el.iter().zip(&w).map(|(b, w)| unit(p.distance(b)) * w).sum()).collect();
            let phi = focus_phases_from_incident(&incident, &ris_el, fp, lambda)?;
            let out = phi.factors().zip(&incident).map(|(f, x)| f * x).collect();
            (ris_el, out)
        }
    };
    let pattern = |i: usize| -> f64 {
        let p = probe(i);
        elements.iter().zip(&out).map(|(e, o)| unit(e.distance(&p)).conj() * o).sum::<Complex>().norm_sqr()
    };
    Ok((0..sweep.points).map(pattern).collect())
}

/// 3 dB focal depth of a beam focused on `focal`.
///
/// Half-power crossings are interpolated linearly between probes.
pub fn focal_depth_3db(cfg: &SimConfig, focal: PolarCoord, link: Link, sweep: &RadialSweep) -> Result<FocalDepth> {
    let g = radial_gain_profile(cfg, focal, link, sweep)?;
    let (peak, &gmax) = g
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("sweep has points");
    if peak == 0 || peak == g.len() - 1 {
        return Err(domain("gain peak lies on the edge of the radial sweep"));
    }
    let half = gmax / 2.0;
    let cross = |i: usize, j: usize| {
        // g[i] >= half > g[j], adjacent probes
        let t = (g[i] - half) / (g[i] - g[j]);
        sweep.radius(i) + t * (sweep.radius(j) - sweep.radius(i))
    };
    let mut truncated = false;
    let mut lo = peak;
    while lo > 0 && g[lo - 1] >= half {
        lo -= 1;
    }
    let r_min = if lo == 0 {
        truncated = true;
        sweep.r_lo
    } else {
        cross(lo, lo - 1)
    };
    let mut hi = peak;
    while hi + 1 < g.len() && g[hi + 1] >= half {
        hi += 1;
    }
    let r_max = if hi + 1 == g.len() {
        truncated = true;
        sweep.r_hi
    } else {
        cross(hi, hi + 1)
    };
    Ok(FocalDepth { depth: r_max - r_min, r_min, r_max, peak_r: sweep.radius(peak), truncated })
}

/// A transmission focused on one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub link: Link,
    pub bs: Vec<Complex>,
    pub ris: Option<RisPhaseConfig>,
    /// Field leaving the RIS, `Phi H_BR w`, on the cascaded branch.
    ris_out: Vec<Complex>,
}

/// Focuses a beam of `scene` on `focal` along the given branch.
pub fn focus_beam(scene: &Scene, focal: PolarCoord, link: Link) -> Result<Beam> {
    match link {
        Link::Direct => Ok(Beam {
            link,
            bs: steering_vector(&scene.bs_geometry, focal, scene.wavelength)?,
            ris: None,
            ris_out: Vec::new(),
        }),
        Link::Cascaded => {
            let bs = steering_vector(&scene.bs_geometry, scene.ris, scene.wavelength)?;
            let incident = scene.incident_field(&bs)?;
            let ris_el = element_positions(&scene.ris_geometry, Some(scene.ris));
            let phi = focus_phases_from_incident(&incident, &ris_el, focal.to_point(), scene.wavelength)?;
            let ris_out = phi.factors().zip(&incident).map(|(f, x)| f * x).collect();
            Ok(Beam { link, bs, ris: Some(phi), ris_out })
        }
    }
}

/// Complex gain of `beam` at scene device `device`.
pub fn beam_gain(scene: &Scene, beam: &Beam, device: usize) -> Result<Complex> {
    let d = scene
        .devices
        .get(device)
        .ok_or_else(|| shape(format!("scene has {} devices, asked for {device}", scene.devices.len())))?;
    Ok(match beam.link {
        Link::Direct => d.h_bu.iter().zip(&beam.bs).map(|(h, w)| h.conj() * w).sum(),
        Link::Cascaded => d.h_re.iter().zip(&beam.ris_out).map(|(h, o)| h.conj() * o).sum(),
    })
}

/// Interference-plus-noise power at each victim while the scene transmits
/// toward `serving`: `P_t |g|^2 + |u|^2` with `u ~ CN(0, sigma_sq)`.
///
/// The scene's device 0 is the served device and devices `1..` the victims.
pub fn interference_power<R: Rng + ?Sized>(
    scene: &Scene,
    serving: PolarCoord,
    link: Link,
    sigma_sq: f64,
    p_t: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let beam = focus_beam(scene, serving, link)?;
    (1..scene.devices.len())
        .map(|i| Ok(beam_gain(scene, &beam, i)?.norm_sqr() * p_t + noise_power(sigma_sq, rng)))
        .collect()
}

/// Every device served at once by a beam focused on its own position.
/// Device `i` collects the power of all other beams plus noise.
pub fn aggregate_interference<R: Rng + ?Sized>(
    scene: &Scene,
    link: Link,
    sigma_sq: f64,
    p_t: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let beams =
        scene.devices.iter().map(|d| focus_beam(scene, d.device, link)).collect::<Result<Vec<_>>>()?;
    (0..scene.devices.len())
        .map(|i| {
            let mut total = 0.0;
            for (j, beam) in beams.iter().enumerate() {
                if j != i {
                    total += beam_gain(scene, beam, i)?.norm_sqr() * p_t;
                }
            }
            Ok(total + noise_power(sigma_sq, rng))
        })
        .collect()
}

fn noise_power<R: Rng + ?Sized>(sigma_sq: f64, rng: &mut R) -> f64 {
    if sigma_sq > 0.0 {
        complex_gaussian(rng, sigma_sq).norm_sqr()
    } else {
        0.0
    }
}

/// Codebooks shared by every sample of a dataset.
#[derive(Debug, Clone)]
pub struct ScanBooks {
    pub fine_bs: Codebook,
    pub fine_ris: Codebook,
    pub coarse: Codebook,
    /// BS codeword aimed at the RIS centre.
    pub bs_to_ris: Vec<Complex>,
}

impl ScanBooks {
    pub fn new(cfg: &SimConfig, spec: &CodebookSpec) -> Result<Self> {
        let lambda = cfg.wavelength();
        let bs = cfg.bs_geometry()?;
        let fine_bs = build_fine_codebook(spec, &bs, lambda)?;
        let fine_ris = codebook_to_ris_frame(&fine_bs, cfg.ris_position, &cfg.ris_geometry()?, lambda)?;
        let aperture = bs.field_aperture(cfg.bs_aperture_rule);
        let span = cfg.theta_range.1 - cfg.theta_range.0;
        let coarse = build_coarse_codebook(aperture, lambda, span, &bs)?;
        let bs_to_ris = steering_vector(&bs, cfg.ris_position, lambda)?;
        Ok(Self { fine_bs, fine_ris, coarse, bs_to_ris })
    }

    /// The fine codebook serving `link`.
    pub fn fine_for(&self, link: Link) -> &Codebook {
        match link {
            Link::Direct => &self.fine_bs,
            Link::Cascaded => &self.fine_ris,
        }
    }

    fn bs_codeword(&self, link: Link) -> Option<&[Complex]> {
        match link {
            Link::Direct => None,
            Link::Cascaded => Some(&self.bs_to_ris),
        }
    }

    /// Noiseless and noisy fine maps of `ch`; the noise is calibrated
    /// against the noiseless map's mean.
    pub fn fine_maps(&self, ch: &ChannelSet, snr_db: f64, noise_seed: u64, p_t: f64) -> Result<(BeamScanMap, BeamScanMap)> {
        let cb = self.fine_for(ch.link);
        let w = self.bs_codeword(ch.link);
        let clean = scan_map(ch, cb, w, None, p_t, snr_db)?;
        let noise = NoiseModel::calibrated(snr_db, mean_valid(&clean), noise_seed)?;
        let noisy = scan_map(ch, cb, w, Some(&noise), p_t, snr_db)?;
        Ok((clean, noisy))
    }

    /// Noisy coarse map over the direct link.
    pub fn coarse_map(&self, ch: &ChannelSet, snr_db: f64, noise_seed: u64, p_t: f64) -> Result<BeamScanMap> {
        let mut direct = ch.clone();
        direct.link = Link::Direct;
        let clean = scan_map(&direct, &self.coarse, None, None, p_t, snr_db)?;
        let noise = NoiseModel::calibrated(snr_db, mean_valid(&clean), noise_seed)?;
        let mut map = scan_map(&direct, &self.coarse, None, Some(&noise), p_t, snr_db)?;
        map.link = ch.link;
        Ok(map)
    }
}

/// Generation parameters for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub stage: Stage,
    pub snr_list: Vec<f64>,
    pub per_snr: usize,
    pub base_seed: u64,
    /// Fractions of validation and test samples per SNR bucket.
    pub val_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub seed: u64,
    pub snr_db: f64,
    pub r: f64,
    pub theta: f64,
    pub link: Link,
    pub oracle: (usize, usize),
    pub coarse: Option<[f64; 4]>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub l: usize,
    pub s: usize,
    pub sim: SimConfig,
    pub codebook: CodebookSpec,
    pub spec: DatasetSpec,
    pub labels: LabelScale,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sim: SimConfig,
    pub codebook: CodebookSpec,
    pub spec: DatasetSpec,
    pub labels: LabelScale,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == Some(which))
    }

    pub fn at_snr(&self, snr_db: f64) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.map.snr_db == snr_db)
    }
}

/// Builds one sample from its seed.
pub fn generate_sample(
    cfg: &SimConfig,
    books: &ScanBooks,
    labels: &LabelScale,
    stage: Stage,
    snr_db: f64,
    seed: u64,
) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(cfg.r_range.0..cfg.r_range.1);
    let theta = rng.random_range(cfg.theta_range.0..cfg.theta_range.1);
    let device = PolarCoord::new(r, theta)?;
    let ch = gen_channels(cfg, device, cfg.ris_position, &mut rng)?;
    let fine_seed = rng.next_u64();
    let coarse_seed = rng.next_u64();
    let coarse = books.coarse_map(&ch, snr_db, coarse_seed, cfg.tx_power)?.normalized();
    let (map, oracle) = match stage {
        Stage::Fine => {
            let (clean, noisy) = books.fine_maps(&ch, snr_db, fine_seed, cfg.tx_power)?;
            (noisy.normalized(), oracle_best_index(&clean)?)
        }
        Stage::Coarse => {
            let mut direct = ch.clone();
            direct.link = Link::Direct;
            let clean = scan_map(&direct, &books.coarse, None, None, cfg.tx_power, snr_db)?;
            (coarse.clone(), oracle_best_index(&clean)?)
        }
    };
    let c = [coarse.powers[0], coarse.powers[1], coarse.powers[2], coarse.powers[3]];
    Ok(Sample { label: labels.normalize(device), map, oracle, coarse: Some(c), seed, split: None })
}

/// Generates `per_snr` samples for every SNR and tags the splits.
///
/// Sample `i` (counted over the whole dataset) uses seed `base_seed + i`.
pub fn generate_dataset(cfg: &SimConfig, cb_spec: &CodebookSpec, spec: &DatasetSpec) -> Result<Dataset> {
    cfg.validate()?;
    let books = ScanBooks::new(cfg, cb_spec)?;
    let labels = LabelScale::from_config(cfg);
    let jobs: Vec<(f64, u64)> = spec
        .snr_list
        .iter()
        .enumerate()
        .flat_map(|(k, &snr)| (0..spec.per_snr).map(move |i| (snr, (k * spec.per_snr + i) as u64)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(snr, idx)| generate_sample(cfg, &books, &labels, spec.stage, snr, spec.base_seed.wrapping_add(idx)))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset { sim: cfg.clone(), codebook: cb_spec.clone(), spec: spec.clone(), labels, samples };
    crate::training::split_dataset(&mut ds, spec.base_seed)?;
    Ok(ds)
}

const NFBS_MAGIC: &[u8; 4] = b"NFBS";
const NFBS_VERSION: u32 = 1;

/// Writes `manifest.json` plus one `NFBS` blob per sample into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let width = (ds.samples.len().max(1) - 1).to_string().len().max(5);
    let mut entries = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let file = format!("sample_{i:0width$}.nfbs");
        let mut buf = Vec::with_capacity(16 + 4 * (s.map.powers.len() + 2));
        buf.extend_from_slice(NFBS_MAGIC);
        buf.extend_from_slice(&NFBS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(s.map.l as u32).to_le_bytes());
        buf.extend_from_slice(&(s.map.s as u32).to_le_bytes());
        for p in s.map.powers.iter().chain(&s.label) {
            buf.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        std::fs::write(dir.join(&file), buf)?;
        entries.push(SampleEntry {
            file,
            seed: s.seed,
            snr_db: s.map.snr_db,
            r: s.map.truth.r,
            theta: s.map.truth.theta,
            link: s.map.link,
            oracle: s.oracle,
            coarse: s.coarse,
            split: s.split,
        });
    }
    let (l, s) = ds.samples.first().map_or((0, 0), |x| (x.map.l, x.map.s));
    let manifest = DatasetManifest {
        format: "nearfocus-dataset".into(),
        version: NFBS_VERSION,
        l,
        s,
        sim: ds.sim.clone(),
        codebook: ds.codebook.clone(),
        spec: ds.spec.clone(),
        labels: ds.labels,
        samples: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), detail: detail.into() }
}

fn read_grid(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != NFBS_MAGIC {
        return Err(format_err(path, "missing NFBS header"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if word(4) != NFBS_VERSION {
        return Err(format_err(path, format!("unsupported version {}", word(4))));
    }
    let (l, s) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + 4 * (l * s + 2) {
        return Err(format_err(path, format!("expected {} bytes for a {l}x{s} grid, found {}", 16 + 4 * (l * s + 2), bytes.len())));
    }
    let vals = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((l, s, vals))
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath: PathBuf = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::MissingArtifact { path: mpath, hint: "run `nearfocus gen-dataset` first".into() });
    }
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(&mpath)?)?;
    let stage = manifest.spec.stage;
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let (l, s, vals) = read_grid(&path)?;
            if (l, s) != (manifest.l, manifest.s) {
                return Err(format_err(&path, format!("grid {l}x{s} differs from manifest {}x{}", manifest.l, manifest.s)));
            }
            let truth = PolarCoord::new(e.r, e.theta)?;
            Ok(Sample {
                map: BeamScanMap {
                    l,
                    s,
                    powers: vals[..l * s].iter().map(|&v| v as f64).collect(),
                    valid: vec![true; l * s],
                    snr_db: e.snr_db,
                    truth,
                    stage,
                    link: e.link,
                    normalized: true,
                },
                label: manifest.labels.normalize(truth),
                oracle: e.oracle,
                coarse: e.coarse,
                seed: e.seed,
                split: e.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { sim: manifest.sim, codebook: manifest.codebook, spec: manifest.spec, labels: manifest.labels, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::GainModel;
    use crate::geometry::ApertureRule;
    use approx::assert_relative_eq;

    fn map_from(l: usize, s: usize, powers: Vec<f64>) -> BeamScanMap {
        BeamScanMap {
            l,
            s,
            valid: vec![true; powers.len()],
            powers,
            snr_db: 0.0,
            truth: PolarCoord { r: 10.0, theta: 0.0 },
            stage: Stage::Fine,
            link: Link::Direct,
            normalized: false,
        }
    }

    #[test]
    fn oracle_tie_break() {
        let mut p = vec![0.0; 16];
        p[4 + 3] = 5.0;
        p[2 * 4 + 1] = 5.0;
        assert_eq!(oracle_best_index(&map_from(4, 4, p)).unwrap(), (1, 3));
        assert_eq!(oracle_best_index(&map_from(1, 1, vec![0.2])).unwrap(), (0, 0));
        let mut m = map_from(1, 2, vec![1.0, 2.0]);
        m.valid = vec![false, false];
        assert!(oracle_best_index(&m).is_err());
    }

    #[test]
    fn half_map_counts() {
        let m = map_from(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let h = half_scan_map(&m);
        assert_eq!(h.valid_count(), 2);
        assert_eq!(half_scan_map(&h), h);
        assert_eq!(h.get(0, 0), 1.0);
        assert_eq!(h.get(1, 1), 4.0);
        let odd = half_scan_map(&map_from(3, 5, vec![1.0; 15]));
        assert_eq!(odd.valid_count(), 8);
    }

    #[test]
    fn normalisation_hits_unit_max() {
        let mut m = map_from(2, 2, vec![1.0, 5.0, 3.0, 2.0]);
        m.normalize();
        assert_eq!(m.powers, vec![0.0, 1.0, 0.5, 0.25]);
        let mut flat = map_from(1, 3, vec![2.0; 3]);
        flat.normalize();
        assert_eq!(flat.powers, vec![1.0; 3]);
    }

    #[test]
    fn rate_anchors() {
        assert_eq!(achievable_rate(2.0, 2.0).unwrap(), 1.0);
        assert_eq!(achievable_rate(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(achievable_rate(3.0, 1.0).unwrap(), 2.0);
        assert!(achievable_rate(1.0, 0.0).is_err());
    }

    #[test]
    fn array_gain_extremes() {
        let a = vec![Complex::new(1.0, 0.0), Complex::new(0.0, 1.0)];
        assert_relative_eq!(array_gain(&a, &a).unwrap(), 1.0, max_relative = 1e-15);
        let b = vec![Complex::new(1.0, 0.0), Complex::new(0.0, -1.0)];
        assert!(array_gain(&a, &b).unwrap() < 1e-15);
        assert!(array_gain(&a, &b[..1]).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let ls = LabelScale::default();
        let p = PolarCoord::new(42.0, -0.7).unwrap();
        let back = ls.denormalize(ls.normalize(p));
        assert!((back.r - p.r).abs() < 1e-9 && (back.theta - p.theta).abs() < 1e-9);
        assert_eq!(ls.normalize(PolarCoord::new(3.0, -PI / 3.0).unwrap()), [0.0, 0.0]);
    }

    fn desk_like() -> SimConfig {
        SimConfig {
            bs_elements: 16,
            ris_elements: 16,
            carrier_hz: 60e9,
            tx_power: 1.0,
            spacing_wavelengths: 0.5,
            ris_position: PolarCoord::new(8.0, PI / 4.0).unwrap(),
            paths: 2,
            los_gain: GainModel::Rayleigh { variance: 1.0 },
            nlos_variance: 0.001,
            bs_aperture_rule: ApertureRule::Linear,
            ris_aperture_rule: ApertureRule::Linear,
            r_range: (3.0, 100.0),
            theta_range: (-PI / 3.0, PI / 3.0),
        }
    }

    #[test]
    fn received_power_scales_with_pt() {
        let cfg = desk_like();
        let ch = gen_channels(&cfg, PolarCoord::new(0.05, 0.1).unwrap(), cfg.ris_position, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(ch.link, Link::Direct);
        let w = vec![Complex::new(0.25, 0.0); 16];
        let a = received_power(&ch, &w, None, None, 1.0).unwrap();
        let b = received_power(&ch, &w, None, None, 2.0).unwrap();
        assert_relative_eq!(b, 2.0 * a, max_relative = 1e-14);
    }

    #[test]
    fn cascaded_scan_matches_explicit_phases() {
        let cfg = desk_like();
        let books = ScanBooks::new(&cfg, &CodebookSpec { l: 3, s: 3, beta_delta: 1.0, r_min: 3.0, r_max: 100.0, d_ref: 30.0 })
            .unwrap();
        let ch = gen_channels(&cfg, PolarCoord::new(20.0, 0.3).unwrap(), cfg.ris_position, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_eq!(ch.link, Link::Cascaded);
        let map = scan_map(&ch, &books.fine_ris, Some(&books.bs_to_ris), None, 1.0, 0.0).unwrap();
        let x = ch.incident_field(&books.bs_to_ris).unwrap();
        for (i, cell) in books.fine_ris.cells.iter().enumerate() {
            let cw = cell.as_ref().unwrap();
            let phi = crate::channel::ris_phases_for_profile(&x, &cw.weights).unwrap();
            let p = received_power(&ch, &books.bs_to_ris, Some(&phi), None, 1.0).unwrap();
            assert_relative_eq!(map.powers[i], p, max_relative = 1e-12);
        }
        assert!(scan_map(&ch, &books.fine_bs, None, None, 1.0, 0.0).is_err());
    }

    #[test]
    fn sigma_from_codebook_mean() {
        let cfg = desk_like();
        let books = ScanBooks::new(&cfg, &CodebookSpec { l: 2, s: 2, beta_delta: 1.0, r_min: 3.0, r_max: 100.0, d_ref: 30.0 })
            .unwrap();
        let ch = gen_channels(&cfg, PolarCoord::new(0.06, 0.0).unwrap(), cfg.ris_position, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let mean: f64 = books
            .fine_bs
            .codewords()
            .map(|c| received_power(&ch, &c.weights, None, None, 1.0).unwrap())
            .sum::<f64>()
            / 4.0;
        assert_relative_eq!(noise_sigma(0.0, &ch, &books.fine_bs, None, 1.0).unwrap(), mean, max_relative = 1e-12);
        assert_relative_eq!(noise_sigma(10.0, &ch, &books.fine_bs, None, 1.0).unwrap(), mean / 10.0, max_relative = 1e-12);
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = desk_like();
        let cb = CodebookSpec { l: 4, s: 4, beta_delta: 1.0, r_min: 3.0, r_max: 100.0, d_ref: 100.0 };
        let spec = DatasetSpec {
            stage: Stage::Fine,
            snr_list: vec![0.0, 10.0],
            per_snr: 10,
            base_seed: 3,
            val_fraction: 0.1,
            test_fraction: 0.2,
        };
        let ds = generate_dataset(&cfg, &cb, &spec).unwrap();
        assert_eq!(ds.samples.len(), 20);
        assert_eq!(ds.split(Split::Test).count(), 4);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.samples.len(), 20);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.oracle, b.oracle);
            assert_eq!(a.split, b.split);
            assert_eq!(a.label, b.label);
            for (x, y) in a.map.powers.iter().zip(&b.map.powers) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert!(matches!(read_dataset(&dir.path().join("nope")), Err(Error::MissingArtifact { .. })));
    }
}
