//! Polar-grid beam codebooks.
//!
//! The fine grid samples the spatial frequency `phi = sin(theta)` uniformly
//! over `L` angular divisions and the range uniformly over `S` rings:
//! `phi_l = (2l - L - 1)/L`, `r_s = d_ref * s / S` (1-based `l`, `s`).
//! Every codeword is the exact spherical-wave steering vector of its focal
//! point, normalised to unit 2-norm.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::geometry::{element_positions, to_ris_frame, ArrayGeometry, Point3, PolarCoord};
use crate::Complex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Bs,
    Ris,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codeword {
    /// Unit-norm, constant-modulus weights.
    pub weights: Vec<Complex>,
    /// 0-based `(l, s)`.
    pub grid_index: (usize, usize),
    /// Focal point in the codeword's own frame.
    pub focal: PolarCoord,
    /// The same focal point in the BS frame.
    pub target: PolarCoord,
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookSpec {
    /// Angular divisions.
    pub l: usize,
    /// Distance rings.
    pub s: usize,
    pub beta_delta: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Range normalisation constant of the ring formula.
    pub d_ref: f64,
}

impl CodebookSpec {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.s == 0 {
            return Err(config("codebook.L and codebook.S must be at least 1"));
        }
        if !(self.r_min > 0.0 && self.r_min < self.r_max) {
            return Err(config("codebook range must satisfy 0 < r_min < r_max"));
        }
        if !(self.beta_delta > 0.0) {
            return Err(config("codebook.beta must be positive"));
        }
        if !(self.d_ref > 0.0) {
            return Err(config("codebook.d_ref must be positive"));
        }
        Ok(())
    }

    /// `phi_l` for 0-based `l`.
    pub fn phi(&self, l: usize) -> f64 {
        (2.0 * (l + 1) as f64 - self.l as f64 - 1.0) / self.l as f64
    }

    /// `r_s` for 0-based `s`.
    pub fn ring(&self, s: usize) -> f64 {
        self.d_ref * (s + 1) as f64 / self.s as f64
    }
}

/// `(phi_l, r_s)` pairs in l-major order.
pub fn fine_grid(spec: &CodebookSpec) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(spec.l * spec.s);
    for l in 0..spec.l {
        for s in 0..spec.s {
            out.push((spec.phi(l), spec.ring(s)));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub l: usize,
    pub s: usize,
    pub frame: Frame,
    pub d_ref: f64,
    /// `L * S` slots in l-major order; `None` marks a cell whose focal point
    /// could not be expressed in this frame.
    pub cells: Vec<Option<Codeword>>,
}

impl Codebook {
    pub fn get(&self, l: usize, s: usize) -> Option<&Codeword> {
        self.cells.get(l * self.s + s).and_then(Option::as_ref)
    }

    pub fn valid_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn codewords(&self) -> impl Iterator<Item = &Codeword> {
        self.cells.iter().flatten()
    }

    /// Length of each codeword, or 0 for an empty book.
    pub fn width(&self) -> usize {
        self.codewords().next().map_or(0, |c| c.weights.len())
    }
}

/// Near-field steering vector from explicit element positions.
///
/// Entry `n` is `exp(-j 2 pi (d_n - r) / lambda) / sqrt(count)` where `d_n`
/// is the distance from element `n` to `focal` and `r` the distance from
/// `center`.
pub fn steering_from_elements(elements: &[Point3], center: Point3, focal: Point3, wavelength: f64) -> Result<Vec<Complex>> {
    let r = center.distance(&focal);
    let amp = 1.0 / (elements.len() as f64).sqrt();
    let k = 2.0 * PI / wavelength;
    elements
        .iter()
        .map(|p| {
            let d = p.distance(&focal);
            if d < 1e-9 {
                return Err(domain("focal point coincides with an array element"));
            }
            Ok(Complex::from_polar(amp, -k * (d - r)))
        })
        .collect()
}

/// Steering vector of the BS array (at the frame origin) toward `focal`.
pub fn steering_vector(geom: &ArrayGeometry, focal: PolarCoord, wavelength: f64) -> Result<Vec<Complex>> {
    steering_from_elements(&element_positions(geom, None), Point3::ORIGIN, focal.to_point(), wavelength)
}

fn bs_codeword(elements: &[Point3], focal: PolarCoord, grid_index: (usize, usize), wavelength: f64) -> Result<Codeword> {
    Ok(Codeword {
        weights: steering_from_elements(elements, Point3::ORIGIN, focal.to_point(), wavelength)?,
        grid_index,
        focal,
        target: focal,
        frame: Frame::Bs,
    })
}

/// Fine `L x S` codebook in the BS frame.
pub fn build_fine_codebook(spec: &CodebookSpec, geom: &ArrayGeometry, wavelength: f64) -> Result<Codebook> {
    spec.validate()?;
    let elements = element_positions(geom, None);
    let mut cells = Vec::with_capacity(spec.l * spec.s);
    for l in 0..spec.l {
        let phi = spec.phi(l);
        if phi.abs() >= 1.0 {
            return Err(domain(format!("angular sample {phi} has no arcsine")));
        }
        let theta = phi.asin();
        for s in 0..spec.s {
            let focal = PolarCoord::new(spec.ring(s), theta)?;
            cells.push(Some(bs_codeword(&elements, focal, (l, s), wavelength)?));
        }
    }
    Ok(Codebook { l: spec.l, s: spec.s, frame: Frame::Bs, d_ref: spec.d_ref, cells })
}

/// The four-code coarse book: angles `-span/2, +span/2` (index `l`) and
/// ranges `D^2/(10 lambda)`, `11 D^2/(10 lambda)` (index `s`).
pub fn build_coarse_codebook(aperture: f64, wavelength: f64, theta_span: f64, geom: &ArrayGeometry) -> Result<Codebook> {
    if !(aperture > 0.0) {
        return Err(domain(format!("aperture must be positive, got {aperture}")));
    }
    let near = aperture * aperture / (10.0 * wavelength);
    let far = 11.0 * near;
    let elements = element_positions(geom, None);
    let mut cells = Vec::with_capacity(4);
    for (l, theta) in [-theta_span / 2.0, theta_span / 2.0].into_iter().enumerate() {
        for (s, r) in [near, far].into_iter().enumerate() {
            cells.push(Some(bs_codeword(&elements, PolarCoord::new(r, theta)?, (l, s), wavelength)?));
        }
    }
    Ok(Codebook { l: 2, s: 2, frame: Frame::Bs, d_ref: far, cells })
}

/// Near-field sampling constraint between consecutive rings:
/// `|r_curr - r_prev| >= 2 lambda beta^2 |r_curr r_prev| / len^2`.
///
/// `len` is the constraint's length scale, the element spacing by default.
pub fn check_sampling_constraint(r_prev: f64, r_curr: f64, beta_delta: f64, len: f64, wavelength: f64) -> bool {
    let lhs = (r_curr - r_prev).abs();
    let rhs = 2.0 * wavelength * beta_delta * beta_delta * (r_curr * r_prev).abs() / (len * len);
    lhs >= rhs
}

/// Re-expresses a BS-frame codebook relative to the RIS.
///
/// Focal labels go through [`to_ris_frame`]; the weights are RIS steering
/// vectors (length `M`) toward each cell's geometric focal point. Cells
/// whose focal point coincides with the RIS are left empty.
pub fn codebook_to_ris_frame(cb: &Codebook, ris: PolarCoord, ris_geom: &ArrayGeometry, wavelength: f64) -> Result<Codebook> {
    if cb.frame != Frame::Bs {
        return Err(config("codebook is already in the RIS frame"));
    }
    let elements = element_positions(ris_geom, Some(ris));
    let center = ris.to_point();
    let cells = cb
        .cells
        .iter()
        .map(|cell| {
            let cw = cell.as_ref()?;
            let fp = to_ris_frame(cw.target, ris);
            let theta = fp.theta?;
            let weights = steering_from_elements(&elements, center, cw.target.to_point(), wavelength).ok()?;
            Some(Codeword {
                weights,
                grid_index: cw.grid_index,
                focal: PolarCoord { r: fp.r, theta },
                target: cw.target,
                frame: Frame::Ris,
            })
        })
        .collect();
    Ok(Codebook { l: cb.l, s: cb.s, frame: Frame::Ris, d_ref: cb.d_ref, cells })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodebookManifest {
    pub format: String,
    pub version: u32,
    pub frame: Frame,
    pub l: usize,
    pub s: usize,
    pub elements: usize,
    pub d_ref: f64,
    pub spec: Option<CodebookSpec>,
    pub wavelength: f64,
    /// 0-based `(l, s)` of cells written as zeros.
    pub invalid_cells: Vec<(usize, usize)>,
    /// Focal points `(r, theta)` in the codebook frame, l-major.
    pub focal: Vec<Option<(f64, f64)>>,
    pub weights_file: String,
}

/// Writes `<stem>.json` and `<stem>.bin` (little-endian complex64 weights,
/// row-major in `(l, s, element)` order).
pub fn export_codebook(cb: &Codebook, spec: Option<&CodebookSpec>, wavelength: f64, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let width = cb.width();
    let bin_name = format!("{stem}.bin");
    let mut bin = Vec::with_capacity(cb.cells.len() * width * 8);
    let mut invalid = Vec::new();
    for (i, cell) in cb.cells.iter().enumerate() {
        match cell {
            Some(cw) => {
                for w in &cw.weights {
                    bin.extend_from_slice(&(w.re as f32).to_le_bytes());
                    bin.extend_from_slice(&(w.im as f32).to_le_bytes());
                }
            }
            None => {
                invalid.push((i / cb.s, i % cb.s));
                bin.resize(bin.len() + width * 8, 0);
            }
        }
    }
    let manifest = CodebookManifest {
        format: "nearfocus-codebook".into(),
        version: 1,
        frame: cb.frame,
        l: cb.l,
        s: cb.s,
        elements: width,
        d_ref: cb.d_ref,
        spec: spec.cloned(),
        wavelength,
        invalid_cells: invalid,
        focal: cb.cells.iter().map(|c| c.as_ref().map(|c| (c.focal.r, c.focal.theta))).collect(),
        weights_file: bin_name.clone(),
    };
    std::fs::File::create(dir.join(&bin_name))?.write_all(&bin)?;
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}
