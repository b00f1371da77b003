//! Planar coordinate frames and array layouts.
//!
//! The base station (BS) sits at the origin with its uniform linear array
//! along the `y` axis; boresight is `+x` and `theta` grows toward `+y`.
//! Devices, the RIS centre and every focal point lie in the `z = 0` plane.
//! The RIS is a square uniform planar array whose horizontal axis lies in
//! that plane and whose vertical axis is `z`; it faces the BS.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};

/// A point in the azimuth plane, relative to some frame origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarCoord {
    /// Distance in metres, strictly positive.
    pub r: f64,
    /// Angle in radians.
    pub theta: f64,
}

impl PolarCoord {
    pub fn new(r: f64, theta: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(domain(format!("polar distance must be positive, got {r}")));
        }
        if !theta.is_finite() || theta.abs() > PI {
            return Err(domain(format!("polar angle out of range: {theta}")));
        }
        Ok(Self { r, theta })
    }

    pub fn to_point(self) -> Point3 {
        Point3::new(self.r * self.theta.cos(), self.r * self.theta.sin(), 0.0)
    }

    /// Inverse of [`PolarCoord::to_point`] for points in the `z = 0` plane.
    pub fn from_point(p: Point3) -> Result<Self> {
        Self::new(p.x.hypot(p.y), p.y.atan2(p.x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.distance(&Point3::ORIGIN)
    }
}

/// Position expressed in the RIS frame. `theta` is `None` when the point
/// coincides with the RIS centre and no bearing exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramePolar {
    pub r: f64,
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArrayKind {
    Ula,
    Upa,
}

/// How the aperture entering the Rayleigh distance is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ApertureRule {
    /// `count * spacing`, the linear rule used for both arrays in the
    /// published system model (`D_RIS = M d_e`).
    #[default]
    Linear,
    /// Physical extent of one side, `(count_per_side - 1) * spacing`.
    Physical,
}

impl std::str::FromStr for ApertureRule {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "physical" => Ok(Self::Physical),
            other => Err(config(format!("unknown aperture rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub kind: ArrayKind,
    pub num_elements: usize,
    /// Element spacing in metres.
    pub element_spacing: f64,
}

impl ArrayGeometry {
    pub fn ula(num_elements: usize, element_spacing: f64) -> Result<Self> {
        Self::new(ArrayKind::Ula, num_elements, element_spacing)
    }

    pub fn upa(num_elements: usize, element_spacing: f64) -> Result<Self> {
        Self::new(ArrayKind::Upa, num_elements, element_spacing)
    }

    pub fn new(kind: ArrayKind, num_elements: usize, element_spacing: f64) -> Result<Self> {
        if num_elements == 0 {
            return Err(config("array needs at least one element"));
        }
        if !(element_spacing > 0.0 && element_spacing.is_finite()) {
            return Err(config(format!("element spacing must be positive, got {element_spacing}")));
        }
        if kind == ArrayKind::Upa {
            let side = isqrt(num_elements);
            if side * side != num_elements {
                return Err(config(format!("UPA element count {num_elements} is not a perfect square")));
            }
        }
        Ok(Self { kind, num_elements, element_spacing })
    }

    /// Elements along one side: `N` for a ULA, `sqrt(M)` for a UPA.
    pub fn per_side(&self) -> usize {
        match self.kind {
            ArrayKind::Ula => self.num_elements,
            ArrayKind::Upa => isqrt(self.num_elements),
        }
    }

    /// Physical extent of one side in metres.
    pub fn aperture(&self) -> f64 {
        (self.per_side() - 1) as f64 * self.element_spacing
    }

    /// Aperture used for near-field range classification.
    pub fn field_aperture(&self, rule: ApertureRule) -> f64 {
        match rule {
            ApertureRule::Linear => self.num_elements as f64 * self.element_spacing,
            ApertureRule::Physical => self.aperture(),
        }
    }
}

fn isqrt(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s > n {
        s -= 1;
    }
    while (s + 1) * (s + 1) <= n {
        s += 1;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldRegion {
    /// Beamfocusing range, `0 < r <= d/10`.
    Bfr,
    /// Remainder of the near field, `d/10 < r <= d`.
    Nbfr,
    FarField,
}

/// Rayleigh distance `2 D^2 / lambda`.
pub fn rayleigh_distance(aperture: f64, wavelength: f64) -> Result<f64> {
    if !(wavelength > 0.0) {
        return Err(domain(format!("wavelength must be positive, got {wavelength}")));
    }
    if !(aperture >= 0.0) {
        return Err(domain(format!("aperture must be non-negative, got {aperture}")));
    }
    Ok(2.0 * aperture * aperture / wavelength)
}

pub fn classify_region(r: f64, rayleigh: f64) -> Result<FieldRegion> {
    if !(r > 0.0) {
        return Err(domain(format!("distance must be positive, got {r}")));
    }
    if !(rayleigh > 0.0) {
        return Err(domain(format!("Rayleigh distance must be positive, got {rayleigh}")));
    }
    Ok(if r <= rayleigh / 10.0 {
        FieldRegion::Bfr
    } else if r <= rayleigh {
        FieldRegion::Nbfr
    } else {
        FieldRegion::FarField
    })
}

/// Converts a BS-frame device position into the RIS frame.
///
/// The distance follows the law of cosines. The angle is the two-argument
/// arctangent of `(r_l sin t_l - r_s sin t_s, r_s cos t_l - r_s cos t_s)`
/// plus `t_l`, wrapped into `(-pi, pi]`; it serves as the RIS-frame label of
/// a focal point, while all propagation uses exact Cartesian distances.
pub fn to_ris_frame(device: PolarCoord, ris: PolarCoord) -> FramePolar {
    let (rl, tl) = (device.r, device.theta);
    let (rs, ts) = (ris.r, ris.theta);
    let r = if ts == tl {
        (rl - rs).abs()
    } else {
        (rs * rs + rl * rl - 2.0 * rs * rl * (ts - tl).cos()).max(0.0).sqrt()
    };
    if r == 0.0 {
        return FramePolar { r: 0.0, theta: None };
    }
    let num = rl * tl.sin() - rs * ts.sin();
    let den = rs * tl.cos() - rs * ts.cos();
    let theta = wrap_angle(num.atan2(den) + tl);
    FramePolar { r, theta: Some(theta) }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Centred element offsets `delta_n * spacing`, `delta_n = (2n - N + 1)/2`.
pub fn centered_offsets(count: usize, spacing: f64) -> Vec<f64> {
    (0..count)
        .map(|n| (2.0 * n as f64 - count as f64 + 1.0) / 2.0 * spacing)
        .collect()
}

/// Element coordinates of an array.
///
/// With `origin = None` the array is the BS ULA at the frame origin, laid
/// along `y`. With `origin = Some(c)` the array is centred at `c` and faces
/// the frame origin: its horizontal axis is perpendicular to the line of
/// sight in the azimuth plane and a UPA's second axis is vertical. UPA
/// element `m = i * side + j` has horizontal index `i` and vertical `j`.
pub fn element_positions(geom: &ArrayGeometry, origin: Option<PolarCoord>) -> Vec<Point3> {
    let side = geom.per_side();
    let offsets = centered_offsets(side, geom.element_spacing);
    let (center, axis) = match origin {
        None => (Point3::ORIGIN, (0.0, 1.0)),
        Some(c) => {
            let p = c.to_point();
            // normal points back at the origin; horizontal axis = z x normal
            let nx = -c.theta.cos();
            let ny = -c.theta.sin();
            (p, (-ny, nx))
        }
    };
    let place = |u: f64, v: f64| Point3::new(center.x + u * axis.0, center.y + u * axis.1, center.z + v);
    match geom.kind {
        ArrayKind::Ula => offsets.iter().map(|&u| place(u, 0.0)).collect(),
        ArrayKind::Upa => {
            let mut out = Vec::with_capacity(geom.num_elements);
            for &u in &offsets {
                for &v in &offsets {
                    out.push(place(u, v));
                }
            }
            out
        }
    }
}
