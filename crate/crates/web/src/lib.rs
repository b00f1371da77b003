//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function takes plain numbers and returns a JSON string.
//! The `*_json` functions hold the logic and are usable natively.

use nearfocus::beamscan::{focal_depth_3db, oracle_best_index, radial_gain_profile, RadialSweep, ScanBooks};
use nearfocus::channel::{gen_channels, Link};
use nearfocus::geometry::PolarCoord;
use nearfocus::harness::{RunConfig, Scale, Settings};
use nearfocus::nn::flops_estimate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn desk(overrides: &[(&str, String)]) -> Result<RunConfig, String> {
    let mut s = Settings::preset(Scale::Desk);
    for (k, v) in overrides {
        s.set(k, v).map_err(|e| e.to_string())?;
    }
    RunConfig::from_settings(Scale::Desk, s, "".into()).map_err(|e| e.to_string())
}

fn link_named(name: &str) -> Result<Link, String> {
    match name {
        "bs" | "direct" => Ok(Link::Direct),
        "ris" | "cascaded" => Ok(Link::Cascaded),
        other => Err(format!("unknown link `{other}`")),
    }
}

#[derive(Serialize)]
struct Profile {
    r: Vec<f64>,
    gain: Vec<f64>,
    depth: f64,
    r_min: f64,
    r_max: f64,
    truncated: bool,
    rayleigh: f64,
}

/// Normalised gain along the focal ray and the 3 dB focal depth.
pub fn focal_profile_json(bs_elements: usize, ris_elements: usize, focal_r: f64, link: &str, points: usize) -> Result<String, String> {
    let cfg = desk(&[("sim.N", bs_elements.to_string()), ("sim.M", ris_elements.to_string())])?;
    let link = link_named(link)?;
    let focal = PolarCoord::new(focal_r, 0.0).map_err(|e| e.to_string())?;
    let sweep = RadialSweep::around(focal_r, 4.0, points.max(3));
    let gain = radial_gain_profile(&cfg.sim, focal, link, &sweep).map_err(|e| e.to_string())?;
    let peak = gain.iter().copied().fold(0.0, f64::max);
    let fd = focal_depth_3db(&cfg.sim, focal, link, &sweep).map_err(|e| e.to_string())?;
    let out = Profile {
        r: (0..sweep.points).map(|i| sweep.radius(i)).collect(),
        gain: gain.iter().map(|g| if peak > 0.0 { g / peak } else { 0.0 }).collect(),
        depth: fd.depth,
        r_min: fd.r_min,
        r_max: fd.r_max,
        truncated: fd.truncated,
        rayleigh: cfg.sim.bs_rayleigh().map_err(|e| e.to_string())?,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Scan {
    l: usize,
    s: usize,
    link: &'static str,
    clean: Vec<f64>,
    noisy: Vec<f64>,
    oracle: (usize, usize),
    noisy_best: (usize, usize),
}

/// Noiseless and noisy beam-scan maps for a device at `(r, theta)`.
pub fn scan_map_json(l: usize, s: usize, r: f64, theta_deg: f64, snr_db: f64, seed: u64) -> Result<String, String> {
    let cfg = desk(&[("codebook.L", l.to_string()), ("codebook.S", s.to_string())])?;
    let books = ScanBooks::new(&cfg.sim, &cfg.codebook).map_err(|e| e.to_string())?;
    let device = PolarCoord::new(r, theta_deg.to_radians()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = gen_channels(&cfg.sim, device, cfg.sim.ris_position, &mut rng).map_err(|e| e.to_string())?;
    let (clean, noisy) = books.fine_maps(&ch, snr_db, seed, cfg.sim.tx_power).map_err(|e| e.to_string())?;
    let out = Scan {
        l,
        s,
        link: ch.link.name(),
        oracle: oracle_best_index(&clean).map_err(|e| e.to_string())?,
        noisy_best: oracle_best_index(&noisy).map_err(|e| e.to_string())?,
        clean: clean.normalized().powers,
        noisy: noisy.normalized().powers,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Per-layer FLOPs of the detector for an `l x s` map.
pub fn flops_json(l: usize, s: usize, conv_blocks: usize, channels: usize, d_model: usize, heads: usize) -> Result<String, String> {
    let cfg = desk(&[
        ("codebook.L", l.to_string()),
        ("codebook.S", s.to_string()),
        ("model.conv_blocks", conv_blocks.to_string()),
        ("model.conv_channels", channels.to_string()),
        ("model.d_model", d_model.to_string()),
        ("model.heads", heads.to_string()),
    ])?;
    serde_json::to_string(&flops_estimate(&cfg.model)).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn focal_profile(bs_elements: usize, ris_elements: usize, focal_r: f64, link: &str, points: usize) -> Result<String, JsError> {
    focal_profile_json(bs_elements, ris_elements, focal_r, link, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn scan_map(l: usize, s: usize, r: f64, theta_deg: f64, snr_db: f64, seed: u32) -> Result<String, JsError> {
    scan_map_json(l, s, r, theta_deg, snr_db, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn flops(l: usize, s: usize, conv_blocks: usize, channels: usize, d_model: usize, heads: usize) -> Result<String, JsError> {
    flops_json(l, s, conv_blocks, channels, d_model, heads).map_err(|e| JsError::new(&e))
}
