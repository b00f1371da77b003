//! Checks shared by the integration tests and the acceptance runner. Each
//! one recomputes a result independently of the library code path it
//! verifies and reports the worst discrepancy it saw.
#![allow(dead_code)]

use std::f64::consts::PI;

use nearfocus::beamscan::{oracle_best_index, received_power, scan_map};
use nearfocus::channel::{cascade_gain, gen_channels, GainModel, Link, RisPhaseConfig, SimConfig};
use nearfocus::codebook::{build_fine_codebook, codebook_to_ris_frame, CodebookSpec};
use nearfocus::geometry::{to_ris_frame, ApertureRule, ArrayGeometry, PolarCoord};
use nearfocus::nn::layers::{attention, multi_head, MhaWeights};
use nearfocus::nn::{
    adam_step, attn_flops, build_masks, conv_flops, fc_flops, flops_estimate, AdamState, CoarseNet, MapInput,
    ModelConfig, ModelWeights, NamedTensor, PositionDetector, Regressor,
};
use nearfocus::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-5;

pub fn desk_grad_config() -> ModelConfig {
    ModelConfig {
        input_h: 16,
        input_w: 16,
        conv_channels: 4,
        conv_blocks: 2,
        d_model: 16,
        heads: 2,
        ffn_hidden: 32,
        dense_hidden: 8,
        attn_blocks: 2,
    }
}

pub struct Batch {
    pub values: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
    pub targets: Vec<[f64; 2]>,
}

impl Batch {
    pub fn random(h: usize, w: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::new();
        let mut valid = Vec::new();
        for k in 0..count {
            // the last sample loses its bottom quarter, which pads a token
            let ok: Vec<bool> = (0..h * w).map(|i| k + 1 < count || i / w < 3 * h / 4).collect();
            values.push(ok.iter().map(|v| if *v { rng.random::<f64>() } else { 0.0 }).collect());
            valid.push(ok);
        }
        let targets = (0..count).map(|_| [rng.random(), rng.random()]).collect();
        Self { values, valid, targets }
    }

    pub fn inputs(&self) -> Vec<MapInput<'_>> {
        self.values.iter().zip(&self.valid).map(|(v, m)| MapInput { values: v, valid: m }).collect()
    }
}

/// Worst relative error of each trainable tensor: max |analytic - numeric|
/// over max |numeric|, with central differences.
pub fn gradient_errors<R: Regressor + Clone>(net: &R, batch: &Batch) -> Vec<(String, f64)> {
    let inputs = batch.inputs();
    let (_, grads) = net.loss_and_grads(&inputs, &batch.targets).unwrap();
    let mut probe = net.clone();
    let mut out = Vec::new();
    for (ti, t) in net.weights().tensors.iter().enumerate() {
        if !t.trainable {
            continue;
        }
        let (mut worst, mut scale) = (0.0f64, 0.0f64);
        for j in 0..t.data.len() {
            let orig = t.data[j];
            probe.weights_mut().tensors[ti].data[j] = orig + FD_STEP;
            let up = probe.loss_and_grads(&inputs, &batch.targets).unwrap().0;
            probe.weights_mut().tensors[ti].data[j] = orig - FD_STEP;
            let down = probe.loss_and_grads(&inputs, &batch.targets).unwrap().0;
            probe.weights_mut().tensors[ti].data[j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max((grads[ti][j] - fd).abs());
            scale = scale.max(fd.abs());
        }
        out.push((t.name.clone(), worst / scale.max(1e-6)));
    }
    out
}

pub fn check_gradients() -> Outcome {
    let net = PositionDetector::new(desk_grad_config(), 11).unwrap();
    let errs = gradient_errors(&net, &Batch::random(16, 16, 3, 5));
    let (name, worst) = errs.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Outcome::new(
        errs.iter().all(|(_, e)| *e < 1e-4),
        format!("{} tensors, worst relative error {worst:.2e} ({name})", errs.len()),
    )
}

pub fn coarse_gradient_errors() -> Vec<(String, f64)> {
    let net = CoarseNet::new(16, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let values: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random()).collect()).collect();
    let batch = Batch {
        valid: vec![vec![true; 4]; 5],
        targets: (0..5).map(|_| [rng.random(), rng.random()]).collect(),
        values,
    };
    gradient_errors(&net, &batch)
}

// ---------------------------------------------------------------- attention

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Plain softmax(Q K^T / sqrt(d_k)) V with blocked logits dropped.
pub fn reference_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, dk: usize, dv: usize, allowed: &dyn Fn(usize, usize) -> bool) -> Vec<f64> {
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let logits: Vec<Option<f64>> = (0..n)
            .map(|j| allowed(i, j).then(|| (0..dk).map(|c| q[i * dk + c] * k[j * dk + c]).sum::<f64>() / (dk as f64).sqrt()))
            .collect();
        let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let w: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |x| (x - max).exp())).collect();
        let z: f64 = w.iter().sum();
        for j in 0..n {
            for c in 0..dv {
                out[i * dv + c] += w[j] / z * v[j * dv + c];
            }
        }
    }
    out
}

pub fn check_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst_sum = 0.0f64;
    let mut worst_blocked = 0.0f64;
    let mut worst_ref = 0.0f64;
    let mut single_ok = true;
    for trial in 0..20 {
        let n = 2 + trial % 12;
        let (dk, dv) = (8, 5);
        let (q, k, v) = (random_matrix(&mut rng, n, dk), random_matrix(&mut rng, n, dk), random_matrix(&mut rng, n, dv));
        let valid: Vec<bool> = (0..n).map(|j| j == 0 || rng.random_bool(0.7)).collect();
        let mask = build_masks(&valid, trial % 2 == 0);
        let (out, cache) = attention(&q, &k, &v, n, dk, dv, Some(&mask)).unwrap();
        for i in 0..n {
            let row = &cache.weights[i * n..(i + 1) * n];
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            for j in 0..n {
                if !mask.get(i, j) {
                    worst_blocked = worst_blocked.max(row[j]);
                }
            }
        }
        let want = reference_attention(&q, &k, &v, n, dk, dv, &|i, j| mask.get(i, j));
        worst_ref = out.iter().zip(&want).fold(worst_ref, |a, (x, y)| a.max((x - y).abs()));

        let col = trial % n;
        let only: Vec<bool> = (0..n).map(|j| j == col).collect();
        let (out, _) = attention(&q, &k, &v, n, dk, dv, Some(&build_masks(&only, false))).unwrap();
        single_ok &= (0..n).all(|i| out[i * dv..(i + 1) * dv] == v[col * dv..(col + 1) * dv]);
    }
    let causal = build_masks(&[true; 13], true).count_allowed();
    Outcome::new(
        worst_sum < 1e-9 && worst_blocked < 1e-30 && worst_ref < 1e-12 && single_ok && causal == 91,
        format!(
            "row-sum error {worst_sum:.1e}, max blocked weight {worst_blocked:.1e}, reference error {worst_ref:.1e}, \
             single-column rows exact: {single_ok}, causal n=13 allows {causal}"
        ),
    )
}

/// Multi-head output recomputed head by head.
pub fn reference_multi_head(x: &[f64], w: MhaWeights<'_>, n: usize, d: usize, h: usize) -> Vec<f64> {
    let proj = |m: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for c in 0..d {
                out[i * d + c] = (0..d).map(|t| x[i * d + t] * m[t * d + c]).sum();
            }
        }
        out
    };
    let (q, k, v) = (proj(w.wq), proj(w.wk), proj(w.wv));
    let dk = d / h;
    let mut concat = vec![0.0; n * d];
    for head in 0..h {
        let take = |m: &[f64]| -> Vec<f64> {
            (0..n).flat_map(|i| m[i * d + head * dk..i * d + (head + 1) * dk].to_vec()).collect()
        };
        let o = reference_attention(&take(&q), &take(&k), &take(&v), n, dk, dk, &|_, _| true);
        for i in 0..n {
            concat[i * d + head * dk..i * d + (head + 1) * dk].copy_from_slice(&o[i * dk..(i + 1) * dk]);
        }
    }
    let mut y = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            y[i * d + c] = (0..d).map(|t| concat[i * d + t] * w.wo[t * d + c]).sum();
        }
    }
    y
}

pub fn multi_head_error(seed: u64, n: usize, d: usize, h: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_matrix(&mut rng, n, d);
    let ws: Vec<Vec<f64>> = (0..4).map(|_| random_matrix(&mut rng, d, d)).collect();
    let w = MhaWeights { wq: &ws[0], wk: &ws[1], wv: &ws[2], wo: &ws[3] };
    let (got, _) = multi_head(&x, w, n, d, h, None).unwrap();
    let want = reference_multi_head(&x, w, n, d, h);
    got.iter().zip(&want).fold(0.0, |a, (p, q)| a.max((p - q).abs()))
}

// ---------------------------------------------------------------- Adam

/// Scalar Adam written out step by step.
pub fn reference_adam(w0: f64, grad: &dyn Fn(f64) -> f64, steps: usize, lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps as i32 {
        let g = grad(w);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        w -= lr * mhat / (vhat.sqrt() + eps);
        out.push(w);
    }
    out
}

pub fn scalar_weights(w: f64) -> ModelWeights {
    ModelWeights {
        tensors: vec![NamedTensor { name: "w".into(), shape: vec![1], data: vec![w], trainable: true }],
    }
}

/// Adam on `f(w) = a (w - c)^2` through the library step.
pub fn library_adam(w0: f64, a: f64, c: f64, steps: usize, lr: f64) -> Vec<f64> {
    let mut weights = scalar_weights(w0);
    let mut state = AdamState::new(&weights, lr);
    let mut out = Vec::new();
    for _ in 0..steps {
        let w = weights.tensors[0].data[0];
        adam_step(&mut weights, &[vec![2.0 * a * (w - c)]], &mut state).unwrap();
        out.push(weights.tensors[0].data[0]);
    }
    out
}

pub fn check_adam() -> Outcome {
    let mut worst = 0.0f64;
    for &(w0, a, c, lr) in &[(1.0, 1.0, 0.0, 0.001), (-2.5, 3.0, 0.7, 0.01), (0.3, 0.5, 4.0, 0.1), (10.0, 2.0, -1.0, 0.05)] {
        let got = library_adam(w0, a, c, 2, lr);
        let want = reference_adam(w0, &|w| 2.0 * a * (w - c), 2, lr);
        for (g, r) in got.iter().zip(&want) {
            worst = worst.max((g - r).abs());
        }
    }
    Outcome::new(worst <= 1e-12, format!("two-step trajectories on 4 quadratics, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- physics

pub fn sim_config(n: usize, m: usize, paths: usize, los: GainModel) -> SimConfig {
    SimConfig {
        bs_elements: n,
        ris_elements: m,
        carrier_hz: 60e9,
        tx_power: 1.0,
        spacing_wavelengths: 0.5,
        ris_position: PolarCoord::new(20.0, 0.3).unwrap(),
        paths,
        los_gain: los,
        nlos_variance: 0.001,
        bs_aperture_rule: ApertureRule::Linear,
        ris_aperture_rule: ApertureRule::Linear,
        r_range: (3.0, 100.0),
        theta_range: (-PI / 3.0, PI / 3.0),
    }
}

type P = (f64, f64, f64);

fn dist(a: P, b: P) -> f64 {
    let (dx, dy, dz) = (a.0 - b.0, a.1 - b.1, a.2 - b.2);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// BS elements along `y`, centred at the origin.
pub fn bs_elements(n: usize, spacing: f64) -> Vec<P> {
    (0..n).map(|i| (0.0, (2.0 * i as f64 - n as f64 + 1.0) / 2.0 * spacing, 0.0)).collect()
}

/// RIS elements: a square grid centred on the RIS, horizontal axis
/// perpendicular to the BS line of sight, vertical axis along `z`.
pub fn ris_elements(m: usize, spacing: f64, ris: (f64, f64)) -> Vec<P> {
    let side = (m as f64).sqrt().round() as usize;
    let (cx, cy) = (ris.0 * ris.1.cos(), ris.0 * ris.1.sin());
    let (ax, ay) = (ris.1.sin(), -ris.1.cos());
    let mut out = Vec::new();
    for i in 0..side {
        let u = (2.0 * i as f64 - side as f64 + 1.0) / 2.0 * spacing;
        for j in 0..side {
            let v = (2.0 * j as f64 - side as f64 + 1.0) / 2.0 * spacing;
            out.push((cx + u * ax, cy + u * ay, v));
        }
    }
    out
}

fn wave(dist: f64, lambda: f64) -> Complex {
    Complex::from_polar(lambda / (4.0 * PI * dist), -2.0 * PI * dist / lambda)
}

fn rel_err(got: Complex, want: Complex) -> f64 {
    (got - want).norm() / want.norm().max(1e-300)
}

/// Worst relative entry error of generated channels against an element by
/// element rebuild, and the worst cascade-gain error against a triple loop,
/// over `instances` random draws.
pub fn channel_errors(instances: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_entry, mut worst_cascade) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let n = rng.random_range(1..40);
        let side = rng.random_range(1..6);
        let paths = rng.random_range(1..5);
        let mut cfg = sim_config(n, side * side, paths, GainModel::Rayleigh { variance: 1.0 });
        cfg.ris_position = PolarCoord::new(rng.random_range(5.0..60.0), rng.random_range(-1.0..1.0)).unwrap();
        let device = PolarCoord::new(rng.random_range(3.0..100.0), rng.random_range(-1.0..1.0)).unwrap();
        let ch = gen_channels(&cfg, device, cfg.ris_position, &mut ChaCha8Rng::seed_from_u64(rng.random())).unwrap();

        let lambda = ch.wavelength;
        let spacing = cfg.spacing_wavelengths * lambda;
        let bs = bs_elements(n, spacing);
        let ris = ris_elements(side * side, spacing, (cfg.ris_position.r, cfg.ris_position.theta));
        let dev = (device.r * device.theta.cos(), device.r * device.theta.sin(), 0.0);
        let scat: Vec<(P, [Complex; 3])> =
            ch.scatterers.iter().map(|s| ((s.point.x, s.point.y, s.point.z), s.gains)).collect();
        let [g_bu, g_br, g_re] = ch.los_gains;

        for (i, b) in bs.iter().enumerate() {
            let mut want = g_bu * wave(dist(*b, dev), lambda);
            for (q, g) in &scat {
                want += g[0] * wave(dist(*b, *q) + dist(*q, dev), lambda);
            }
            worst_entry = worst_entry.max(rel_err(ch.h_bu[i], want));
        }
        for (mi, r) in ris.iter().enumerate() {
            let mut want = g_re * wave(dist(*r, dev), lambda);
            for (q, g) in &scat {
                want += g[2] * wave(dist(*r, *q) + dist(*q, dev), lambda);
            }
            worst_entry = worst_entry.max(rel_err(ch.h_re[mi], want));
            for (ni, b) in bs.iter().enumerate() {
                let mut want = g_br * wave(dist(*b, *r), lambda);
                for (q, g) in &scat {
                    want += g[1] * wave(dist(*r, *q) + dist(*b, *q), lambda);
                }
                worst_entry = worst_entry.max(rel_err(ch.h_br[mi * n + ni], want));
            }
        }

        let phi = RisPhaseConfig::random(side * side, &mut rng);
        let w: Vec<Complex> = (0..n).map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let (mut sum, mut mag) = (Complex::new(0.0, 0.0), 0.0);
        for mi in 0..side * side {
            let f = Complex::from_polar(1.0, phi.phases()[mi]);
            for ni in 0..n {
                let term = ch.h_re[mi].conj() * f * ch.h_br[mi * n + ni] * w[ni];
                sum += term;
                mag += term.norm();
            }
        }
        let got = cascade_gain(&ch, &phi, &w).unwrap();
        worst_cascade = worst_cascade.max((got - sum).norm() / mag);
    }
    (worst_entry, worst_cascade)
}

/// Worst errors of the RIS-frame conversion: distance against Cartesian
/// geometry (relative) and angle against a direct evaluation of the
/// arctangent formula.
pub fn frame_errors(instances: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_r, mut worst_t) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let (rl, tl) = (rng.random_range(1.0..100.0), rng.random_range(-1.2..1.2));
        let (rs, ts) = (rng.random_range(1.0..100.0), rng.random_range(-1.2..1.2));
        let got = to_ris_frame(PolarCoord::new(rl, tl).unwrap(), PolarCoord::new(rs, ts).unwrap());
        let want_r = (rl * tl.cos() - rs * ts.cos()).hypot(rl * tl.sin() - rs * ts.sin());
        worst_r = worst_r.max((got.r - want_r).abs() / want_r);
        let mut want_t = (rl * tl.sin() - rs * ts.sin()).atan2(rs * tl.cos() - rs * ts.cos()) + tl;
        while want_t > PI {
            want_t -= 2.0 * PI;
        }
        while want_t <= -PI {
            want_t += 2.0 * PI;
        }
        worst_t = worst_t.max((got.theta.unwrap() - want_t).abs());
    }
    (worst_r, worst_t)
}

/// Worst entry error of fine codebooks (BS frame and RIS frame) against the
/// steering formula evaluated cell by cell.
pub fn codebook_errors(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let lambda = nearfocus::SPEED_OF_LIGHT / 60e9;
    let spacing = lambda / 2.0;
    for _ in 0..instances {
        let spec = CodebookSpec {
            l: rng.random_range(1..7),
            s: rng.random_range(1..7),
            beta_delta: 1.0,
            r_min: 1.0,
            r_max: 100.0,
            d_ref: rng.random_range(5.0..100.0),
        };
        let n = rng.random_range(1..48);
        let side = rng.random_range(1..5);
        let ris = (rng.random_range(5.0..60.0), rng.random_range(-1.0..1.0));
        let geom = ArrayGeometry::ula(n, spacing).unwrap();
        let cb = build_fine_codebook(&spec, &geom, lambda).unwrap();
        let ris_geom = ArrayGeometry::upa(side * side, spacing).unwrap();
        let rcb = codebook_to_ris_frame(&cb, PolarCoord::new(ris.0, ris.1).unwrap(), &ris_geom, lambda).unwrap();
        let bs = bs_elements(n, spacing);
        let re = ris_elements(side * side, spacing, ris);
        let ris_c = (ris.0 * ris.1.cos(), ris.0 * ris.1.sin(), 0.0);
        for l in 0..spec.l {
            let phi = (2.0 * (l + 1) as f64 - spec.l as f64 - 1.0) / spec.l as f64;
            let theta = phi.asin();
            for s in 0..spec.s {
                let r = spec.d_ref * (s + 1) as f64 / spec.s as f64;
                let f = (r * theta.cos(), r * theta.sin(), 0.0);
                let cw = cb.get(l, s).unwrap();
                // phase reference: distance from the array centre to the focal point
                let rb = dist((0.0, 0.0, 0.0), f);
                for (i, e) in bs.iter().enumerate() {
                    let want = Complex::from_polar(1.0 / (n as f64).sqrt(), -2.0 * PI / lambda * (dist(*e, f) - rb));
                    worst = worst.max((cw.weights[i] - want).norm());
                }
                let Some(rw) = rcb.get(l, s) else { continue };
                let r0 = dist(ris_c, f);
                for (i, e) in re.iter().enumerate() {
                    let want = Complex::from_polar(1.0 / ((side * side) as f64).sqrt(), -2.0 * PI / lambda * (dist(*e, f) - r0));
                    worst = worst.max((rw.weights[i] - want).norm());
                }
            }
        }
    }
    worst
}

pub fn check_numerics() -> Outcome {
    let (entry, cascade) = channel_errors(24, 5);
    let (fr, ft) = frame_errors(200, 6);
    let cw = codebook_errors(24, 7);
    Outcome::new(
        entry <= 1e-12 && cascade <= 1e-12 && fr <= 1e-9 && ft <= 1e-12 && cw <= 1e-12,
        format!(
            "channel entries {entry:.1e}, cascade gain {cascade:.1e}, frame distance {fr:.1e}, \
             frame angle {ft:.1e}, codewords {cw:.1e}"
        ),
    )
}

/// Places a device on every focal point of an 8x8 BS-frame codebook with
/// a noiseless, fading-free, equal-amplitude channel and returns how many
/// of the 64 scans put their maximum on the device's own cell.
pub fn oracle_hits() -> usize {
    let cfg = sim_config(64, 1, 1, GainModel::Fixed { re: 1.0, im: 0.0 });
    let lambda = cfg.wavelength();
    let spec = CodebookSpec { l: 8, s: 8, beta_delta: 1.0, r_min: 1.0, r_max: 8.0, d_ref: 8.0 };
    let cb = build_fine_codebook(&spec, &cfg.bs_geometry().unwrap(), lambda).unwrap();
    let mut hits = 0;
    for cw in cb.codewords() {
        let mut ch = gen_channels(&cfg, cw.focal, cfg.ris_position, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ch.link = Link::Direct;
        // keep each entry's propagation phase, drop the per-element path loss
        for h in &mut ch.h_bu {
            *h /= h.norm();
        }
        let map = scan_map(&ch, &cb, None, None, cfg.tx_power, f64::INFINITY).unwrap();
        hits += usize::from(oracle_best_index(&map).unwrap() == cw.grid_index);
    }
    hits
}

pub fn check_oracle() -> Outcome {
    let hits = oracle_hits();
    Outcome::new(hits == 64, format!("{hits}/64 cells recovered"))
}

/// Direct-branch received power recomputed from the channel.
pub fn received_power_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = sim_config(16, 4, 3, GainModel::Rayleigh { variance: 1.0 });
    let device = PolarCoord::new(rng.random_range(3.0..50.0), rng.random_range(-1.0..1.0)).unwrap();
    let mut ch = gen_channels(&cfg, device, cfg.ris_position, &mut rng).unwrap();
    ch.link = Link::Direct;
    let w: Vec<Complex> = (0..16).map(|_| Complex::from_polar(0.25, rng.random_range(0.0..2.0 * PI))).collect();
    let u = Complex::new(rng.random_range(-1e-6..1e-6), rng.random_range(-1e-6..1e-6));
    let p_t = rng.random_range(0.1..5.0);
    let got = received_power(&ch, &w, None, Some(u), p_t).unwrap();
    let mut g = Complex::new(0.0, 0.0);
    for i in 0..16 {
        g += ch.h_bu[i].conj() * w[i];
    }
    let want = (g * p_t.sqrt() + u).norm_sqr();
    (got - want).abs() / want
}

// ---------------------------------------------------------------- FLOPs

/// Per-layer FLOPs of the full-size detector, worked out by hand.
pub fn hand_flops() -> Vec<(&'static str, u64)> {
    let mut rows = vec![
        ("conv0", 1_920_000),   // 1x3, 1->64 at 100x100
        ("conv1", 30_720_000),  // 1x3, 64->64 at 50x50
        ("conv2", 7_680_000),   // 1x3, 64->64 at 25x25
        ("proj", 10_816),       // 1x1, 64->1 at 13x13
        ("embed", 21_632),      // 13 tokens x 2*13*64
    ];
    for _ in 0..3 {
        rows.push(("attn", 43_264)); // 4*13^2*64
        rows.push(("wo", 106_496)); // 13 x 2*64*64
        rows.push(("ffn1", 212_992)); // 13 x 2*64*128
        rows.push(("ffn2", 212_992));
    }
    rows.push(("token_proj", 21_632));
    rows.push(("dense1", 43_264));
    rows.push(("dense2", 512));
    rows
}

/// Table total, 42,145,088.
pub const HAND_TOTAL: u64 = 42_145_088;

pub fn check_flops() -> Outcome {
    let rep = flops_estimate(&ModelConfig::paper());
    let hand = hand_flops();
    let got: Vec<u64> = rep.layers.iter().map(|l| l.flops).collect();
    let want: Vec<u64> = hand.iter().map(|(_, f)| *f).collect();
    let total: u64 = want.iter().sum();
    assert_eq!(total, HAND_TOTAL);
    let anchors = fc_flops(169, 128) == 43_264 && attn_flops(13, 64) == 43_264 && conv_flops(1, 3, 1, 64, 100, 100) == 1_920_000;
    Outcome::new(
        got == want && rep.total == total && anchors,
        format!("{} layers, total {} (hand count {total}), anchors hold: {anchors}", got.len(), rep.total),
    )
}
