//! Primitive layers with explicit backward passes.
//!
//! Matrices are row-major `Vec<f64>`. Every `*_backward` accumulates into
//! the parameter gradients it is handed and returns the input gradient.

use crate::error::{config, domain, shape, Result};

/// Additive score given to blocked attention positions.
pub const MASK_FILL: f64 = -1e9;

/// `a (n x k) * b (k x m)`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x != 0.0 {
                for (o, &w) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                    *o += x * w;
                }
            }
        }
    }
    out
}

/// `acc += a^T (k x n) * g (n x m)` for `a` stored `n x k`.
pub fn add_at_b(acc: &mut [f64], a: &[f64], g: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x != 0.0 {
                for (o, &gv) in acc[p * m..(p + 1) * m].iter_mut().zip(grow) {
                    *o += x * gv;
                }
            }
        }
    }
}

/// `g (n x m) * b^T` for `b` stored `k x m`; result `n x k`.
pub fn matmul_bt(g: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = grow.iter().zip(&b[p * m..(p + 1) * m]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Row-wise affine map `x W + b` on `n` rows.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = matmul(x, w, n, din, dout);
    for row in y.chunks_exact_mut(dout) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<f64> {
    add_at_b(dw, x, dy, n, din, dout);
    for row in dy.chunks_exact(dout) {
        for (g, d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    matmul_bt(dy, w, n, din, dout)
}

/// Affine per-token embedding `z_i = x_i E + b`.
pub fn patch_embed(tokens: &[f64], e: &[f64], b: &[f64], n: usize, d_in: usize, d_model: usize) -> Result<Vec<f64>> {
    if tokens.len() != n * d_in || e.len() != d_in * d_model || b.len() != d_model {
        return Err(shape(format!(
            "patch embedding of {} values as {n}x{d_in} with E of {} and b of {}",
            tokens.len(),
            e.len(),
            b.len()
        )));
    }
    Ok(linear(tokens, e, b, n, d_in, d_model))
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `dy` wherever the activation output was not positive.
pub fn relu_backward_inplace(dy: &mut [f64], out: &[f64]) {
    for (g, &o) in dy.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Cached statistics of a row-wise layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalises each `d`-wide row to zero mean, unit (biased) variance, then
/// scales by `gamma` and shifts by `beta`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], d: usize) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / d);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            y[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let df = d as f64;
    for (r, g) in dy.chunks_exact(d).enumerate() {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum = 0.0;
        let mut sum_x = 0.0;
        for j in 0..d {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            let dh = g[j] * gamma[j];
            sum += dh;
            sum_x += dh * xh[j];
        }
        let inv = cache.inv_std[r];
        for j in 0..d {
            let dh = g[j] * gamma[j];
            dx[r * d + j] = inv / df * (df * dh - sum - xh[j] * sum_x);
        }
    }
    dx
}

/// Binary `n x n` attention mask; `true` lets row `i` attend to column `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub n: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn all(n: usize) -> Self {
        Self { n, allowed: vec![true; n * n] }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }

    /// Elementwise product.
    pub fn and(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if self.n != other.n {
            return Err(shape(format!("masks of size {} and {}", self.n, other.n)));
        }
        Ok(Self { n: self.n, allowed: self.allowed.iter().zip(&other.allowed).map(|(a, b)| *a && *b).collect() })
    }
}

/// Padding mask (columns of invalid tokens blocked) times, optionally, the
/// causal mask (`j > i` blocked).
pub fn build_masks(valid_rows: &[bool], causal: bool) -> AttentionMask {
    let n = valid_rows.len();
    let mut allowed = vec![true; n * n];
    for i in 0..n {
        for j in 0..n {
            allowed[i * n + j] = valid_rows[j] && !(causal && j > i);
        }
    }
    AttentionMask { n, allowed }
}

/// Softmax-normalised weights and output of one attention head.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    /// `n x n` attention weights.
    pub weights: Vec<f64>,
}

/// `softmax(Q K^T / sqrt(d_k) + mask) V` for `Q, K: n x d_k`, `V: n x d_v`.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d_k: usize,
    d_v: usize,
    mask: Option<&AttentionMask>,
) -> Result<(Vec<f64>, AttentionCache)> {
    if q.len() != n * d_k || k.len() != n * d_k || v.len() != n * d_v {
        return Err(shape(format!("attention operands do not match n = {n}, d_k = {d_k}, d_v = {d_v}")));
    }
    if let Some(m) = mask {
        if m.n != n {
            return Err(shape(format!("mask of size {} for {n} tokens", m.n)));
        }
        for i in 0..n {
            if !(0..n).any(|j| m.get(i, j)) {
                return Err(domain(format!("attention row {i} has every position blocked")));
            }
        }
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let qi = &q[i * d_k..(i + 1) * d_k];
        let row = &mut weights[i * n..(i + 1) * n];
        for j in 0..n {
            let s: f64 = qi.iter().zip(&k[j * d_k..(j + 1) * d_k]).map(|(a, b)| a * b).sum::<f64>() * scale;
            row[j] = match mask {
                Some(m) if !m.get(i, j) => s + MASK_FILL,
                _ => s,
            };
        }
        softmax_inplace(row);
    }
    let out = matmul(&weights, v, n, n, d_v);
    Ok((out, AttentionCache { weights }))
}

pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Gradients of one attention head: returns `(dQ, dK, dV)`.
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    cache: &AttentionCache,
    dout: &[f64],
    n: usize,
    d_k: usize,
    d_v: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let a = &cache.weights;
    let mut dv = vec![0.0; n * d_v];
    add_at_b(&mut dv, a, dout, n, n, d_v);
    let da = matmul_bt(dout, v, n, n, d_v);
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut ds = vec![0.0; n * n];
    for i in 0..n {
        let arow = &a[i * n..(i + 1) * n];
        let darow = &da[i * n..(i + 1) * n];
        let dot: f64 = arow.iter().zip(darow).map(|(x, y)| x * y).sum();
        for j in 0..n {
            ds[i * n + j] = arow[j] * (darow[j] - dot) * scale;
        }
    }
    let dq = matmul(&ds, k, n, n, d_k);
    let mut dk = vec![0.0; n * d_k];
    add_at_b(&mut dk, &ds, q, n, n, d_k);
    (dq, dk, dv)
}

/// Splits the columns of an `n x (h * d)` matrix into `h` contiguous heads.
pub fn split_heads(x: &[f64], n: usize, h: usize, d: usize) -> Vec<Vec<f64>> {
    (0..h)
        .map(|head| {
            let mut out = Vec::with_capacity(n * d);
            for i in 0..n {
                out.extend_from_slice(&x[i * h * d + head * d..i * h * d + (head + 1) * d]);
            }
            out
        })
        .collect()
}

pub fn merge_heads(parts: &[Vec<f64>], n: usize, d: usize) -> Vec<f64> {
    let h = parts.len();
    let mut out = vec![0.0; n * h * d];
    for (head, p) in parts.iter().enumerate() {
        for i in 0..n {
            out[i * h * d + head * d..i * h * d + (head + 1) * d].copy_from_slice(&p[i * d..(i + 1) * d]);
        }
    }
    out
}

/// Projection matrices of one multi-head attention layer, each `d x d`.
#[derive(Debug, Clone, Copy)]
pub struct MhaWeights<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub heads: Vec<AttentionCache>,
    /// Concatenated head outputs before `W^O`.
    pub concat: Vec<f64>,
}

/// `h` attention heads over per-head slices of `X W^Q`, `X W^K`, `X W^V`,
/// concatenated and projected by `W^O`.
pub fn multi_head(
    x: &[f64],
    w: MhaWeights<'_>,
    n: usize,
    d: usize,
    h: usize,
    mask: Option<&AttentionMask>,
) -> Result<(Vec<f64>, MhaCache)> {
    if h == 0 || !d.is_multiple_of(h) {
        return Err(config(format!("{h} heads do not divide d_model = {d}")));
    }
    let dk = d / h;
    let q = matmul(x, w.wq, n, d, d);
    let k = matmul(x, w.wk, n, d, d);
    let v = matmul(x, w.wv, n, d, d);
    let (qs, ks, vs) = (split_heads(&q, n, h, dk), split_heads(&k, n, h, dk), split_heads(&v, n, h, dk));
    let mut outs = Vec::with_capacity(h);
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        let (o, c) = attention(&qs[i], &ks[i], &vs[i], n, dk, dk, mask)?;
        outs.push(o);
        heads.push(c);
    }
    let concat = merge_heads(&outs, n, dk);
    let y = matmul(&concat, w.wo, n, d, d);
    Ok((y, MhaCache { q, k, v, heads, concat }))
}

/// Gradient slots of one multi-head layer.
pub struct MhaGrads<'a> {
    pub wq: &'a mut [f64],
    pub wk: &'a mut [f64],
    pub wv: &'a mut [f64],
    pub wo: &'a mut [f64],
}

pub fn multi_head_backward(
    x: &[f64],
    w: MhaWeights<'_>,
    cache: &MhaCache,
    dy: &[f64],
    g: MhaGrads<'_>,
    n: usize,
    d: usize,
    h: usize,
) -> Vec<f64> {
    let dk = d / h;
    add_at_b(g.wo, &cache.concat, dy, n, d, d);
    let dconcat = matmul_bt(dy, w.wo, n, d, d);
    let dparts = split_heads(&dconcat, n, h, dk);
    let (qs, ks, vs) = (split_heads(&cache.q, n, h, dk), split_heads(&cache.k, n, h, dk), split_heads(&cache.v, n, h, dk));
    let mut dq = Vec::with_capacity(h);
    let mut dkk = Vec::with_capacity(h);
    let mut dv = Vec::with_capacity(h);
    for i in 0..h {
        let (a, b, c) = attention_backward(&qs[i], &ks[i], &vs[i], &cache.heads[i], &dparts[i], n, dk, dk);
        dq.push(a);
        dkk.push(b);
        dv.push(c);
    }
    let (dq, dkk, dv) = (merge_heads(&dq, n, dk), merge_heads(&dkk, n, dk), merge_heads(&dv, n, dk));
    add_at_b(g.wq, x, &dq, n, d, d);
    add_at_b(g.wk, x, &dkk, n, d, d);
    add_at_b(g.wv, x, &dv, n, d, d);
    let mut dx = matmul_bt(&dq, w.wq, n, d, d);
    for (a, b) in dx.iter_mut().zip(matmul_bt(&dkk, w.wk, n, d, d)) {
        *a += b;
    }
    for (a, b) in dx.iter_mut().zip(matmul_bt(&dv, w.wv, n, d, d)) {
        *a += b;
    }
    dx
}

/// `1 x 3` convolution along the width axis with zero padding of one, over
/// a channel-last `h x w x c_in` map. `kernel` is `[3][c_in][c_out]`.
pub fn conv1x3(x: &[f64], kernel: &[f64], h: usize, w: usize, c_in: usize, c_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; h * w * c_out];
    for r in 0..h {
        for col in 0..w {
            let out = &mut y[(r * w + col) * c_out..(r * w + col + 1) * c_out];
            for t in 0..3 {
                let src = col as isize + t as isize - 1;
                if src < 0 || src >= w as isize {
                    continue;
                }
                let xin = &x[(r * w + src as usize) * c_in..(r * w + src as usize + 1) * c_in];
                for (ci, &xv) in xin.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &kernel[(t * c_in + ci) * c_out..(t * c_in + ci + 1) * c_out];
                    for (o, &kv) in out.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
    }
    y
}

/// Accumulates the kernel gradient and returns the input gradient.
pub fn conv1x3_backward(
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    dkernel: &mut [f64],
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for r in 0..h {
        for col in 0..w {
            let g = &dy[(r * w + col) * c_out..(r * w + col + 1) * c_out];
            for t in 0..3 {
                let src = col as isize + t as isize - 1;
                if src < 0 || src >= w as isize {
                    continue;
                }
                let base = (r * w + src as usize) * c_in;
                for ci in 0..c_in {
                    let off = (t * c_in + ci) * c_out;
                    let xv = x[base + ci];
                    let krow = &kernel[off..off + c_out];
                    let dk = &mut dkernel[off..off + c_out];
                    let mut acc = 0.0;
                    for co in 0..c_out {
                        dk[co] += xv * g[co];
                        acc += krow[co] * g[co];
                    }
                    dx[base + ci] += acc;
                }
            }
        }
    }
    dx
}

/// 2x2 stride-2 max pooling with ceil semantics on a channel-last map.
/// Returns the pooled map and, per output value, the flat input index it
/// came from. Ties keep the first position in row-major window order.
pub fn max_pool2(x: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut y = vec![0.0; ho * wo * c];
    let mut arg = vec![0; ho * wo * c];
    for r in 0..ho {
        for col in 0..wo {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for dr in 0..2 {
                    for dc in 0..2 {
                        let (rr, cc) = (2 * r + dr, 2 * col + dc);
                        if rr < h && cc < w {
                            let i = (rr * w + cc) * c + ch;
                            if x[i] > best {
                                best = x[i];
                                bi = i;
                            }
                        }
                    }
                }
                y[(r * wo + col) * c + ch] = best;
                arg[(r * wo + col) * c + ch] = bi;
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(dy: &[f64], arg: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

/// Batch-norm statistics of one channel-last batch.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var_unbiased: Vec<f64>,
}

/// Training-mode batch norm over every position of every sample. `x` holds
/// `count` rows of `c` channels.
pub fn batch_norm_train(x: &[f64], gamma: &[f64], beta: &[f64], c: usize) -> (Vec<f64>, BatchNormCache) {
    let count = x.len() / c;
    let mut mean = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for j in 0..c {
            var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / count as f64 + NORM_EPS).sqrt()).collect();
    let var_unbiased = var.iter().map(|v| v / (count.max(2) - 1) as f64).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for (i, &v) in x.iter().enumerate() {
        let j = i % c;
        let h = (v - mean[j]) * inv_std[j];
        xhat[i] = h;
        y[i] = gamma[j] * h + beta[j];
    }
    (y, BatchNormCache { xhat, inv_std, mean, var_unbiased })
}

pub fn batch_norm_eval(x: &[f64], gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], c: usize) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = i % c;
            gamma[j] * (v - mean[j]) / (var[j] + NORM_EPS).sqrt() + beta[j]
        })
        .collect()
}

pub fn batch_norm_backward(
    cache: &BatchNormCache,
    gamma: &[f64],
    dy: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    c: usize,
) -> Vec<f64> {
    let count = (dy.len() / c) as f64;
    let mut sum = vec![0.0; c];
    let mut sum_x = vec![0.0; c];
    for (i, &g) in dy.iter().enumerate() {
        let j = i % c;
        dgamma[j] += g * cache.xhat[i];
        dbeta[j] += g;
        sum[j] += g * gamma[j];
        sum_x[j] += g * gamma[j] * cache.xhat[i];
    }
    dy.iter()
        .enumerate()
        .map(|(i, &g)| {
            let j = i % c;
            cache.inv_std[j] / count * (count * g * gamma[j] - sum[j] - cache.xhat[i] * sum_x[j])
        })
        .collect()
}

/// Mean Euclidean distance between predictions and targets.
pub fn position_loss(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(shape(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt()).sum();
    Ok(sum / pred.len() as f64)
}

/// Below this distance a sample contributes a zero subgradient.
pub const LOSS_SUBGRADIENT_EPS: f64 = 1e-12;

/// Gradient of [`position_loss`] with respect to each prediction.
pub fn position_loss_grad(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let nb = pred.len() as f64;
    pred.iter()
        .zip(truth)
        .map(|(p, t)| {
            let (dr, dt) = (p[0] - t[0], p[1] - t[1]);
            let dist = (dr * dr + dt * dt).sqrt();
            if dist < LOSS_SUBGRADIENT_EPS {
                [0.0, 0.0]
            } else {
                [dr / dist / nb, dt / dist / nb]
            }
        })
        .collect()
}
