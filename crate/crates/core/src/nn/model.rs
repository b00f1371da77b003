//! The position detector and the stage-1 coarse regressor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::*;
use crate::error::{config, shape, Error, Result};

/// Momentum of the batch-norm running estimates.
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture of the position detector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub conv_channels: usize,
    pub conv_blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dense_hidden: usize,
    /// Attention blocks; the last one is masked.
    pub attn_blocks: usize,
}

impl ModelConfig {
    /// The full-size network for a `100 x 100` map.
    pub fn paper() -> Self {
        Self {
            input_h: 100,
            input_w: 100,
            conv_channels: 64,
            conv_blocks: 3,
            d_model: 64,
            heads: 4,
            ffn_hidden: 128,
            dense_hidden: 128,
            attn_blocks: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0 || self.input_w == 0 {
            return Err(config("model input must be at least 1x1"));
        }
        if self.conv_channels == 0 || self.d_model == 0 || self.ffn_hidden == 0 || self.dense_hidden == 0 {
            return Err(config("model widths must be positive"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(config(format!("{} heads do not divide d_model = {}", self.heads, self.d_model)));
        }
        if self.attn_blocks == 0 {
            return Err(config("model needs at least one attention block"));
        }
        Ok(())
    }

    /// Spatial extent after each conv block, input first.
    pub fn spatial_chain(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.input_h, self.input_w)];
        for _ in 0..self.conv_blocks {
            let (h, w) = *dims.last().expect("non-empty");
            dims.push((h.div_ceil(2), w.div_ceil(2)));
        }
        dims
    }

    /// `(tokens, token width)` after the conv stack.
    pub fn tokens(&self) -> (usize, usize) {
        *self.spatial_chain().last().expect("non-empty")
    }

    pub fn flatten_width(&self) -> usize {
        let (n, w) = self.tokens();
        n * w
    }

    /// Canonical text form, hashed into weight files.
    pub fn canonical(&self) -> String {
        format!(
            "nearfocus-detector v1 input={}x{} conv={}x{} d_model={} heads={} ffn={} dense={} attn_blocks={}",
            self.input_h,
            self.input_w,
            self.conv_channels,
            self.conv_blocks,
            self.d_model,
            self.heads,
            self.ffn_hidden,
            self.dense_hidden,
            self.attn_blocks
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Running statistics are stored but not optimised.
    pub trainable: bool,
}

/// Every tensor of a network in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    pub tensors: Vec<NamedTensor>,
}

impl ModelWeights {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> usize {
        self.tensors.push(NamedTensor { name, shape, data, trainable });
        self.tensors.len() - 1
    }

    fn glorot(&mut self, rng: &mut ChaCha8Rng, name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> usize {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.push(name, shape, data, true)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f64, trainable: bool) -> usize {
        let n = shape.iter().product();
        self.push(name, shape, vec![value; n], trainable)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// One map fed to a network.
#[derive(Debug, Clone, Copy)]
pub struct MapInput<'a> {
    /// `h x w` values, row-major.
    pub values: &'a [f64],
    /// Cell validity, same layout; masked-out cells hold zero.
    pub valid: &'a [bool],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_finite(layer: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite { layer: layer.into(), detail: format!("value {} at index {i}", v[i]) }),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    kernel: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<ConvIdx>,
    proj_w: usize,
    proj_b: usize,
    embed_w: usize,
    embed_b: usize,
    blocks: Vec<BlockIdx>,
    tok_w: usize,
    tok_b: usize,
    d1_w: usize,
    d1_b: usize,
    d2_w: usize,
    d2_b: usize,
}

struct ConvCache {
    input: Vec<f64>,
    bn: BatchNormCache,
    act: Vec<f64>,
    pool_arg: Vec<usize>,
    h: usize,
    w: usize,
    c_in: usize,
}

struct BlockCache {
    x: Vec<f64>,
    mha: MhaCache,
    ln1: LayerNormCache,
    y1: Vec<f64>,
    hidden: Vec<f64>,
    ln2: LayerNormCache,
}

struct SampleCache {
    pooled: Vec<f64>,
    tokens: Vec<f64>,
    blocks: Vec<BlockCache>,
    encoded: Vec<f64>,
    flat: Vec<f64>,
    hidden: Vec<f64>,
    out: [f64; 2],
}

/// Intermediate values of one train-mode forward pass.
pub struct ForwardCache {
    convs: Vec<ConvCache>,
    samples: Vec<SampleCache>,
}

/// Conv embedding, attention encoder and dense regression head mapping a
/// scan map to a normalised `(r, theta)` pair.
#[derive(Debug, Clone)]
pub struct PositionDetector {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    layout: Layout,
}

impl PositionDetector {
    /// Glorot-uniform weights, zero biases, unit norm scales.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights::default();
        let c = config.conv_channels;
        let mut convs = Vec::with_capacity(config.conv_blocks);
        let mut c_in = 1;
        for b in 0..config.conv_blocks {
            convs.push(ConvIdx {
                kernel: w.glorot(&mut rng, format!("conv{b}.kernel"), vec![3, c_in, c], 3 * c_in, 3 * c),
                gamma: w.constant(format!("conv{b}.bn.gamma"), vec![c], 1.0, true),
                beta: w.constant(format!("conv{b}.bn.beta"), vec![c], 0.0, true),
                mean: w.constant(format!("conv{b}.bn.running_mean"), vec![c], 0.0, false),
                var: w.constant(format!("conv{b}.bn.running_var"), vec![c], 1.0, false),
            });
            c_in = c;
        }
        let (_, tw) = config.tokens();
        let d = config.d_model;
        let f = config.ffn_hidden;
        let proj_w = w.glorot(&mut rng, "proj.weight".into(), vec![c_in], c_in, 1);
        let proj_b = w.constant("proj.bias".into(), vec![1], 0.0, true);
        let embed_w = w.glorot(&mut rng, "embed.weight".into(), vec![tw, d], tw, d);
        let embed_b = w.constant("embed.bias".into(), vec![d], 0.0, true);
        let mut blocks = Vec::with_capacity(config.attn_blocks);
        for b in 0..config.attn_blocks {
            blocks.push(BlockIdx {
                wq: w.glorot(&mut rng, format!("block{b}.wq"), vec![d, d], d, d),
                wk: w.glorot(&mut rng, format!("block{b}.wk"), vec![d, d], d, d),
                wv: w.glorot(&mut rng, format!("block{b}.wv"), vec![d, d], d, d),
                wo: w.glorot(&mut rng, format!("block{b}.wo"), vec![d, d], d, d),
                ln1_g: w.constant(format!("block{b}.ln1.gamma"), vec![d], 1.0, true),
                ln1_b: w.constant(format!("block{b}.ln1.beta"), vec![d], 0.0, true),
                w1: w.glorot(&mut rng, format!("block{b}.ffn.w1"), vec![d, f], d, f),
                b1: w.constant(format!("block{b}.ffn.b1"), vec![f], 0.0, true),
                w2: w.glorot(&mut rng, format!("block{b}.ffn.w2"), vec![f, d], f, d),
                b2: w.constant(format!("block{b}.ffn.b2"), vec![d], 0.0, true),
                ln2_g: w.constant(format!("block{b}.ln2.gamma"), vec![d], 1.0, true),
                ln2_b: w.constant(format!("block{b}.ln2.beta"), vec![d], 0.0, true),
            });
        }
        let tok_w = w.glorot(&mut rng, "token_proj.weight".into(), vec![d, tw], d, tw);
        let tok_b = w.constant("token_proj.bias".into(), vec![tw], 0.0, true);
        let flat = config.flatten_width();
        let hd = config.dense_hidden;
        let d1_w = w.glorot(&mut rng, "dense1.weight".into(), vec![flat, hd], flat, hd);
        let d1_b = w.constant("dense1.bias".into(), vec![hd], 0.0, true);
        let d2_w = w.glorot(&mut rng, "dense2.weight".into(), vec![hd, 2], hd, 2);
        let d2_b = w.constant("dense2.bias".into(), vec![2], 0.0, true);
        let layout =
            Layout { convs, proj_w, proj_b, embed_w, embed_b, blocks, tok_w, tok_b, d1_w, d1_b, d2_w, d2_b };
        Ok(Self { config, weights: w, layout })
    }

    fn t(&self, i: usize) -> &[f64] {
        &self.weights.tensors[i].data
    }

    /// Validity of each token row: a token is padding when every input
    /// row it pools over is fully masked.
    pub fn token_validity(&self, valid: &[bool]) -> Vec<bool> {
        let (n, _) = self.config.tokens();
        let (h, w) = (self.config.input_h, self.config.input_w);
        let span = 1usize << self.config.conv_blocks;
        (0..n)
            .map(|i| {
                let rows = (i * span)..((i + 1) * span).min(h);
                rows.into_iter().any(|r| valid[r * w..(r + 1) * w].iter().any(|v| *v))
            })
            .collect()
    }

    fn check_inputs(&self, inputs: &[MapInput<'_>]) -> Result<()> {
        let len = self.config.input_h * self.config.input_w;
        for (i, x) in inputs.iter().enumerate() {
            if x.values.len() != len || x.valid.len() != len {
                return Err(shape(format!(
                    "input {i} has {} values, model expects {}x{}",
                    x.values.len(),
                    self.config.input_h,
                    self.config.input_w
                )));
            }
        }
        if inputs.is_empty() {
            return Err(shape("empty batch"));
        }
        Ok(())
    }

    /// Forward pass over a batch. In train mode batch norm uses batch
    /// statistics and the returned cache feeds [`backward`](Self::backward).
    pub fn forward(&self, inputs: &[MapInput<'_>], mode: Mode) -> Result<(Vec<[f64; 2]>, Option<ForwardCache>)> {
        self.check_inputs(inputs)?;
        let cfg = &self.config;
        let b = inputs.len();
        let chain = cfg.spatial_chain();
        let mut x: Vec<f64> = inputs.iter().flat_map(|i| i.values.iter().copied()).collect();
        let mut c_in = 1;
        let c = cfg.conv_channels;
        let mut conv_caches = Vec::new();
        for (k, idx) in self.layout.convs.iter().enumerate() {
            let (h, w) = chain[k];
            let per_in = h * w * c_in;
            let kernel = self.t(idx.kernel);
            let mut conv = Vec::with_capacity(b * h * w * c);
            for s in 0..b {
                conv.extend(conv1x3(&x[s * per_in..(s + 1) * per_in], kernel, h, w, c_in, c));
            }
            let (mut act, bn) = match mode {
                Mode::Train => {
                    let (y, cache) = batch_norm_train(&conv, self.t(idx.gamma), self.t(idx.beta), c);
                    (y, Some(cache))
                }
                Mode::Eval => (
                    batch_norm_eval(&conv, self.t(idx.gamma), self.t(idx.beta), self.t(idx.mean), self.t(idx.var), c),
                    None,
                ),
            };
            relu_inplace(&mut act);
            let per_act = h * w * c;
            let (ho, wo) = chain[k + 1];
            let mut pooled = Vec::with_capacity(b * ho * wo * c);
            let mut args = Vec::with_capacity(b * ho * wo * c);
            for s in 0..b {
                let (p, a) = max_pool2(&act[s * per_act..(s + 1) * per_act], h, w, c);
                pooled.extend(p);
                args.extend(a.into_iter().map(|i| i + s * per_act));
            }
            check_finite(&format!("conv block {k}"), &pooled)?;
            if let Some(bn) = bn {
                conv_caches.push(ConvCache { input: x, bn, act, pool_arg: args, h, w, c_in });
            }
            x = pooled;
            c_in = c;
        }
        let (n, tw) = cfg.tokens();
        let per = n * tw * c_in;
        let mut preds = Vec::with_capacity(b);
        let mut samples = Vec::with_capacity(b);
        for s in 0..b {
            let pooled = &x[s * per..(s + 1) * per];
            let tv = self.token_validity(inputs[s].valid);
            let (out, cache) = self.forward_tail(pooled, &tv, c_in)?;
            preds.push(out);
            if mode == Mode::Train {
                samples.push(cache);
            }
        }
        let cache = (mode == Mode::Train).then_some(ForwardCache { convs: conv_caches, samples });
        Ok((preds, cache))
    }

    fn forward_tail(&self, pooled: &[f64], token_valid: &[bool], c: usize) -> Result<([f64; 2], SampleCache)> {
        let cfg = &self.config;
        let l = &self.layout;
        let (n, tw) = cfg.tokens();
        let d = cfg.d_model;
        let pw = self.t(l.proj_w);
        let pb = self.t(l.proj_b)[0];
        let tokens: Vec<f64> =
            pooled.chunks_exact(c).map(|ch| ch.iter().zip(pw).map(|(a, b)| a * b).sum::<f64>() + pb).collect();
        let mut h = patch_embed(&tokens, self.t(l.embed_w), self.t(l.embed_b), n, tw, d)?;
        let mut blocks = Vec::with_capacity(l.blocks.len());
        for (bi, idx) in l.blocks.iter().enumerate() {
            let mask = (bi + 1 == l.blocks.len()).then(|| build_masks(token_valid, true));
            let (y, cache) = self.block_forward(&h, idx, mask)?;
            check_finite(&format!("attention block {bi}"), &y)?;
            blocks.push(cache);
            h = y;
        }
        let flat = linear(&h, self.t(l.tok_w), self.t(l.tok_b), n, d, tw);
        let hd = cfg.dense_hidden;
        let mut hidden = linear(&flat, self.t(l.d1_w), self.t(l.d1_b), 1, n * tw, hd);
        relu_inplace(&mut hidden);
        let z = linear(&hidden, self.t(l.d2_w), self.t(l.d2_b), 1, hd, 2);
        check_finite("output head", &z)?;
        let out = [sigmoid(z[0]), sigmoid(z[1])];
        Ok((out, SampleCache { pooled: pooled.to_vec(), tokens, blocks, encoded: h, flat, hidden, out }))
    }

    fn block_forward(&self, x: &[f64], idx: &BlockIdx, mask: Option<AttentionMask>) -> Result<(Vec<f64>, BlockCache)> {
        let (n, _) = self.config.tokens();
        let d = self.config.d_model;
        let f = self.config.ffn_hidden;
        let w = MhaWeights { wq: self.t(idx.wq), wk: self.t(idx.wk), wv: self.t(idx.wv), wo: self.t(idx.wo) };
        let (m, mha) = multi_head(x, w, n, d, self.config.heads, mask.as_ref())?;
        let r1: Vec<f64> = x.iter().zip(&m).map(|(a, b)| a + b).collect();
        let (y1, ln1) = layer_norm(&r1, self.t(idx.ln1_g), self.t(idx.ln1_b), d);
        let mut hidden = linear(&y1, self.t(idx.w1), self.t(idx.b1), n, d, f);
        relu_inplace(&mut hidden);
        let ff = linear(&hidden, self.t(idx.w2), self.t(idx.b2), n, f, d);
        let r2: Vec<f64> = y1.iter().zip(&ff).map(|(a, b)| a + b).collect();
        let (y2, ln2) = layer_norm(&r2, self.t(idx.ln2_g), self.t(idx.ln2_b), d);
        Ok((y2, BlockCache { x: x.to_vec(), mha, ln1, y1, hidden, ln2 }))
    }

    /// Gradients of every tensor given `d loss / d prediction` per sample.
    pub fn backward(&self, cache: &ForwardCache, dpred: &[[f64; 2]]) -> Vec<Vec<f64>> {
        let mut g = self.weights.zeros_like();
        let cfg = &self.config;
        let c = cfg.conv_channels;
        let mut dx: Vec<f64> = Vec::new();
        for (s, sc) in cache.samples.iter().enumerate() {
            dx.extend(self.tail_backward(sc, dpred[s], &mut g, c));
        }
        for (k, cc) in cache.convs.iter().enumerate().rev() {
            let idx = self.layout.convs[k];
            let mut dact = max_pool2_backward(&dx, &cc.pool_arg, cc.act.len());
            relu_backward_inplace(&mut dact, &cc.act);
            let (dgamma, dbeta) = two_mut(&mut g, idx.gamma, idx.beta);
            let dconv = batch_norm_backward(&cc.bn, self.t(idx.gamma), &dact, dgamma, dbeta, c);
            let per_in = cc.h * cc.w * cc.c_in;
            let per_out = cc.h * cc.w * c;
            let b = cc.input.len() / per_in;
            let kernel = self.t(idx.kernel);
            let mut next = Vec::with_capacity(cc.input.len());
            for s in 0..b {
                next.extend(conv1x3_backward(
                    &cc.input[s * per_in..(s + 1) * per_in],
                    kernel,
                    &dconv[s * per_out..(s + 1) * per_out],
                    &mut g[idx.kernel],
                    cc.h,
                    cc.w,
                    cc.c_in,
                    c,
                ));
            }
            dx = next;
        }
        g
    }

    fn tail_backward(&self, sc: &SampleCache, dout: [f64; 2], g: &mut [Vec<f64>], c: usize) -> Vec<f64> {
        let cfg = &self.config;
        let l = &self.layout;
        let (n, tw) = cfg.tokens();
        let d = cfg.d_model;
        let hd = cfg.dense_hidden;
        let dz = [dout[0] * sc.out[0] * (1.0 - sc.out[0]), dout[1] * sc.out[1] * (1.0 - sc.out[1])];
        let (dw, db) = two_mut(g, l.d2_w, l.d2_b);
        let mut dhidden = linear_backward(&sc.hidden, self.t(l.d2_w), &dz, dw, db, 1, hd, 2);
        relu_backward_inplace(&mut dhidden, &sc.hidden);
        let (dw, db) = two_mut(g, l.d1_w, l.d1_b);
        let dflat = linear_backward(&sc.flat, self.t(l.d1_w), &dhidden, dw, db, 1, n * tw, hd);
        let (dw, db) = two_mut(g, l.tok_w, l.tok_b);
        let mut dh = linear_backward(&sc.encoded, self.t(l.tok_w), &dflat, dw, db, n, d, tw);
        for (bi, bc) in sc.blocks.iter().enumerate().rev() {
            dh = self.block_backward(bc, &l.blocks[bi], &dh, g);
        }
        let (dw, db) = two_mut(g, l.embed_w, l.embed_b);
        let dtokens = linear_backward(&sc.tokens, self.t(l.embed_w), &dh, dw, db, n, tw, d);
        let pw = self.t(l.proj_w);
        let mut dpooled = vec![0.0; sc.pooled.len()];
        for (p, &dt) in dtokens.iter().enumerate() {
            g[l.proj_b][0] += dt;
            for ch in 0..c {
                g[l.proj_w][ch] += sc.pooled[p * c + ch] * dt;
                dpooled[p * c + ch] = pw[ch] * dt;
            }
        }
        dpooled
    }

    fn block_backward(&self, bc: &BlockCache, idx: &BlockIdx, dy: &[f64], g: &mut [Vec<f64>]) -> Vec<f64> {
        let (n, _) = self.config.tokens();
        let d = self.config.d_model;
        let f = self.config.ffn_hidden;
        let (dg, db) = two_mut(g, idx.ln2_g, idx.ln2_b);
        let dr2 = layer_norm_backward(&bc.ln2, self.t(idx.ln2_g), dy, dg, db, d);
        let (dw, db) = two_mut(g, idx.w2, idx.b2);
        let mut dhidden = linear_backward(&bc.hidden, self.t(idx.w2), &dr2, dw, db, n, f, d);
        relu_backward_inplace(&mut dhidden, &bc.hidden);
        let (dw, db) = two_mut(g, idx.w1, idx.b1);
        let dy1_ffn = linear_backward(&bc.y1, self.t(idx.w1), &dhidden, dw, db, n, d, f);
        let dy1: Vec<f64> = dr2.iter().zip(&dy1_ffn).map(|(a, b)| a + b).collect();
        let (dg, db) = two_mut(g, idx.ln1_g, idx.ln1_b);
        let dr1 = layer_norm_backward(&bc.ln1, self.t(idx.ln1_g), &dy1, dg, db, d);
        let w = MhaWeights { wq: self.t(idx.wq), wk: self.t(idx.wk), wv: self.t(idx.wv), wo: self.t(idx.wo) };
        let [gq, gk, gv, go] = four_mut(g, [idx.wq, idx.wk, idx.wv, idx.wo]);
        let grads = MhaGrads { wq: gq, wk: gk, wv: gv, wo: go };
        let dx_mha = multi_head_backward(&bc.x, w, &bc.mha, &dr1, grads, n, d, self.config.heads);
        dr1.iter().zip(&dx_mha).map(|(a, b)| a + b).collect()
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (cc, idx) in cache.convs.iter().zip(self.layout.convs.clone()) {
            let mean = &mut self.weights.tensors[idx.mean].data;
            for (m, b) in mean.iter_mut().zip(&cc.bn.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            let var = &mut self.weights.tensors[idx.var].data;
            for (v, b) in var.iter_mut().zip(&cc.bn.var_unbiased) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
            }
        }
    }
}

fn two_mut(g: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b, "tensor indices out of declaration order");
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn four_mut(g: &mut [Vec<f64>], idx: [usize; 4]) -> [&mut [f64]; 4] {
    let [a, b, c, d] = g.get_disjoint_mut(idx).expect("distinct tensor indices");
    [a.as_mut_slice(), b.as_mut_slice(), c.as_mut_slice(), d.as_mut_slice()]
}

/// Dense `4 -> hidden (ReLU) -> 2 (sigmoid)` regressor for coarse maps.
#[derive(Debug, Clone)]
pub struct CoarseNet {
    pub hidden: usize,
    pub weights: ModelWeights,
}

pub struct CoarseCache {
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    out: Vec<[f64; 2]>,
}

impl CoarseNet {
    pub const INPUTS: usize = 4;

    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(config("coarse network needs a positive hidden width"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights::default();
        w.glorot(&mut rng, "coarse.dense1.weight".into(), vec![Self::INPUTS, hidden], Self::INPUTS, hidden);
        w.constant("coarse.dense1.bias".into(), vec![hidden], 0.0, true);
        w.glorot(&mut rng, "coarse.dense2.weight".into(), vec![hidden, 2], hidden, 2);
        w.constant("coarse.dense2.bias".into(), vec![2], 0.0, true);
        Ok(Self { hidden, weights: w })
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(format!("nearfocus-coarse v1 inputs=4 hidden={}", self.hidden).as_bytes()).into()
    }

    pub fn forward(&self, inputs: &[MapInput<'_>]) -> Result<(Vec<[f64; 2]>, CoarseCache)> {
        let t = &self.weights.tensors;
        let mut cache = CoarseCache { inputs: Vec::new(), hidden: Vec::new(), out: Vec::new() };
        for x in inputs {
            if x.values.len() != Self::INPUTS {
                return Err(shape(format!("coarse input has {} values, expected 4", x.values.len())));
            }
            let mut h = linear(x.values, &t[0].data, &t[1].data, 1, Self::INPUTS, self.hidden);
            relu_inplace(&mut h);
            let z = linear(&h, &t[2].data, &t[3].data, 1, self.hidden, 2);
            check_finite("coarse head", &z)?;
            cache.inputs.push(x.values.to_vec());
            cache.hidden.push(h);
            cache.out.push([sigmoid(z[0]), sigmoid(z[1])]);
        }
        Ok((cache.out.clone(), cache))
    }

    pub fn backward(&self, cache: &CoarseCache, dpred: &[[f64; 2]]) -> Vec<Vec<f64>> {
        let mut g = self.weights.zeros_like();
        let t = &self.weights.tensors;
        for (i, dp) in dpred.iter().enumerate() {
            let o = cache.out[i];
            let dz = [dp[0] * o[0] * (1.0 - o[0]), dp[1] * o[1] * (1.0 - o[1])];
            let (dw, db) = two_mut(&mut g, 2, 3);
            let mut dh = linear_backward(&cache.hidden[i], &t[2].data, &dz, dw, db, 1, self.hidden, 2);
            relu_backward_inplace(&mut dh, &cache.hidden[i]);
            let (dw, db) = two_mut(&mut g, 0, 1);
            linear_backward(&cache.inputs[i], &t[0].data, &dh, dw, db, 1, Self::INPUTS, self.hidden);
        }
        g
    }
}

/// Common interface of the two trainable networks.
pub trait Regressor: Send + Sync {
    fn weights(&self) -> &ModelWeights;
    fn weights_mut(&mut self) -> &mut ModelWeights;
    fn digest(&self) -> [u8; 32];

    /// Eval-mode predictions.
    fn predict(&self, inputs: &[MapInput<'_>]) -> Result<Vec<[f64; 2]>>;

    /// Train-mode loss and gradients without touching any state.
    fn loss_and_grads(&self, inputs: &[MapInput<'_>], targets: &[[f64; 2]]) -> Result<(f64, Vec<Vec<f64>>)>;

    /// Train-mode loss and gradients; also updates running statistics.
    fn train_step_grads(&mut self, inputs: &[MapInput<'_>], targets: &[[f64; 2]]) -> Result<(f64, Vec<Vec<f64>>)>;
}

impl Regressor for PositionDetector {
    fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    fn digest(&self) -> [u8; 32] {
        self.config.digest()
    }

    fn predict(&self, inputs: &[MapInput<'_>]) -> Result<Vec<[f64; 2]>> {
        Ok(self.forward(inputs, Mode::Eval)?.0)
    }

    fn loss_and_grads(&self, inputs: &[MapInput<'_>], targets: &[[f64; 2]]) -> Result<(f64, Vec<Vec<f64>>)> {
        let (pred, cache) = self.forward(inputs, Mode::Train)?;
        let loss = position_loss(&pred, targets)?;
        let g = self.backward(&cache.expect("train mode caches"), &position_loss_grad(&pred, targets));
        Ok((loss, g))
    }

    fn train_step_grads(&mut self, inputs: &[MapInput<'_>], targets: &[[f64; 2]]) -> Result<(f64, Vec<Vec<f64>>)> {
        let (pred, cache) = self.forward(inputs, Mode::Train)?;
        let cache = cache.expect("train mode caches");
        let loss = position_loss(&pred, targets)?;
        let g = self.backward(&cache, &position_loss_grad(&pred, targets));
        self.update_running_stats(&cache);
        Ok((loss, g))
    }
}

impl Regressor for CoarseNet {
    fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    fn digest(&self) -> [u8; 32] {
        CoarseNet::digest(self)
    }

    fn predict(&self, inputs: &[MapInput<'_>]) -> Result<Vec<[f64; 2]>> {
        Ok(self.forward(inputs)?.0)
    }

    fn loss_and_grads(&self, inputs: &[MapInput<'_>], targets: &[[f64; 2]]) -> Result<(f64, Vec<Vec<f64>>)> {
        let (pred, cache) = self.forward(inputs)?;
        let loss = position_loss(&pred, targets)?;
        Ok((loss, self.backward(&cache, &position_loss_grad(&pred, targets))))
    }

    fn train_step_grads(&mut self, inputs: &[MapInput<'_>], targets: &[[f64; 2]]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.loss_and_grads(inputs, targets)
    }
}
