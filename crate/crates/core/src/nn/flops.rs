//! Per-layer floating-point operation counts.
//!
//! A convolution costs `Fh Fw Cin Cout Hout Wout`, a fully connected layer
//! `2 Cin Cout` per application and a self-attention layer `4 n^2 g`.
//! Layers applied token by token count once per token.

use serde::Serialize;

use super::model::ModelConfig;

pub fn conv_flops(fh: u64, fw: u64, c_in: u64, c_out: u64, h_out: u64, w_out: u64) -> u64 {
    fh * fw * c_in * c_out * h_out * w_out
}

pub fn fc_flops(c_in: u64, c_out: u64) -> u64 {
    2 * c_in * c_out
}

pub fn attn_flops(n: u64, g: u64) -> u64 {
    4 * n * n * g
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub layer: String,
    pub kind: &'static str,
    /// Shape summary, e.g. `1x3 64->64 @50x50`.
    pub detail: String,
    /// Applications per forward pass.
    pub repeat: u64,
    /// Cost of one application.
    pub unit: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub total: u64,
}

fn row(layer: String, kind: &'static str, detail: String, repeat: u64, unit: u64) -> LayerFlops {
    LayerFlops { layer, kind, detail, repeat, unit, flops: repeat * unit }
}

/// Forward-pass cost of the position detector, layer by layer.
pub fn flops_estimate(cfg: &ModelConfig) -> FlopsReport {
    let chain = cfg.spatial_chain();
    let c = cfg.conv_channels as u64;
    let mut layers = Vec::new();
    let mut c_in = 1u64;
    for k in 0..cfg.conv_blocks {
        let (h, w) = chain[k];
        layers.push(row(
            format!("conv{k}"),
            "conv",
            format!("1x3 {c_in}->{c} @{h}x{w}"),
            1,
            conv_flops(1, 3, c_in, c, h as u64, w as u64),
        ));
        c_in = c;
    }
    let (n, tw) = cfg.tokens();
    let (n, tw) = (n as u64, tw as u64);
    let d = cfg.d_model as u64;
    let f = cfg.ffn_hidden as u64;
    layers.push(row("proj".into(), "conv", format!("1x1 {c_in}->1 @{n}x{tw}"), 1, conv_flops(1, 1, c_in, 1, n, tw)));
    layers.push(row("embed".into(), "fc", format!("{tw}->{d} per token"), n, fc_flops(tw, d)));
    for b in 0..cfg.attn_blocks {
        layers.push(row(format!("block{b}.attn"), "attn", format!("n={n} g={d}"), 1, attn_flops(n, d)));
        layers.push(row(format!("block{b}.wo"), "fc", format!("{d}->{d} per token"), n, fc_flops(d, d)));
        layers.push(row(format!("block{b}.ffn1"), "fc", format!("{d}->{f} per token"), n, fc_flops(d, f)));
        layers.push(row(format!("block{b}.ffn2"), "fc", format!("{f}->{d} per token"), n, fc_flops(f, d)));
    }
    layers.push(row("token_proj".into(), "fc", format!("{d}->{tw} per token"), n, fc_flops(d, tw)));
    let flat = n * tw;
    let hd = cfg.dense_hidden as u64;
    layers.push(row("dense1".into(), "fc", format!("{flat}->{hd}"), 1, fc_flops(flat, hd)));
    layers.push(row("dense2".into(), "fc", format!("{hd}->2"), 1, fc_flops(hd, 2)));
    let total = layers.iter().map(|l| l.flops).sum();
    FlopsReport { layers, total }
}
