//! Cross-modal alignment: radar patches and gauge-node states become tokens,
//! exchange information through bidirectional cross-attention, and are
//! concatenated into the memory the decoder reads from.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Tensor, Var};
use crate::encoders::{FeatureVolume, NodeFeatures};
use crate::error::{Error, Result};
use crate::geo::GridGeoref;
use crate::nn::{slice_cols, Ctx, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Radar,
    Aws,
}

/// `L x D` tokens with per-token timestamp and position.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub tokens: Var,
    pub timestamps: Vec<f64>,
    pub positions: Vec<(f64, f64)>,
    pub modality: Modality,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// Decoder context: the radar block followed by the gauge block, each token
/// `2D` wide.
#[derive(Clone, Debug)]
pub struct AlignedMemory {
    pub tokens: Var,
    pub timestamps: Vec<f64>,
    pub positions: Vec<(f64, f64)>,
    pub modality: Vec<Modality>,
}

impl AlignedMemory {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignerConfig {
    pub patch: usize,
    pub heads: usize,
    /// Additive `-softplus(s_h) d^2` attention bias on normalized positions.
    pub distance_bias: bool,
}

/// Registers projections for radar features of `channels` channels and gauge
/// features of width `dim`, plus both attention directions.
pub fn init_aligner(store: &mut ParamStore, prefix: &str, channels: usize, dim: usize, cfg: AlignerConfig, rng: &mut impl Rng) {
    store.init_linear(&format!("{prefix}.proj_r"), cfg.patch * cfg.patch * channels, dim, rng);
    store.init_linear(&format!("{prefix}.proj_s"), dim, dim, rng);
    for dir in ["rs", "sr"] {
        for m in ["q", "k", "v", "o"] {
            store.init_linear(&format!("{prefix}.{dir}.{m}"), dim, dim, rng);
        }
        store.insert(format!("{prefix}.{dir}.dist"), Tensor::zeros(vec![cfg.heads]));
    }
}

/// Splits every frame into non-overlapping `p x p` patches and projects each
/// flattened `(channel, row, col)` patch to a token. Tokens are time-major,
/// then row-major over patches; positions are patch centers.
pub fn patchify_project(ctx: &mut Ctx, feat: FeatureVolume, p: usize, georef: &GridGeoref, timestamps: &[f64], prefix: &str) -> Result<TokenSet> {
    let s = ctx.g.shape(feat.values).to_vec();
    let (steps, c, h, w) = (s[0], s[1], s[2], s[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}x{w} frames are not divisible into {p}x{p} patches")));
    }
    if timestamps.len() != steps {
        return Err(Error::Shape(format!("{} timestamps for {steps} frames", timestamps.len())));
    }
    let (ph, pw) = (h / p, w / p);
    let width = p * p * c;
    let mut idx = Vec::with_capacity(steps * ph * pw * width);
    let mut ts = Vec::new();
    let mut pos = Vec::new();
    let (dx, dy) = (georef.cell_dx() * feat.scale as f64, georef.cell_dy() * feat.scale as f64);
    for t in 0..steps {
        for pr in 0..ph {
            for pc in 0..pw {
                for ch in 0..c {
                    for r in 0..p {
                        for col in 0..p {
                            idx.push(((t * c + ch) * h + pr * p + r) * w + pc * p + col);
                        }
                    }
                }
                ts.push(timestamps[t]);
                pos.push((
                    georef.x_min + (pc * p) as f64 * dx + 0.5 * p as f64 * dx,
                    georef.y_min + (pr * p) as f64 * dy + 0.5 * p as f64 * dy,
                ));
            }
        }
    }
    let n = ts.len();
    let patches = ctx.g.gather(feat.values, idx.into(), vec![n, width]);
    let tokens = ctx.linear(patches, &format!("{prefix}.proj_r"));
    Ok(TokenSet {
        tokens,
        timestamps: ts,
        positions: pos,
        modality: Modality::Radar,
    })
}

/// One token per (node, step), station-major then time-minor, each a linear
/// projection of the node state.
pub fn flatten_project(ctx: &mut Ctx, nodes: &NodeFeatures, timestamps: &[f64], prefix: &str) -> Result<TokenSet> {
    let steps = nodes.steps.len();
    if timestamps.len() != steps {
        return Err(Error::Shape(format!("{} timestamps for {steps} node steps", timestamps.len())));
    }
    let n = nodes.nodes();
    let d = ctx.g.shape(nodes.steps[0])[1];
    let stacked = ctx.g.concat(&nodes.steps, 0);
    let idx: Rc<[usize]> = (0..n)
        .flat_map(|i| (0..steps).flat_map(move |t| (0..d).map(move |k| (t * n + i) * d + k)))
        .collect();
    let rows = ctx.g.gather(stacked, idx, vec![n * steps, d]);
    let tokens = ctx.linear(rows, &format!("{prefix}.proj_s"));
    let mut ts = Vec::with_capacity(n * steps);
    let mut pos = Vec::with_capacity(n * steps);
    for i in 0..n {
        for &t in timestamps {
            ts.push(t);
            pos.push(nodes.coords[i]);
        }
    }
    Ok(TokenSet {
        tokens,
        timestamps: ts,
        positions: pos,
        modality: Modality::Aws,
    })
}

/// Multi-head attention of `queries` over `keys` (keys double as values).
/// Returns the projected output `[L_q, D]` and per-head weights `[L_q, L_k]`.
pub fn cross_attention(
    ctx: &mut Ctx,
    queries: &TokenSet,
    keys: &TokenSet,
    georef: &GridGeoref,
    cfg: AlignerConfig,
    prefix: &str,
) -> Result<(Var, Vec<Var>)> {
    if keys.is_empty() || queries.is_empty() {
        return Err(Error::Domain("cross-attention needs tokens from both modalities".into()));
    }
    let d = ctx.g.shape(queries.tokens)[1];
    if cfg.heads == 0 || d % cfg.heads != 0 {
        return Err(Error::Config(format!("{} heads do not divide width {d}", cfg.heads)));
    }
    let dh = d / cfg.heads;
    let (lq, lk) = (queries.len(), keys.len());
    let q = ctx.linear(queries.tokens, &format!("{prefix}.q"));
    let k = ctx.linear(keys.tokens, &format!("{prefix}.k"));
    let v = ctx.linear(keys.tokens, &format!("{prefix}.v"));
    let d2 = if cfg.distance_bias {
        let mut m = Vec::with_capacity(lq * lk);
        for &(qx, qy) in &queries.positions {
            let (a, b) = georef.normalized(qx, qy);
            for &(kx, ky) in &keys.positions {
                let (c, e) = georef.normalized(kx, ky);
                m.push((a - c).powi(2) + (b - e).powi(2));
            }
        }
        Some(ctx.constant(Tensor::new(vec![lq, lk], m)))
    } else {
        None
    };
    let dist = ctx.p(&format!("{prefix}.dist"));
    let rate = ctx.g.softplus(dist);
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let qh = slice_cols(&mut ctx.g, q, hd * dh, dh);
        let kh = slice_cols(&mut ctx.g, k, hd * dh, dh);
        let vh = slice_cols(&mut ctx.g, v, hd * dh, dh);
        let s = ctx.g.matmul_nt(qh, kh);
        let mut s = ctx.g.scale(s, 1.0 / (dh as f64).sqrt());
        if let Some(d2) = d2 {
            let idx: Rc<[usize]> = std::iter::repeat(hd).take(lq * lk).collect();
            let r = ctx.g.gather(rate, idx, vec![lq, lk]);
            let pen = ctx.g.mul(d2, r);
            s = ctx.g.sub(s, pen);
        }
        let a = ctx.g.softmax_rows(s);
        heads.push(ctx.g.matmul(a, vh));
        weights.push(a);
    }
    let cat = if heads.len() == 1 { heads[0] } else { ctx.g.concat(&heads, 1) };
    let out = ctx.linear(cat, &format!("{prefix}.o"));
    Ok((out, weights))
}

/// `E_RS` (radar queries over gauge tokens) and `E_SR` (gauge queries over
/// radar tokens).
pub fn bidirectional_cross_attention(
    ctx: &mut Ctx,
    radar: &TokenSet,
    aws: &TokenSet,
    georef: &GridGeoref,
    cfg: AlignerConfig,
    prefix: &str,
) -> Result<(Var, Var)> {
    let (e_rs, _) = cross_attention(ctx, radar, aws, georef, cfg, &format!("{prefix}.rs"))?;
    let (e_sr, _) = cross_attention(ctx, aws, radar, georef, cfg, &format!("{prefix}.sr"))?;
    Ok((e_rs, e_sr))
}

/// `[E_RS || H_radar ; E_SR || H_aws]`: feature-axis concatenation per block,
/// radar block first.
pub fn fuse_and_concat(ctx: &mut Ctx, radar: &TokenSet, aws: &TokenSet, e_rs: Var, e_sr: Var) -> AlignedMemory {
    let r = ctx.g.concat(&[e_rs, radar.tokens], 1);
    let s = ctx.g.concat(&[e_sr, aws.tokens], 1);
    let tokens = ctx.g.concat(&[r, s], 0);
    memory(tokens, &[radar, aws])
}

/// `[0 || H]` for a single modality, used when the other is ablated.
pub fn single_modality_memory(ctx: &mut Ctx, tokens: &TokenSet) -> AlignedMemory {
    let d = ctx.g.shape(tokens.tokens)[1];
    let zeros = ctx.constant(Tensor::zeros(vec![tokens.len(), d]));
    let t = ctx.g.concat(&[zeros, tokens.tokens], 1);
    memory(t, &[tokens])
}

fn memory(tokens: Var, parts: &[&TokenSet]) -> AlignedMemory {
    AlignedMemory {
        tokens,
        timestamps: parts.iter().flat_map(|p| p.timestamps.iter().copied()).collect(),
        positions: parts.iter().flat_map(|p| p.positions.iter().copied()).collect(),
        modality: parts.iter().flat_map(|p| std::iter::repeat(p.modality).take(p.len())).collect(),
    }
}
