use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::geo::RadarSequence;
use crate::nn::{Ctx, ParamStore};

/// A `[T, C, H', W']` latent volume on the graph.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVolume {
    pub values: Var,
    /// Downsampling factor relative to the input grid.
    pub scale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadarDims {
    pub channels: usize,
    /// Odd length of the temporal kernel.
    pub temporal_kernel: usize,
    /// Rows of the temporal embedding table.
    pub max_steps: usize,
}

/// Registers radar-encoder parameters under `prefix` for an `height x width`
/// grid.
pub fn init_radar_encoder(store: &mut ParamStore, prefix: &str, dims: RadarDims, height: usize, width: usize, rng: &mut impl Rng) {
    let c = dims.channels;
    store.init_conv(&format!("{prefix}.stsc.spatial"), 1, c, 3, rng);
    let bound = (6.0 / (2 * c * dims.temporal_kernel) as f64).sqrt();
    store.init_uniform(&format!("{prefix}.stsc.temporal.w"), vec![c, c, dims.temporal_kernel], bound, rng);
    store.insert(format!("{prefix}.stsc.temporal.b"), Tensor::zeros(vec![c]));
    for s in [1, 2, 4] {
        for k in [1, 3, 5] {
            store.init_conv(&format!("{prefix}.inception{s}.k{k}"), c, c, k, rng);
        }
        store.init_conv(&format!("{prefix}.inception{s}.proj"), 3 * c, c, 1, rng);
    }
    store.init_conv(&format!("{prefix}.phi"), c, c, 1, rng);
    store.init_normal(&format!("{prefix}.emb.time"), vec![dims.max_steps, c], 0.02, rng);
    store.init_normal(&format!("{prefix}.emb.space"), vec![height * width, c], 0.02, rng);
}

/// Reflectivity frames as a `[T, 1, H, W]` constant, multiplied by `scale`.
pub fn radar_input(ctx: &mut Ctx, radar: &RadarSequence, scale: f64) -> Var {
    let g = radar.georef;
    let data = radar.values.iter().map(|&v| v as f64 * scale).collect();
    ctx.constant(Tensor::new(vec![radar.steps(), 1, g.height, g.width], data))
}

/// Spatial-temporal separable convolution: a 3x3 spatial kernel per frame
/// (1 -> C channels), then a temporal kernel per cell (C -> C), both
/// same-padded.
pub fn stsc_forward(ctx: &mut Ctx, x: Var, prefix: &str) -> Result<FeatureVolume> {
    let steps = ctx.g.shape(x)[0];
    let wt = ctx.p(&format!("{prefix}.stsc.temporal.w"));
    let kt = ctx.g.shape(wt)[2];
    if kt > 2 * steps - 1 {
        return Err(Error::Config(format!(
            "temporal kernel of length {kt} exceeds 2T - 1 = {} for T = {steps}",
            2 * steps - 1
        )));
    }
    let s = ctx.conv(x, &format!("{prefix}.stsc.spatial"));
    let bt = ctx.p(&format!("{prefix}.stsc.temporal.b"));
    let values = ctx.g.temporal_conv(s, wt, Some(bt));
    Ok(FeatureVolume { values, scale: 1 })
}

/// Parallel 1x1 / 3x3 / 5x5 convolutions with ELU, concatenated, projected
/// back to C channels and added to the input.
fn inception_block(ctx: &mut Ctx, x: Var, prefix: &str) -> Var {
    let branches: Vec<Var> = [1, 3, 5]
        .iter()
        .map(|k| {
            let y = ctx.conv(x, &format!("{prefix}.k{k}"));
            ctx.g.elu(y)
        })
        .collect();
    let cat = ctx.g.concat(&branches, 1);
    let proj = ctx.conv(cat, &format!("{prefix}.proj"));
    ctx.g.add(x, proj)
}

/// `phi(Inc(E) + Up2(Inc(Down2 E)) + Up4(Inc(Down4 E)))` with average-pool
/// downsampling, nearest upsampling, a separate inception block per scale,
/// and `phi` = 1x1 convolution + ELU.
pub fn multiscale_inception(ctx: &mut Ctx, feat: FeatureVolume, prefix: &str) -> Result<FeatureVolume> {
    let s = ctx.g.shape(feat.values).to_vec();
    if s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(Error::Shape(format!(
            "multi-scale inception needs H and W divisible by 4, got {}x{}",
            s[2], s[3]
        )));
    }
    let e = feat.values;
    let full = inception_block(ctx, e, &format!("{prefix}.inception1"));
    let d2 = ctx.g.avg_pool(e, 2);
    let half = inception_block(ctx, d2, &format!("{prefix}.inception2"));
    let half = ctx.g.upsample(half, 2);
    let d4 = ctx.g.avg_pool(e, 4);
    let quarter = inception_block(ctx, d4, &format!("{prefix}.inception4"));
    let quarter = ctx.g.upsample(quarter, 4);
    let sum = ctx.g.add(full, half);
    let sum = ctx.g.add(sum, quarter);
    let y = ctx.conv(sum, &format!("{prefix}.phi"));
    Ok(FeatureVolume {
        values: ctx.g.elu(y),
        scale: feat.scale,
    })
}

/// `out[t, :, h, w] = feat[t, :, h, w] + time[t] + space[h * W + w]`.
pub fn add_spacetime_embeddings(ctx: &mut Ctx, feat: FeatureVolume, prefix: &str) -> Result<FeatureVolume> {
    let s = ctx.g.shape(feat.values).to_vec();
    let (steps, c, hw) = (s[0], s[1], s[2] * s[3]);
    let time = ctx.p(&format!("{prefix}.emb.time"));
    let space = ctx.p(&format!("{prefix}.emb.space"));
    let (t_rows, tc) = (ctx.g.shape(time)[0], ctx.g.shape(time)[1]);
    let (s_rows, sc) = (ctx.g.shape(space)[0], ctx.g.shape(space)[1]);
    if tc != c || sc != c {
        return Err(Error::Shape(format!("embedding width {tc}/{sc} differs from {c} channels")));
    }
    if steps > t_rows {
        return Err(Error::Config(format!("window of {steps} steps exceeds the temporal table of {t_rows} rows")));
    }
    if s_rows != hw {
        return Err(Error::Config(format!("spatial table has {s_rows} rows for {hw} cells")));
    }
    let t_idx: Rc<[usize]> = (0..steps)
        .flat_map(|t| (0..c).flat_map(move |ch| std::iter::repeat(t * c + ch).take(hw)))
        .collect();
    let s_idx: Rc<[usize]> = (0..steps)
        .flat_map(|_| (0..c).flat_map(move |ch| (0..hw).map(move |p| p * c + ch)))
        .collect();
    let te = ctx.g.gather(time, t_idx, s.clone());
    let se = ctx.g.gather(space, s_idx, s);
    let y = ctx.g.add(feat.values, te);
    Ok(FeatureVolume {
        values: ctx.g.add(y, se),
        scale: feat.scale,
    })
}

/// STSC, multi-scale inception and space-time embeddings in sequence.
pub fn radar_encode(ctx: &mut Ctx, x: Var, prefix: &str) -> Result<FeatureVolume> {
    let e = stsc_forward(ctx, x, prefix)?;
    let e = multiscale_inception(ctx, e, prefix)?;
    add_spacetime_embeddings(ctx, e, prefix)
}
