use rand::Rng;

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::geo::RadarSequence;
use crate::nn::{slice_channels, Ctx, ParamStore};

/// Per-frame Laplacian responses, `T x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySequence {
    pub values: Vec<f64>,
    pub steps: usize,
    pub height: usize,
    pub width: usize,
}

/// Hidden states of the boundary recurrence, one `[1, C_b, H, W]` volume per
/// step.
#[derive(Clone, Debug)]
pub struct BoundaryFeatures {
    pub states: Vec<Var>,
    pub channels: usize,
}

/// Applies the 4-neighbour stencil `[[0,1,0],[1,-4,1],[0,1,0]]` to every
/// frame with replicated borders.
pub fn laplacian_boundaries(radar: &RadarSequence) -> Result<BoundarySequence> {
    let (h, w) = (radar.georef.height, radar.georef.width);
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("Laplacian needs a grid of at least 3x3, got {h}x{w}")));
    }
    let mut values = Vec::with_capacity(radar.values.len());
    for t in 0..radar.steps() {
        let f = radar.frame(t);
        let at = |r: usize, c: usize| f[r * w + c] as f64;
        for r in 0..h {
            for c in 0..w {
                let up = at(r.saturating_sub(1), c);
                let down = at((r + 1).min(h - 1), c);
                let left = at(r, c.saturating_sub(1));
                let right = at(r, (c + 1).min(w - 1));
                values.push(up + down + left + right - 4.0 * at(r, c));
            }
        }
    }
    Ok(BoundarySequence {
        values,
        steps: radar.steps(),
        height: h,
        width: w,
    })
}

/// Gate convolution `name.gates: [4 C_b, 1 + C_b, k, k]`; the forget-gate
/// bias starts at 1.
pub fn init_convlstm(store: &mut ParamStore, prefix: &str, channels: usize, kernel: usize, rng: &mut impl Rng) {
    store.init_conv(&format!("{prefix}.gates"), 1 + channels, 4 * channels, kernel, rng);
    let mut b = Tensor::zeros(vec![4 * channels]);
    for v in &mut b.data_mut()[channels..2 * channels] {
        *v = 1.0;
    }
    store.insert(format!("{prefix}.gates.b"), b);
}

/// ConvLSTM over the boundary frames (multiplied by `scale`) from a zero
/// state. The state at step `t` depends only on frames `0..=t`.
pub fn convlstm_forward(ctx: &mut Ctx, b: &BoundarySequence, scale: f64, prefix: &str) -> Result<BoundaryFeatures> {
    let w = ctx.p(&format!("{prefix}.gates.w"));
    let ws = ctx.g.shape(w).to_vec();
    let (cb, k) = (ws[0] / 4, ws[2]);
    if k > b.height || k > b.width {
        return Err(Error::Config(format!(
            "ConvLSTM kernel {k}x{k} larger than the {}x{} grid",
            b.height, b.width
        )));
    }
    let hw = b.height * b.width;
    let shape = vec![1, cb, b.height, b.width];
    let mut h = ctx.constant(Tensor::zeros(shape.clone()));
    let mut c = ctx.constant(Tensor::zeros(shape));
    let mut states = Vec::with_capacity(b.steps);
    for t in 0..b.steps {
        let frame = b.values[t * hw..(t + 1) * hw].iter().map(|v| v * scale).collect();
        let x = ctx.constant(Tensor::new(vec![1, 1, b.height, b.width], frame));
        let xh = ctx.g.concat(&[x, h], 1);
        let z = ctx.conv(xh, &format!("{prefix}.gates"));
        let zi = slice_channels(&mut ctx.g, z, 0, cb);
        let zf = slice_channels(&mut ctx.g, z, cb, cb);
        let zo = slice_channels(&mut ctx.g, z, 2 * cb, cb);
        let zg = slice_channels(&mut ctx.g, z, 3 * cb, cb);
        let i = ctx.g.sigmoid(zi);
        let f = ctx.g.sigmoid(zf);
        let o = ctx.g.sigmoid(zo);
        let gg = ctx.g.tanh(zg);
        let fc = ctx.g.mul(f, c);
        let ig = ctx.g.mul(i, gg);
        c = ctx.g.add(fc, ig);
        let tc = ctx.g.tanh(c);
        h = ctx.g.mul(o, tc);
        states.push(h);
    }
    Ok(BoundaryFeatures { states, channels: cb })
}
