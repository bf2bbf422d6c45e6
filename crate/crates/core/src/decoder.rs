//! Query decoder: location encoding, boundary fusion, causal attention over
//! the aligned memory, and the point-wise rain predictor.

use std::rc::Rc;

use rand::Rng;

use crate::aligner::AlignedMemory;
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::geo::{GridGeoref, RainField, RadarSequence, StationSeries};
use crate::harness::RainSeer;
use crate::nn::{cells_as_rows, repeat_cols, row_sums, select_rows, Ctx, ParamStore};

/// A location and target time to reconstruct.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryPoint {
    pub x: f64,
    pub y: f64,
    pub t_q: f64,
}

/// Attended context per query plus the attention weights over the admissible
/// tokens (those with timestamp <= t_q, listed in `admissible`).
#[derive(Clone, Debug)]
pub struct CausalPrior {
    pub context: Var,
    pub weights: Var,
    pub admissible: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderDims {
    /// Width of memory tokens and query embeddings.
    pub dim: usize,
    pub max_steps: usize,
    pub boundary_channels: usize,
}

pub fn init_decoder(store: &mut ParamStore, prefix: &str, dims: DecoderDims, rng: &mut impl Rng) {
    let d = dims.dim;
    store.init_linear(&format!("{prefix}.loc1"), 2, d, rng);
    store.init_linear(&format!("{prefix}.loc2"), d, d, rng);
    store.init_normal(&format!("{prefix}.emb.time"), vec![dims.max_steps, d], 0.02, rng);
    store.init_weight(&format!("{prefix}.fuse.k"), dims.boundary_channels, d, rng);
    store.init_linear(&format!("{prefix}.fuse.v"), dims.boundary_channels, d, rng);
    store.init_linear(&format!("{prefix}.qq1"), d, d, rng);
    store.init_linear(&format!("{prefix}.qq2"), d, d, rng);
    // small so the unscaled bilinear scores start near uniform attention
    store.init_uniform(&format!("{prefix}.csta.wa"), vec![d, d], 0.1 / (d as f64).sqrt(), rng);
    // softplus(0) ~ 0.69 per unit squared normalized distance, softplus(-2) ~
    // 0.13 per squared step of lag
    store.insert(format!("{prefix}.csta.dist"), Tensor::new(vec![1], vec![0.0]));
    store.insert(format!("{prefix}.csta.lag"), Tensor::new(vec![1], vec![-2.0]));
    store.init_linear(&format!("{prefix}.csta.v"), d, d, rng);
    store.init_linear(&format!("{prefix}.psi1"), 2 * d, d, rng);
    store.init_linear(&format!("{prefix}.psi2"), d, 1, rng);
}

/// `q_loc = MLP(x, y) + time[step]` on coordinates normalized to `[0, 1]^2`;
/// `step` is the query's row in the temporal table.
pub fn encode_query(ctx: &mut Ctx, queries: &[QueryPoint], georef: &GridGeoref, step: usize, prefix: &str) -> Result<Var> {
    let mut xy = Vec::with_capacity(2 * queries.len());
    for q in queries {
        if !georef.contains(q.x, q.y) {
            return Err(Error::Domain(format!("query ({}, {}) lies outside the grid", q.x, q.y)));
        }
        let (a, b) = georef.normalized(q.x, q.y);
        xy.extend([a, b]);
    }
    let time = ctx.p(&format!("{prefix}.emb.time"));
    let (rows, d) = (ctx.g.shape(time)[0], ctx.g.shape(time)[1]);
    if step >= rows {
        return Err(Error::Config(format!("query step {step} exceeds the temporal table of {rows} rows")));
    }
    let x = ctx.constant(Tensor::new(vec![queries.len(), 2], xy));
    let h = ctx.linear(x, &format!("{prefix}.loc1"));
    let h = ctx.g.elu(h);
    let h = ctx.linear(h, &format!("{prefix}.loc2"));
    let idx: Rc<[usize]> = (0..queries.len()).flat_map(|_| (0..d).map(move |k| step * d + k)).collect();
    let te = ctx.g.gather(time, idx, vec![queries.len(), d]);
    Ok(ctx.g.add(h, te))
}

/// Cells within Chebyshev distance `radius` of the query's cell, clipped to
/// the grid, in row-major order.
pub fn boundary_neighborhood(georef: &GridGeoref, q: &QueryPoint, radius: usize) -> Result<Vec<usize>> {
    let (r, c) = georef.cell_of(q.x, q.y)?;
    let rows = r.saturating_sub(radius)..=(r + radius).min(georef.height - 1);
    Ok(rows
        .flat_map(|rr| (c.saturating_sub(radius)..=(c + radius).min(georef.width - 1)).map(move |cc| rr * georef.width + cc))
        .collect())
}

/// `q_q = MLP(q_loc + Fuse(q_loc, H_b))`, where Fuse is single-query
/// attention over the boundary state vectors of the neighbourhood cells
/// (keys `W_k h`, values `W_v h + b`, scaled dot-product scores).
/// `hb` is the `[1, C_b, H, W]` boundary state at the last available step.
pub fn fuse_boundary(
    ctx: &mut Ctx,
    q_loc: Var,
    hb: Var,
    queries: &[QueryPoint],
    georef: &GridGeoref,
    radius: usize,
    prefix: &str,
) -> Result<Var> {
    if radius == 0 {
        return Err(Error::Config("boundary fusion radius must be at least one cell".into()));
    }
    let d = ctx.g.shape(q_loc)[1];
    let mut target = Vec::new();
    let mut cells = Vec::new();
    let mut offsets = vec![0];
    for (i, q) in queries.iter().enumerate() {
        for cell in boundary_neighborhood(georef, q, radius)? {
            target.push(i);
            cells.push(cell);
        }
        offsets.push(target.len());
    }
    let rows = cells_as_rows(&mut ctx.g, hb);
    let keys = ctx.linear_nb(rows, &format!("{prefix}.fuse.k"));
    let vals = ctx.linear(rows, &format!("{prefix}.fuse.v"));
    let qe = select_rows(&mut ctx.g, q_loc, &target);
    let ke = select_rows(&mut ctx.g, keys, &cells);
    let ve = select_rows(&mut ctx.g, vals, &cells);
    let prod = ctx.g.mul(qe, ke);
    let score = row_sums(&mut ctx.g, prod);
    let score = ctx.g.scale(score, 1.0 / (d as f64).sqrt());
    let alpha = ctx.g.segment_softmax(score, offsets.into());
    let alpha = repeat_cols(&mut ctx.g, alpha, d);
    let msg = ctx.g.mul(alpha, ve);
    let scatter: Rc<[usize]> = target.iter().flat_map(|&i| (0..d).map(move |k| i * d + k)).collect();
    let fused = ctx.g.scatter_add(msg, scatter, vec![queries.len(), d]);
    let x = ctx.g.add(q_loc, fused);
    let h = ctx.linear(x, &format!("{prefix}.qq1"));
    let h = ctx.g.elu(h);
    Ok(ctx.linear(h, &format!("{prefix}.qq2")))
}

/// Query locations for the proximity term of [`causal_attend`].
#[derive(Clone, Copy, Debug)]
pub struct Proximity<'a> {
    pub queries: &'a [QueryPoint],
    pub georef: &'a GridGeoref,
}

/// `alpha_i ∝ exp(q_q^T W_a m_i - softplus(s_d) d_i^2 - softplus(s_t) (t_q - t_i)^2)`
/// over memory tokens with `t_i <= t_q`, and `c = sum alpha_i (W_v m_i + b)`.
/// `d_i` is the distance between query and token in normalized grid
/// coordinates; without `proximity` only the content term is used.
/// Inadmissible tokens are never read. With `uniform`, every admissible token
/// gets equal weight.
pub fn causal_attend(
    ctx: &mut Ctx,
    qq: Var,
    mem: &AlignedMemory,
    t_q: f64,
    proximity: Option<Proximity>,
    uniform: bool,
    prefix: &str,
) -> Result<CausalPrior> {
    let admissible: Vec<usize> = (0..mem.len()).filter(|&i| mem.timestamps[i] <= t_q).collect();
    if admissible.is_empty() {
        return Err(Error::Domain(format!("no memory token at or before t_q = {t_q}")));
    }
    let m = select_rows(&mut ctx.g, mem.tokens, &admissible);
    let values = ctx.linear(m, &format!("{prefix}.csta.v"));
    let nq = ctx.g.shape(qq)[0];
    let a = admissible.len();
    let weights = if uniform {
        ctx.constant(Tensor::new(vec![nq, a], vec![1.0 / a as f64; nq * a]))
    } else {
        let qa = ctx.linear_nb(qq, &format!("{prefix}.csta.wa"));
        let mut scores = ctx.g.matmul_nt(qa, m);
        if let Some(p) = proximity {
            if p.queries.len() != nq {
                return Err(Error::Shape(format!("{} query points for {nq} query rows", p.queries.len())));
            }
            let mut d2 = Vec::with_capacity(nq * a);
            for q in p.queries {
                let (qx, qy) = p.georef.normalized(q.x, q.y);
                for &i in &admissible {
                    let (kx, ky) = p.georef.normalized(mem.positions[i].0, mem.positions[i].1);
                    d2.push((qx - kx).powi(2) + (qy - ky).powi(2));
                }
            }
            let lag2: Vec<f64> = (0..nq).flat_map(|_| admissible.iter().map(|&i| (t_q - mem.timestamps[i]).powi(2))).collect();
            for (name, table) in [("dist", d2), ("lag", lag2)] {
                let raw = ctx.p(&format!("{prefix}.csta.{name}"));
                let rate = ctx.g.softplus(raw);
                let rate = ctx.g.gather(rate, std::iter::repeat(0).take(nq * a).collect(), vec![nq, a]);
                let table = ctx.constant(Tensor::new(vec![nq, a], table));
                let pen = ctx.g.mul(table, rate);
                scores = ctx.g.sub(scores, pen);
            }
        }
        ctx.g.softmax_rows(scores)
    };
    let context = ctx.g.matmul(weights, values);
    Ok(CausalPrior {
        context,
        weights,
        admissible,
    })
}

/// `softplus(MLP([c_prior; q_q]))`, one normalized rain value per query.
pub fn predict_rain(ctx: &mut Ctx, cp: &CausalPrior, qq: Var, prefix: &str) -> Var {
    let x = ctx.g.concat(&[cp.context, qq], 1);
    let h = ctx.linear(x, &format!("{prefix}.psi1"));
    let h = ctx.g.elu(h);
    let y = ctx.linear(h, &format!("{prefix}.psi2"));
    ctx.g.softplus(y)
}

/// Runs the encoders and aligner once over the steps up to `t_q` and queries
/// every cell center; the field is in mm/h.
pub fn reconstruct_field(model: &RainSeer, radar: &RadarSequence, gauges: &StationSeries, t_q: usize) -> Result<RainField> {
    model.reconstruct(radar, gauges, t_q)
}
