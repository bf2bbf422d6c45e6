use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Activation, Tensor, Var};
use crate::baselines::{zr_rain_from_dbz, ZRParams};
use crate::error::{Error, Result};
use crate::geo::{Adjacency, RadarSequence, StationSeries, StationSet};
use crate::nn::{select_rows, Ctx, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AwsDims {
    pub dim: usize,
    /// Rows of the temporal embedding table.
    pub max_steps: usize,
    /// Rows of the per-node spatial embedding table.
    pub nodes: usize,
    pub layers: usize,
}

/// Node features over real plus virtual nodes: one `[N', D]` matrix per step.
#[derive(Clone, Debug)]
pub struct NodeFeatures {
    pub steps: Vec<Var>,
    pub coords: Vec<(f64, f64)>,
    pub is_virtual: Vec<bool>,
}

impl NodeFeatures {
    pub fn nodes(&self) -> usize {
        self.coords.len()
    }
}

/// Normalized node readings with missing entries already set to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInputs {
    /// `N' x T`, station-major.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub steps: usize,
    pub coords: Vec<(f64, f64)>,
    pub is_virtual: Vec<bool>,
}

impl NodeInputs {
    /// Zero-imputes unobserved readings and applies `normalize` to the rest.
    pub fn from_series(ss: &StationSeries, normalize: impl Fn(f64) -> f64) -> Self {
        let values = ss
            .rain
            .iter()
            .zip(&ss.mask)
            .map(|(&r, &m)| if m { normalize(r) } else { 0.0 })
            .collect();
        Self {
            values,
            mask: ss.mask.clone(),
            steps: ss.steps,
            coords: ss.stations.coords.clone(),
            is_virtual: ss.stations.is_virtual.clone(),
        }
    }

    pub fn nodes(&self) -> usize {
        self.coords.len()
    }
}

/// `count` pseudo-stations at uniformly random positions, each reading the
/// bilinear interpolation of the Z-R rain rates of its four surrounding
/// radar cells (clamped at the grid edge).
pub fn interpolate_virtual_nodes(radar: &RadarSequence, count: usize, seed: u64, zr: ZRParams) -> StationSeries {
    let g = radar.georef;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(f64, f64)> = (0..count)
        .map(|_| {
            (
                g.x_min + rng.gen::<f64>() * (g.x_max - g.x_min),
                g.y_min + rng.gen::<f64>() * (g.y_max - g.y_min),
            )
        })
        .collect();
    let steps = radar.steps();
    let mut rain = Vec::with_capacity(count * steps);
    for &(x, y) in &coords {
        let (fr, fc) = g.fractional_index(x, y);
        let fr = fr.clamp(0.0, (g.height - 1) as f64);
        let fc = fc.clamp(0.0, (g.width - 1) as f64);
        let (r0, c0) = (fr.floor() as usize, fc.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(g.height - 1), (c0 + 1).min(g.width - 1));
        let (wr, wc) = (fr - r0 as f64, fc - c0 as f64);
        for t in 0..steps {
            let z = |r, c| zr_rain_from_dbz(radar.at(t, r, c) as f64, zr);
            let v = (1.0 - wr) * ((1.0 - wc) * z(r0, c0) + wc * z(r0, c1)) + wr * ((1.0 - wc) * z(r1, c0) + wc * z(r1, c1));
            rain.push(v);
        }
    }
    let stations = StationSet {
        ids: (0..count).map(|i| format!("V{i:03}")).collect(),
        coords,
        is_virtual: vec![true; count],
    };
    StationSeries {
        stations,
        steps,
        rain,
        mask: vec![true; count * steps],
    }
}

pub fn init_aws_encoder(store: &mut ParamStore, prefix: &str, dims: AwsDims, rng: &mut impl Rng) {
    let d = dims.dim;
    store.init_weight(&format!("{prefix}.input.w"), 2 + 2 * d, d, rng);
    store.init_normal(&format!("{prefix}.emb.time"), vec![dims.max_steps, d], 0.02, rng);
    store.init_normal(&format!("{prefix}.emb.space"), vec![dims.nodes, d], 0.02, rng);
    for l in 0..dims.layers {
        let p = format!("{prefix}.layer{l}");
        store.init_weight(&format!("{p}.gat.w"), d, d, rng);
        store.init_weight(&format!("{p}.gat.a_src"), d, 1, rng);
        store.init_weight(&format!("{p}.gat.a_dst"), d, 1, rng);
        for gate in ["r", "z", "n"] {
            store.init_linear(&format!("{p}.gru.w{gate}"), d, d, rng);
            store.init_weight(&format!("{p}.gru.u{gate}"), d, d, rng);
        }
    }
}

/// `ReLU(W_in [g; mask; e_time; e_space])` for every node and step.
pub fn aws_input_embed(ctx: &mut Ctx, inputs: &NodeInputs, prefix: &str) -> Result<NodeFeatures> {
    let (n, steps) = (inputs.nodes(), inputs.steps);
    let time = ctx.p(&format!("{prefix}.emb.time"));
    let space = ctx.p(&format!("{prefix}.emb.space"));
    let d = ctx.g.shape(time)[1];
    if steps > ctx.g.shape(time)[0] {
        return Err(Error::Config(format!(
            "window of {steps} steps exceeds the temporal table of {} rows",
            ctx.g.shape(time)[0]
        )));
    }
    if n > ctx.g.shape(space)[0] {
        return Err(Error::Config(format!(
            "{n} nodes exceed the spatial table of {} rows",
            ctx.g.shape(space)[0]
        )));
    }
    // rows are time-major: row t * n + i
    let mut obs = Vec::with_capacity(2 * n * steps);
    for t in 0..steps {
        for i in 0..n {
            obs.push(inputs.values[i * steps + t]);
            obs.push(if inputs.mask[i * steps + t] { 1.0 } else { 0.0 });
        }
    }
    let obs = ctx.constant(Tensor::new(vec![n * steps, 2], obs));
    let t_idx: Rc<[usize]> = (0..steps).flat_map(|t| (0..n).flat_map(move |_| (0..d).map(move |j| t * d + j))).collect();
    let s_idx: Rc<[usize]> = (0..steps).flat_map(|_| (0..n).flat_map(move |i| (0..d).map(move |j| i * d + j))).collect();
    let te = ctx.g.gather(time, t_idx, vec![n * steps, d]);
    let se = ctx.g.gather(space, s_idx, vec![n * steps, d]);
    let x = ctx.g.concat(&[obs, te, se], 1);
    let h = ctx.linear_nb(x, &format!("{prefix}.input.w"));
    let h = ctx.g.relu(h);
    let per_step = (0..steps)
        .map(|t| {
            let rows: Vec<usize> = (t * n..(t + 1) * n).collect();
            select_rows(&mut ctx.g, h, &rows)
        })
        .collect();
    Ok(NodeFeatures {
        steps: per_step,
        coords: inputs.coords.clone(),
        is_virtual: inputs.is_virtual.clone(),
    })
}

/// Edge list of every node's neighbourhood including itself, grouped by
/// target node with neighbours in ascending order.
struct EdgeList {
    target: Vec<usize>,
    source: Vec<usize>,
    offsets: Rc<[usize]>,
}

fn edge_list(adj: &Adjacency) -> EdgeList {
    let mut target = Vec::new();
    let mut source = Vec::new();
    let mut offsets = vec![0];
    for (i, ns) in adj.neighbors.iter().enumerate() {
        let mut hood: Vec<usize> = ns.iter().copied().chain(std::iter::once(i)).collect();
        hood.sort_unstable();
        hood.dedup();
        for j in hood {
            target.push(i);
            source.push(j);
        }
        offsets.push(target.len());
    }
    EdgeList {
        target,
        source,
        offsets: offsets.into(),
    }
}

/// One graph-attention + GRU layer. Per step: `z = x W`,
/// `e_ij = LeakyReLU(a_src . z_i + a_dst . z_j)` over the self-inclusive
/// neighbourhood, softmax per node, `m_i = ELU(sum_j alpha_ij z_j)`, then a
/// GRU update of the node's state from the previous step (zero at `t = 0`).
pub fn gat_gru_layer(ctx: &mut Ctx, feats: &NodeFeatures, adj: &Adjacency, prefix: &str) -> Result<NodeFeatures> {
    let n = feats.nodes();
    if adj.len() != n {
        return Err(Error::Shape(format!("adjacency over {} nodes, features over {n}", adj.len())));
    }
    if adj.neighbors.iter().flatten().any(|&j| j >= n) {
        return Err(Error::Shape("adjacency lists a node index out of range".into()));
    }
    let edges = edge_list(adj);
    let e = edges.target.len();
    let w = ctx.p(&format!("{prefix}.gat.w"));
    let d = ctx.g.shape(w)[1];
    let a_src = ctx.p(&format!("{prefix}.gat.a_src"));
    let a_dst = ctx.p(&format!("{prefix}.gat.a_dst"));
    let tgt: Rc<[usize]> = edges.target.clone().into();
    let src: Rc<[usize]> = edges.source.clone().into();
    let src_rows: Rc<[usize]> = edges.source.iter().flat_map(|&j| (0..d).map(move |k| j * d + k)).collect();
    let expand: Rc<[usize]> = (0..e).flat_map(|k| std::iter::repeat(k).take(d)).collect();
    let scatter: Rc<[usize]> = edges.target.iter().flat_map(|&i| (0..d).map(move |k| i * d + k)).collect();

    let mut h = ctx.constant(Tensor::zeros(vec![n, d]));
    let mut out = Vec::with_capacity(feats.steps.len());
    for &x in &feats.steps {
        let z = ctx.g.matmul(x, w);
        let ss = ctx.g.matmul(z, a_src);
        let sd = ctx.g.matmul(z, a_dst);
        let si = ctx.g.gather(ss, tgt.clone(), vec![e]);
        let sj = ctx.g.gather(sd, src.clone(), vec![e]);
        let score = ctx.g.add(si, sj);
        let score = ctx.g.map(score, Activation::LeakyRelu);
        let alpha = ctx.g.segment_softmax(score, edges.offsets.clone());
        let alpha = ctx.g.gather(alpha, expand.clone(), vec![e, d]);
        let zj = ctx.g.gather(z, src_rows.clone(), vec![e, d]);
        let msg = ctx.g.mul(alpha, zj);
        let agg = ctx.g.scatter_add(msg, scatter.clone(), vec![n, d]);
        let m = ctx.g.elu(agg);
        h = gru_cell(ctx, m, h, prefix);
        out.push(h);
    }
    Ok(NodeFeatures {
        steps: out,
        coords: feats.coords.clone(),
        is_virtual: feats.is_virtual.clone(),
    })
}

fn gru_cell(ctx: &mut Ctx, x: Var, h: Var, prefix: &str) -> Var {
    let gate = |ctx: &mut Ctx, name: &str| {
        let a = ctx.linear(x, &format!("{prefix}.gru.w{name}"));
        let b = ctx.linear_nb(h, &format!("{prefix}.gru.u{name}"));
        (a, b)
    };
    let (xr, hr) = gate(ctx, "r");
    let (xz, hz) = gate(ctx, "z");
    let (xn, hn) = gate(ctx, "n");
    let r = ctx.g.add(xr, hr);
    let r = ctx.g.sigmoid(r);
    let u = ctx.g.add(xz, hz);
    let u = ctx.g.sigmoid(u);
    let rh = ctx.g.mul(r, hn);
    let cand = ctx.g.add(xn, rh);
    let cand = ctx.g.tanh(cand);
    let keep = ctx.g.affine(u, -1.0, 1.0);
    let a = ctx.g.mul(keep, cand);
    let b = ctx.g.mul(u, h);
    ctx.g.add(a, b)
}

/// Input embedding followed by `layers` GAT+GRU layers.
pub fn aws_encode(ctx: &mut Ctx, inputs: &NodeInputs, adj: &Adjacency, layers: usize, prefix: &str) -> Result<NodeFeatures> {
    if layers == 0 {
        return Err(Error::Config("the gauge encoder needs at least one layer".into()));
    }
    let mut f = aws_input_embed(ctx, inputs, prefix)?;
    for l in 0..layers {
        f = gat_gru_layer(ctx, &f, adj, &format!("{prefix}.layer{l}"))?;
    }
    Ok(f)
}
