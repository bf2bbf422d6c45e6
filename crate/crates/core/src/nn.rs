//! Named parameter storage and the small layer helpers shared by the model
//! blocks.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Tensor, Var};

/// Trainable tensors keyed by module path (e.g. `radar.stsc.spatial.w`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Glorot-uniform weight `name.w: [fan_in, fan_out]` and zero bias `name.b`.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        self.init_weight(&format!("{name}.w"), fan_in, fan_out, rng);
        self.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
    }

    /// Glorot-uniform `[fan_in, fan_out]` weight without a bias.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.init_uniform(name, vec![fan_in, fan_out], bound, rng);
    }

    /// Convolution kernel `[cout, cin, k, k]` with zero bias `[cout]`.
    pub fn init_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
        let bound = (6.0 / ((cin + cout) * k * k) as f64).sqrt();
        self.init_uniform(&format!("{name}.w"), vec![cout, cin, k, k], bound, rng);
        self.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
    }

    pub fn init_uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64, rng: &mut impl Rng) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data));
    }

    pub fn init_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut impl Rng) {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite standard deviation");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape, data));
    }
}

/// A graph under construction with parameters bound from a [`ParamStore`]
/// on first use.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    /// Parameters are recorded as trainable leaves.
    pub fn train(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: BTreeMap::new(),
            trainable: true,
        }
    }

    /// Parameters are recorded as constants; no gradient bookkeeping.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::train(store)
        }
    }

    /// The variable bound to parameter `name`.
    ///
    /// # Panics
    /// When the store has no such parameter; model code and initialization
    /// must agree on names.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"))
            .clone();
        let v = if self.trainable { self.g.param(t) } else { self.g.constant(t) };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Names of the parameters touched so far, with their variables.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of `loss` for every bound parameter.
    pub fn grads(&self, loss: Var) -> BTreeMap<String, Tensor> {
        let gr = self.g.backward(loss);
        self.bound.iter().map(|(k, &v)| (k.clone(), gr.get(v))).collect()
    }

    /// `x W + b` with `W = name.w`, `b = name.b`.
    pub fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.g.matmul(x, w);
        self.g.add_bias(y, b)
    }

    /// `x W` with `W = name` (no bias).
    pub fn linear_nb(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(name);
        self.g.matmul(x, w)
    }

    /// Same-padded convolution with `name.w` / `name.b`.
    pub fn conv(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.g.conv2d(x, w, Some(b))
    }
}

/// Columns `start..start + len` of an `[m, n]` matrix.
pub fn slice_cols(g: &mut Graph, x: Var, start: usize, len: usize) -> Var {
    let (m, n) = (g.shape(x)[0], g.shape(x)[1]);
    let idx: Rc<[usize]> = (0..m).flat_map(|i| (start..start + len).map(move |j| i * n + j)).collect();
    g.gather(x, idx, vec![m, len])
}

/// Rows `rows` of an `[m, n]` matrix, in the given order.
pub fn select_rows(g: &mut Graph, x: Var, rows: &[usize]) -> Var {
    let n = g.shape(x)[1];
    let idx: Rc<[usize]> = rows.iter().flat_map(|&r| (0..n).map(move |j| r * n + j)).collect();
    g.gather(x, idx, vec![rows.len(), n])
}

/// Channels `start..start + len` of an `[n, c, h, w]` volume.
pub fn slice_channels(g: &mut Graph, x: Var, start: usize, len: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let idx: Rc<[usize]> = (0..n)
        .flat_map(|i| (start..start + len).flat_map(move |ch| (0..hw).map(move |p| (i * c + ch) * hw + p)))
        .collect();
    g.gather(x, idx, vec![n, len, s[2], s[3]])
}

/// Repeats a vector of length `n` (any shape) as `m` rows: `[m, n]`.
pub fn repeat_rows(g: &mut Graph, v: Var, m: usize) -> Var {
    let n = g.value(v).len();
    let idx: Rc<[usize]> = (0..m).flat_map(|_| 0..n).collect();
    g.gather(v, idx, vec![m, n])
}

/// Repeats every element of a length-`m` vector `n` times: `[m, n]`.
pub fn repeat_cols(g: &mut Graph, v: Var, n: usize) -> Var {
    let m = g.value(v).len();
    let idx: Rc<[usize]> = (0..m).flat_map(|i| std::iter::repeat(i).take(n)).collect();
    g.gather(v, idx, vec![m, n])
}

/// Row sums of an `[m, n]` matrix as `[m, 1]`.
pub fn row_sums(g: &mut Graph, x: Var) -> Var {
    let n = g.shape(x)[1];
    let ones = g.constant(Tensor::new(vec![n, 1], vec![1.0; n]));
    g.matmul(x, ones)
}

/// `[t, c, h, w]` volume as a `[t * h * w, c]` matrix of per-cell feature rows
/// (time-major, then row-major cells).
pub fn cells_as_rows(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (t, c, hw) = (s[0], s[1], s[2] * s[3]);
    let idx: Rc<[usize]> = (0..t)
        .flat_map(|ti| (0..hw).flat_map(move |p| (0..c).map(move |ch| (ti * c + ch) * hw + p)))
        .collect();
    g.gather(x, idx, vec![t * hw, c])
}

/// Sinusoidal encoding of a point in `[0, 1]^2`, `dim` values (multiple of 4).
pub fn sinusoidal_position(x: f64, y: f64, dim: usize) -> Vec<f64> {
    let bands = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for b in 0..bands {
        let freq = std::f64::consts::PI * (1u64 << b) as f64;
        out.extend([(freq * x).sin(), (freq * x).cos(), (freq * y).sin(), (freq * y).cos()]);
    }
    out
}
