//! Training loop: pseudo-masked windows, AdamW with a one-cycle schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tensor, Var};
use crate::datagen::Dataset;
use crate::decoder::QueryPoint;
use crate::error::{Error, Result};
use crate::geo::StationSeries;
use crate::nn::{sinusoidal_position, Ctx, ParamStore};
use crate::objective::{geo_loss_var, mse_loss_var, sample_pairs};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::model::{RainSeer, Window};

/// Width of the sinusoidal query-position code used by the geographic loss.
const POSITION_CODE: usize = 16;

/// Learning rate at `step` of `total`: linear warm-up from `peak / 25` over
/// the first 30% of steps, then cosine decay to `peak / 2.5e5`.
pub fn one_cycle_lr(step: usize, total: usize, peak: f64) -> f64 {
    let start = peak / 25.0;
    let end = start / 1e4;
    let warm = ((total * 3) / 10).max(1) as f64;
    let s = step as f64;
    if s < warm {
        start + (peak - start) * s / warm
    } else {
        let span = (total as f64 - warm).max(1.0);
        let p = ((s - warm) / span).min(1.0);
        end + (peak - end) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            ..Self::default()
        }
    }

    /// Updates every parameter that has a gradient entry.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One supervised window: the model input and the target stations.
#[derive(Clone, Debug)]
pub struct WindowSample {
    pub window: Window,
    /// `(x, y, normalized rain)` at the window's last step.
    pub targets: Vec<(f64, f64, f64)>,
}

/// Hides a random `ratio` share of the stations observed at the window's last
/// step from the whole window and returns them as targets. With `ratio == 0`
/// every observed station is a target and nothing is hidden.
pub fn pseudo_mask(model: &RainSeer, window: Window, ratio: f64, rng: &mut impl Rng) -> Option<WindowSample> {
    let last = window.gauges.steps - 1;
    let observed: Vec<usize> = (0..window.gauges.len()).filter(|&i| window.gauges.observed(i, last)).collect();
    if observed.is_empty() {
        return None;
    }
    let chosen: Vec<usize> = if ratio == 0.0 {
        observed
    } else {
        let count = ((ratio * observed.len() as f64 - 1e-9).ceil() as usize).clamp(1, observed.len());
        let mut pick: Vec<usize> = observed.choose_multiple(rng, count).copied().collect();
        pick.sort_unstable();
        pick
    };
    let scaling = model.config.model.scaling;
    let g = &window.gauges;
    let targets = chosen
        .iter()
        .map(|&i| {
            let (x, y) = g.stations.coords[i];
            (x, y, scaling.forward(g.value(i, last)))
        })
        .collect();
    let mut window = window;
    if ratio > 0.0 {
        hide(&mut window.gauges, &chosen);
    }
    Some(WindowSample { window, targets })
}

fn hide(ss: &mut StationSeries, stations: &[usize]) {
    for &i in stations {
        for t in 0..ss.steps {
            ss.rain[i * ss.steps + t] = 0.0;
            ss.mask[i * ss.steps + t] = false;
        }
    }
}

/// Loss terms of one window on the graph.
pub struct WindowLoss {
    pub total: Var,
    pub mse: f64,
    pub geo: Option<f64>,
}

/// `MSE + lambda * GeoLoss` for one sample; the geographic term is skipped
/// when `lambda == 0`, under `no_csta_geo`, or with fewer than two targets.
pub fn window_loss(model: &RainSeer, ctx: &mut Ctx, sample: &WindowSample, rng: &mut impl Rng) -> Result<WindowLoss> {
    let t_q = (sample.window.radar.steps() - 1) as f64;
    let queries: Vec<QueryPoint> = sample.targets.iter().map(|&(x, y, _)| QueryPoint { x, y, t_q }).collect();
    let fwd = model.forward(ctx, &sample.window, &queries)?;
    let truth: Vec<f64> = sample.targets.iter().map(|t| t.2).collect();
    let mse = mse_loss_var(&mut ctx.g, fwd.pred, &truth, &vec![true; truth.len()])?;
    let mse_value = ctx.value(mse).item();
    let cfg = &model.config;
    if cfg.lambda == 0.0 || cfg.ablation.no_csta_geo || queries.len() < 2 {
        return Ok(WindowLoss {
            total: mse,
            mse: mse_value,
            geo: None,
        });
    }
    let pairs = sample_pairs(queries.len(), cfg.pair_budget, rng);
    let positions: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| {
            let (a, b) = model.georef.normalized(q.x, q.y);
            sinusoidal_position(a, b, POSITION_CODE)
        })
        .collect();
    let geo = geo_loss_var(&mut ctx.g, &positions, fwd.prior.weights, &pairs)?;
    let geo_value = ctx.value(geo).item();
    let weighted = ctx.g.scale(geo, cfg.lambda);
    Ok(WindowLoss {
        total: ctx.g.add(mse, weighted),
        mse: mse_value,
        geo: Some(geo_value),
    })
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
}

/// Trains a fresh model on `data`, whose gauges are the visible stations
/// only. Windows end at every step from `window - 1` to the last step.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let model = RainSeer::new(cfg.clone(), data.radar.georef, data.gauges.len())?;
    train_from(model, data)
}

/// Continues training `model` with its own configuration.
pub fn train_from(mut model: RainSeer, data: &Dataset) -> Result<TrainOutcome> {
    data.validate()?;
    let cfg = model.config.clone();
    let steps_avail = data.steps();
    if steps_avail < cfg.window {
        return Err(Error::Domain(format!(
            "training data has {steps_avail} steps, fewer than one window of {}",
            cfg.window
        )));
    }
    let ends: Vec<usize> = (cfg.window - 1..steps_avail).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = one_cycle_lr(step, cfg.steps, cfg.peak_lr);
        let mut ctx = Ctx::train(&model.params);
        let mut terms = Vec::with_capacity(cfg.batch);
        let mut parts = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let end = ends[rng.gen_range(0..ends.len())];
            let window = model.window_at(&data.radar, &data.gauges, end)?;
            let Some(sample) = pseudo_mask(&model, window, cfg.pseudo_mask, &mut rng) else {
                continue;
            };
            let wl = window_loss(&model, &mut ctx, &sample, &mut rng)?;
            parts.push((end, wl.mse, wl.geo));
            terms.push(wl.total);
        }
        if terms.is_empty() {
            losses.push(f64::NAN);
            continue;
        }
        let flat: Vec<Var> = terms.iter().map(|&t| ctx.g.reshape(t, vec![1])).collect();
        let stacked = ctx.g.concat(&flat, 0);
        let loss = ctx.g.mean(stacked);
        let value = ctx.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                diagnostics: format!("loss {value} at lr {lr:.3e}; windows (end, mse, geo): {parts:?}"),
            });
        }
        let mut grads = ctx.grads(loss);
        drop(ctx);
        let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                diagnostics: format!("gradient norm {norm} with loss {value}"),
            });
        }
        opt.step(&mut model.params, &grads, lr);
        if step % 100 == 0 {
            log::debug!("step {step}: loss {value:.5} lr {lr:.2e} grad norm {norm:.3}");
        }
        losses.push(value);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            step: cfg.steps,
        },
        losses,
    })
}
