//! Scoring reconstructions at held-out stations over the test steps.

use std::ops::Range;

use crate::baselines::{idw_interpolate, tin_interpolate, tps_interpolate, zr_baseline_field, ZRParams};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::geo::{RadarSequence, RainField, StationSeries};
use crate::objective::MetricsReport;

use super::checkpoint::Checkpoint;
use super::model::RainSeer;

/// Anything that turns the inputs up to step `t` into a field at step `t`.
pub trait FieldModel {
    fn name(&self) -> String;

    /// The field at step `t` plus notes on fallbacks taken.
    fn field_at(&self, radar: &RadarSequence, gauges: &StationSeries, t: usize) -> Result<(RainField, Vec<String>)>;
}

impl FieldModel for RainSeer {
    fn name(&self) -> String {
        let a = self.config.ablation.names();
        if a.is_empty() {
            "rainseer".into()
        } else {
            format!("rainseer+{}", a.join("+"))
        }
    }

    fn field_at(&self, radar: &RadarSequence, gauges: &StationSeries, t: usize) -> Result<(RainField, Vec<String>)> {
        Ok((self.reconstruct(radar, gauges, t)?, Vec::new()))
    }
}

pub const BASELINE_METHODS: [&str; 4] = ["zr", "tin", "tps", "idw"];

/// Classical reference reconstructions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    /// Z-R conversion of the radar frame at the target step.
    Zr(ZRParams),
    /// Linear interpolation on the Delaunay triangulation of the stations.
    Tin,
    /// Thin-plate spline through the stations.
    Tps { smoothing: f64 },
    /// Inverse-distance weighting.
    Idw { power: f64 },
}

impl Baseline {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "zr" => Ok(Baseline::Zr(ZRParams::default())),
            "tin" => Ok(Baseline::Tin),
            "tps" => Ok(Baseline::Tps { smoothing: 0.0 }),
            "idw" => Ok(Baseline::Idw { power: 2.0 }),
            _ => Err(Error::Usage(format!(
                "unknown baseline method '{name}'; valid methods: {}",
                BASELINE_METHODS.join(", ")
            ))),
        }
    }
}

impl FieldModel for Baseline {
    fn name(&self) -> String {
        match self {
            Baseline::Zr(_) => "zr",
            Baseline::Tin => "tin",
            Baseline::Tps { .. } => "tps",
            Baseline::Idw { .. } => "idw",
        }
        .into()
    }

    fn field_at(&self, radar: &RadarSequence, gauges: &StationSeries, t: usize) -> Result<(RainField, Vec<String>)> {
        let g = radar.georef;
        let obs = || {
            let o = gauges.observations_at(t);
            if o.is_empty() {
                Err(Error::Domain(format!("no station observed at step {t}")))
            } else {
                Ok(o)
            }
        };
        match *self {
            Baseline::Zr(p) => Ok((zr_baseline_field(radar, t, p)?, Vec::new())),
            Baseline::Tin => {
                let out = tin_interpolate(&obs()?, g)?;
                let notes = if out.nearest_fallback {
                    vec![format!("step {t}: nearest-station fallback outside the triangulation")]
                } else {
                    Vec::new()
                };
                Ok((out.field, notes))
            }
            Baseline::Tps { smoothing } => Ok((tps_interpolate(&obs()?, g, smoothing)?, Vec::new())),
            Baseline::Idw { power } => Ok((idw_interpolate(&obs()?, g, power)?, Vec::new())),
        }
    }
}

/// Steps after the chronological training share.
pub fn test_steps(total: usize, train_fraction: f64) -> Range<usize> {
    let cut = ((train_fraction * total as f64) + 1e-9).floor() as usize;
    cut.min(total)..total
}

/// Reconstructs every step in `steps` from `data` (visible stations only)
/// and scores the field at the cells of the held-out stations.
pub fn evaluate_model(model: &dyn FieldModel, data: &Dataset, held_out: &StationSeries, steps: Range<usize>) -> Result<MetricsReport> {
    if steps.is_empty() {
        return Err(Error::Domain("no test steps to evaluate".into()));
    }
    if steps.end > data.steps() || held_out.steps != data.steps() {
        return Err(Error::Shape(format!(
            "test steps {steps:?} against {} data steps and {} held-out steps",
            data.steps(),
            held_out.steps
        )));
    }
    if let Some(id) = held_out.stations.ids.iter().find(|id| data.gauges.stations.ids.contains(id)) {
        return Err(Error::Domain(format!("held-out station {id} is part of the model input")));
    }
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut labels = Vec::new();
    let mut notes = Vec::new();
    for t in steps {
        let (field, n) = model.field_at(&data.radar, &data.gauges, t)?;
        notes.extend(n);
        for i in 0..held_out.len() {
            if !held_out.observed(i, t) {
                continue;
            }
            let (x, y) = held_out.stations.coords[i];
            truth.push(held_out.value(i, t));
            pred.push(field.sample(x, y)?);
            labels.push(held_out.stations.ids[i].clone());
        }
    }
    if truth.is_empty() {
        return Err(Error::Domain("no held-out observation in the test steps".into()));
    }
    let mut report = MetricsReport::compute(&model.name(), &truth, &pred, &labels)?;
    report.warnings = notes;
    Ok(report)
}

/// Scores a checkpoint on the test steps implied by its training fraction.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, held_out: &StationSeries) -> Result<MetricsReport> {
    let steps = test_steps(data.steps(), ckpt.model.config.train_fraction);
    evaluate_model(&ckpt.model, data, held_out, steps)
}

/// Scores a named baseline with the same protocol as [`evaluate`].
pub fn run_baseline(method: &str, data: &Dataset, held_out: &StationSeries, train_fraction: f64) -> Result<MetricsReport> {
    let b = Baseline::parse(method)?;
    evaluate_model(&b, data, held_out, test_steps(data.steps(), train_fraction))
}
