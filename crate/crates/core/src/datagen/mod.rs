//! Synthetic storms with controllable radar-to-surface distortions, the
//! on-disk dataset format, and the evaluation split helpers.

mod io;
mod split;
mod storm;

pub use io::{load_dataset, load_dataset_with, write_dataset, Aggregation, LoadOptions};
pub use split::{chronological_split, mask_stations};
pub use storm::{simulate_storm, StormConfig};

use crate::error::{Error, Result};
use crate::geo::{RadarSequence, StationSeries};

/// Radar record, gauge series, and (for synthetic data) the true surface
/// rain field, all over the same timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub radar: RadarSequence,
    pub gauges: StationSeries,
    /// `T x H x W` surface rain in mm/h, stored at the on-disk precision.
    pub truth: Option<Vec<f32>>,
}

impl Dataset {
    pub fn new(radar: RadarSequence, gauges: StationSeries, truth: Option<Vec<f32>>) -> Result<Self> {
        let ds = Self { radar, gauges, truth };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.radar.validate()?;
        self.gauges.validate()?;
        self.gauges.stations.validate(&self.radar.georef)?;
        if self.gauges.steps != self.radar.steps() {
            return Err(Error::Shape(format!(
                "gauges span {} steps, radar {}",
                self.gauges.steps,
                self.radar.steps()
            )));
        }
        if let Some(t) = &self.truth {
            if t.len() != self.radar.values.len() {
                return Err(Error::Shape(format!(
                    "truth field holds {} values, expected {}",
                    t.len(),
                    self.radar.values.len()
                )));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.radar.steps()
    }

    /// Steps `range` of every member.
    pub fn slice_steps(&self, range: std::ops::Range<usize>) -> Dataset {
        let m = self.radar.georef.cells();
        Dataset {
            radar: self.radar.slice_steps(range.clone()),
            gauges: self.gauges.slice_steps(range.clone()),
            truth: self.truth.as_ref().map(|t| t[range.start * m..range.end * m].to_vec()),
        }
    }

    /// Truth frame `t` as `f64` values.
    pub fn truth_frame(&self, t: usize) -> Option<Vec<f64>> {
        let m = self.radar.georef.cells();
        self.truth.as_ref().map(|v| v[t * m..(t + 1) * m].iter().map(|&x| x as f64).collect())
    }
}
