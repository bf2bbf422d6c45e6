//! Station hold-out and chronological split shared by training and scoring.

use std::ops::Range;

use crate::datagen::{chronological_split, mask_stations, Dataset};
use crate::error::Result;
use crate::geo::StationSeries;

use super::evaluate::test_steps;

/// A dataset partitioned for one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    /// Radar plus the visible stations over every step: the only model input.
    pub input: Dataset,
    /// The training steps of `input`.
    pub train: Dataset,
    /// Held-out stations over every step, used for scoring only.
    pub held_out: StationSeries,
    pub test_steps: Range<usize>,
}

/// Holds out `ceil(mask_ratio * N)` stations (seeded) and splits the steps
/// chronologically at `train_fraction`.
pub fn prepare(ds: &Dataset, mask_ratio: f64, train_fraction: f64, seed: u64) -> Result<Experiment> {
    ds.validate()?;
    let (visible, held_out) = mask_stations(&ds.gauges, mask_ratio, seed)?;
    let input = Dataset {
        radar: ds.radar.clone(),
        gauges: visible,
        truth: ds.truth.clone(),
    };
    let (train, _) = chronological_split(&input, train_fraction)?;
    Ok(Experiment {
        test_steps: test_steps(ds.steps(), train_fraction),
        input,
        train,
        held_out,
    })
}
