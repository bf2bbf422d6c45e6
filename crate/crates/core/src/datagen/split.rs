use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::geo::StationSeries;

/// First `floor(train_frac * T)` steps for training, the rest for testing.
pub fn chronological_split(ds: &Dataset, train_frac: f64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Domain(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let steps = ds.steps();
    // the epsilon keeps products such as 0.7 * 10 from landing just below an integer
    let n_train = (train_frac * steps as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_train >= steps {
        return Err(Error::Domain(format!(
            "splitting {steps} steps at {train_frac} leaves an empty side ({n_train} / {})",
            steps.saturating_sub(n_train)
        )));
    }
    Ok((ds.slice_steps(0..n_train), ds.slice_steps(n_train..steps)))
}

/// Moves `ceil(ratio * N)` randomly chosen stations into the held-out set.
/// Both parts keep the original station order.
pub fn mask_stations(ss: &StationSeries, ratio: f64, seed: u64) -> Result<(StationSeries, StationSeries)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Domain(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let n = ss.len();
    let n_out = (ratio * n as f64 - 1e-9).ceil() as usize;
    if n_out >= n {
        return Err(Error::Domain(format!("masking {n_out} of {n} stations leaves none visible")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held: Vec<usize> = order[..n_out].to_vec();
    let mut visible: Vec<usize> = order[n_out..].to_vec();
    held.sort_unstable();
    visible.sort_unstable();
    Ok((ss.select(&visible), ss.select(&held)))
}
