use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::baselines::{zr_rain_from_dbz, ZRParams};
use crate::error::{Error, Result};
use crate::geo::{GridGeoref, RadarSequence, StationSeries, StationSet};

/// Parameters of a synthetic storm record.
#[derive(Clone, Debug, PartialEq)]
pub struct StormConfig {
    pub georef: GridGeoref,
    pub steps: usize,
    pub timestep_minutes: f64,
    /// Number of convective cells.
    pub cells: usize,
    /// Peak reflectivity range of a cell at maturity, dBZ.
    pub peak_dbz: (f64, f64),
    /// Reflectivity away from all cells, dBZ.
    pub background_dbz: f64,
    /// Cell spread range (standard deviation along either axis), in cells.
    pub cell_sigma: (f64, f64),
    /// Lifetime spread range (standard deviation of the intensity envelope), steps.
    pub lifetime: (f64, f64),
    /// Advection velocity in cells per step, `(x, y)`.
    pub advection: (f64, f64),
    /// Steps by which surface rain trails the echo aloft.
    pub lag: usize,
    /// Whole-cell offset of the surface rain relative to the echo, `(x, y)`.
    pub tilt: (i32, i32),
    /// Fraction of rain evaporating before reaching the ground, in `[0, 1]`.
    pub evaporation: f64,
    pub gauges: usize,
    /// Standard deviation of additive radar noise, dBZ.
    pub radar_noise: f64,
    /// Log-standard deviation of the mean-one multiplicative surface noise.
    pub rain_noise: f64,
    pub zr: ZRParams,
    pub seed: u64,
}

impl StormConfig {
    /// The benchmark record: 32x32 grid of 2 km cells, 24 ten-minute steps,
    /// 40 gauges, two-step lag, one-cell eastward tilt, 30% evaporation.
    pub fn canonical(seed: u64) -> Self {
        Self {
            georef: GridGeoref::new(0.0, 0.0, 64.0, 64.0, 32, 32).expect("valid grid"),
            steps: 24,
            timestep_minutes: 10.0,
            cells: 7,
            peak_dbz: (35.0, 52.0),
            background_dbz: -10.0,
            cell_sigma: (2.0, 5.0),
            lifetime: (3.0, 8.0),
            advection: (0.6, 0.3),
            lag: 2,
            tilt: (1, 0),
            evaporation: 0.3,
            gauges: 40,
            radar_noise: 1.0,
            rain_noise: 0.1,
            zr: ZRParams::default(),
            seed,
        }
    }

    /// Same storm family with every distortion and noise source disabled.
    pub fn undistorted(seed: u64) -> Self {
        Self {
            lag: 0,
            tilt: (0, 0),
            evaporation: 0.0,
            radar_noise: 0.0,
            rain_noise: 0.0,
            ..Self::canonical(seed)
        }
    }

    /// Applies one `key = value` override. `size` sets an `n x n` grid of
    /// 2 km cells; `tilt` takes `dx,dy` in cells.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse '{v}' for key '{key}'")))
        }
        match key {
            "size" => {
                let n: usize = num(key, value)?;
                self.georef = GridGeoref::new(0.0, 0.0, 2.0 * n as f64, 2.0 * n as f64, n, n).map_err(|e| Error::Config(e.to_string()))?;
            }
            "steps" => self.steps = num(key, value)?,
            "cells" => self.cells = num(key, value)?,
            "gauges" => self.gauges = num(key, value)?,
            "lag" => self.lag = num(key, value)?,
            "tilt" => {
                let (a, b) = value
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("tilt expects 'dx,dy', got '{value}'")))?;
                self.tilt = (num(key, a)?, num(key, b)?);
            }
            "evaporation" => self.evaporation = num(key, value)?,
            "radar_noise" => self.radar_noise = num(key, value)?,
            "rain_noise" => self.rain_noise = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Usage(format!("unknown storm setting '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.georef.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.steps == 0 || self.cells == 0 || self.gauges == 0 {
            return Err(Error::Config("steps, cells and gauges must be positive".into()));
        }
        if self.lag >= self.steps {
            return Err(Error::Config(format!("lag {} must be below the step count {}", self.lag, self.steps)));
        }
        if !(0.0..=1.0).contains(&self.evaporation) {
            return Err(Error::Config(format!("evaporation {} outside [0, 1]", self.evaporation)));
        }
        if self.gauges > self.georef.cells() {
            return Err(Error::Config(format!(
                "{} gauges do not fit in {} cells",
                self.gauges,
                self.georef.cells()
            )));
        }
        if !(self.timestep_minutes > 0.0) {
            return Err(Error::Config("timestep must be positive".into()));
        }
        let ranges = [self.peak_dbz, self.cell_sigma, self.lifetime];
        if ranges.iter().any(|&(lo, hi)| !(lo <= hi && lo.is_finite() && hi.is_finite())) {
            return Err(Error::Config("range bounds must be finite and ordered".into()));
        }
        if self.cell_sigma.0 <= 0.0 || self.lifetime.0 <= 0.0 {
            return Err(Error::Config("cell spread and lifetime must be positive".into()));
        }
        if self.radar_noise < 0.0 || self.rain_noise < 0.0 {
            return Err(Error::Config("noise levels must be nonnegative".into()));
        }
        Ok(())
    }
}

/// An anisotropic Gaussian echo with a Gaussian intensity envelope in time.
struct StormCell {
    x0: f64,
    y0: f64,
    sx: f64,
    sy: f64,
    cos: f64,
    sin: f64,
    amplitude: f64,
    t_peak: f64,
    t_spread: f64,
}

impl StormCell {
    /// Contribution in dBZ above background at grid-index coordinates `(col, row)`.
    fn dbz(&self, col: f64, row: f64, t: f64, v: (f64, f64)) -> f64 {
        let dx = col - (self.x0 + v.0 * t);
        let dy = row - (self.y0 + v.1 * t);
        let u = self.cos * dx + self.sin * dy;
        let w = -self.sin * dx + self.cos * dy;
        let shape = (-0.5 * ((u / self.sx).powi(2) + (w / self.sy).powi(2))).exp();
        let env = (-0.5 * ((t - self.t_peak) / self.t_spread).powi(2)).exp();
        self.amplitude * shape * env
    }
}

/// Generates a storm record. Deterministic in `cfg` (including its seed).
///
/// Reflectivity is the background plus the advected cells, summed in linear
/// Z units. Surface rain
/// at step `t` is the Z-R conversion of the noise-free reflectivity at step
/// `t - lag`, displaced by `tilt`, scaled by `1 - evaporation` and by
/// mean-one log-normal noise. Gauges sit at distinct cell centers and read the
/// surface rain of their cell.
pub fn simulate_storm(cfg: &StormConfig) -> Result<Dataset> {
    cfg.validate()?;
    let g = cfg.georef;
    let (h, w, steps) = (g.height, g.width, cfg.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v = cfg.advection;

    let cells: Vec<StormCell> = (0..cfg.cells)
        .map(|_| {
            let t_peak = rng.gen_range(-2.0..steps as f64 + 2.0);
            // start positions chosen so the cell is inside the grid near its peak
            let xp = rng.gen_range(0.0..w as f64);
            let yp = rng.gen_range(0.0..h as f64);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            StormCell {
                x0: xp - v.0 * t_peak,
                y0: yp - v.1 * t_peak,
                sx: rng.gen_range(cfg.cell_sigma.0..=cfg.cell_sigma.1),
                sy: rng.gen_range(cfg.cell_sigma.0..=cfg.cell_sigma.1),
                cos: theta.cos(),
                sin: theta.sin(),
                amplitude: rng.gen_range(cfg.peak_dbz.0..=cfg.peak_dbz.1) - cfg.background_dbz,
                t_peak,
                t_spread: rng.gen_range(cfg.lifetime.0..=cfg.lifetime.1),
            }
        })
        .collect();

    // overlapping echoes add in linear reflectivity, not in dBZ
    let bg = 10f64.powf(cfg.background_dbz / 10.0);
    let clean = |t: f64, col: f64, row: f64| -> f32 {
        let z: f64 = cells
            .iter()
            .map(|c| 10f64.powf((cfg.background_dbz + c.dbz(col, row, t, v)) / 10.0) - bg)
            .sum();
        (10.0 * (bg + z).log10()) as f32
    };

    let m = h * w;
    let mut radar = Vec::with_capacity(steps * m);
    for t in 0..steps {
        for r in 0..h {
            for c in 0..w {
                let mut z = clean(t as f64, c as f64, r as f64);
                if cfg.radar_noise > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    z = (z as f64 + cfg.radar_noise * n) as f32;
                }
                radar.push(z);
            }
        }
    }

    let keep = 1.0 - cfg.evaporation;
    let mut truth64 = Vec::with_capacity(steps * m);
    for t in 0..steps {
        let src_t = t as f64 - cfg.lag as f64;
        for r in 0..h {
            for c in 0..w {
                let z = clean(src_t, (c as i64 - cfg.tilt.0 as i64) as f64, (r as i64 - cfg.tilt.1 as i64) as f64);
                let mut rain = keep * zr_rain_from_dbz(z as f64, cfg.zr);
                if cfg.rain_noise > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    rain *= (cfg.rain_noise * n - 0.5 * cfg.rain_noise * cfg.rain_noise).exp();
                }
                truth64.push(rain);
            }
        }
    }

    let mut picked = rand::seq::index::sample(&mut rng, m, cfg.gauges).into_vec();
    picked.sort_unstable();
    let coords: Vec<(f64, f64)> = picked.iter().map(|&i| g.cell_center(i / w, i % w)).collect();
    let ids = (0..cfg.gauges).map(|i| format!("G{i:03}")).collect();
    let stations = StationSet::new(ids, coords, vec![false; cfg.gauges], &g)?;
    let mut rain = Vec::with_capacity(cfg.gauges * steps);
    for &cell in &picked {
        for t in 0..steps {
            rain.push(truth64[t * m + cell]);
        }
    }
    let gauges = StationSeries::new(stations, steps, rain, vec![true; cfg.gauges * steps])?;
    let timestamps = (0..steps).map(|t| t as f64 * cfg.timestep_minutes).collect();
    let radar = RadarSequence::new(radar, g, timestamps)?;
    let truth = truth64.iter().map(|&x| x as f32).collect();
    Dataset::new(radar, gauges, Some(truth))
}
