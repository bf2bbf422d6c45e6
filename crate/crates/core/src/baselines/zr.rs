use crate::error::{Error, Result};
use crate::geo::{RadarSequence, RainField};

/// Reflectivity assigned to zero rain.
pub const DBZ_FLOOR: f64 = -32.0;

/// Power-law coefficients of `Z = a R^b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZRParams {
    pub a: f64,
    pub b: f64,
}

impl Default for ZRParams {
    /// Marshall-Palmer-style coefficients, a = 200, b = 1.6.
    fn default() -> Self {
        Self { a: 200.0, b: 1.6 }
    }
}

impl ZRParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::Domain(format!("Z-R coefficients must be positive, got a = {a}, b = {b}")));
        }
        Ok(Self { a, b })
    }
}

/// Rain rate (mm/h) from reflectivity (dBZ): `R = (10^(dBZ/10) / a)^(1/b)`.
pub fn zr_rain_from_dbz(dbz: f64, p: ZRParams) -> f64 {
    let z = 10f64.powf(dbz / 10.0);
    (z / p.a).powf(1.0 / p.b)
}

/// Reflectivity (dBZ) from rain rate: `10 log10(a R^b)`; zero rain maps to
/// [`DBZ_FLOOR`].
pub fn zr_dbz_from_rain(rate: f64, p: ZRParams) -> Result<f64> {
    if rate < 0.0 || rate.is_nan() {
        return Err(Error::Domain(format!("rain rate must be nonnegative, got {rate}")));
    }
    if rate == 0.0 {
        return Ok(DBZ_FLOOR);
    }
    Ok(10.0 * (p.a.log10() + p.b * rate.log10()))
}

/// Radar-only field: Z-R conversion of frame `t`, cell by cell.
pub fn zr_baseline_field(radar: &RadarSequence, t: usize, p: ZRParams) -> Result<RainField> {
    if t >= radar.steps() {
        return Err(Error::Domain(format!("step {t} outside radar record of {} steps", radar.steps())));
    }
    let values = radar.frame(t).iter().map(|&v| zr_rain_from_dbz(v as f64, p)).collect();
    RainField::new(values, radar.georef)
}
