use super::Observation;
use crate::error::{Error, Result};
use crate::geo::{GridGeoref, RainField};

/// Inverse-distance weighting with weights `d^-power`; a cell center that
/// coincides with a station takes that station's value.
pub fn idw_interpolate(obs: &[Observation], georef: GridGeoref, power: f64) -> Result<RainField> {
    if obs.is_empty() {
        return Err(Error::Domain("IDW needs at least one station".into()));
    }
    if !(power > 0.0) {
        return Err(Error::Domain(format!("IDW power must be positive, got {power}")));
    }
    Ok(RainField::from_fn(georef, |x, y| idw_at(obs, x, y, power)))
}

pub(crate) fn idw_at(obs: &[Observation], x: f64, y: f64, power: f64) -> f64 {
    // weighted mean of offsets from the first reading, so that equal readings
    // reproduce exactly
    let base = obs[0].2;
    let mut num = 0.0;
    let mut den = 0.0;
    for &(sx, sy, v) in obs {
        let d2 = (x - sx).powi(2) + (y - sy).powi(2);
        if d2 == 0.0 {
            return v;
        }
        let w = d2.powf(-power / 2.0);
        num += w * (v - base);
        den += w;
    }
    base + num / den
}
