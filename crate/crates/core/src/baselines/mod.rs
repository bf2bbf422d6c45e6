//! Reference reconstruction methods: radar-only Z-R conversion and three
//! gauge-only spatial interpolators (TIN, thin-plate spline, IDW).

mod idw;
mod tin;
mod tps;
mod zr;

pub use idw::idw_interpolate;
pub use tin::{tin_interpolate, TinOutput};
pub use tps::{tps_interpolate, ThinPlateSpline};
pub use zr::{zr_baseline_field, zr_dbz_from_rain, zr_rain_from_dbz, ZRParams, DBZ_FLOOR};

/// A gauge reading at one step: `(x, y, value)`.
pub type Observation = (f64, f64, f64);
