use spade::{DelaunayTriangulation, FloatTriangulation, HasPosition, Point2, Triangulation};

use super::Observation;
use crate::error::{Error, Result};
use crate::geo::{GridGeoref, RainField};

struct Site {
    pos: Point2<f64>,
    value: f64,
}

impl HasPosition for Site {
    type Scalar = f64;

    fn position(&self) -> Point2<f64> {
        self.pos
    }
}

#[derive(Clone, Debug)]
pub struct TinOutput {
    pub field: RainField,
    /// Set when the stations could not be triangulated (fewer than three, or
    /// all collinear) and every cell took its nearest station's value.
    pub nearest_fallback: bool,
}

/// Piecewise-linear interpolation over the Delaunay triangulation of the
/// stations. Cells outside the convex hull take the nearest station's value.
pub fn tin_interpolate(obs: &[Observation], georef: GridGeoref) -> Result<TinOutput> {
    if obs.is_empty() {
        return Err(Error::Domain("TIN needs at least one station".into()));
    }
    let mut tri: DelaunayTriangulation<Site> = DelaunayTriangulation::new();
    for &(x, y, value) in obs {
        tri.insert(Site {
            pos: Point2::new(x, y),
            value,
        })
        .map_err(|e| Error::Domain(format!("cannot triangulate station at ({x}, {y}): {e:?}")))?;
    }
    let fallback = tri.num_inner_faces() == 0;
    if fallback {
        log::warn!("TIN: {} stations cannot be triangulated; using nearest-station values", obs.len());
    }
    let bary = tri.barycentric();
    let field = RainField::from_fn(georef, |x, y| {
        let inside = if fallback {
            None
        } else {
            bary.interpolate(|v| v.data().value, Point2::new(x, y))
        };
        inside.unwrap_or_else(|| nearest(obs, x, y))
    });
    Ok(TinOutput {
        field,
        nearest_fallback: fallback,
    })
}

fn nearest(obs: &[Observation], x: f64, y: f64) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for &(sx, sy, v) in obs {
        let d = (x - sx).powi(2) + (y - sy).powi(2);
        if d < best.0 {
            best = (d, v);
        }
    }
    best.1
}
