use nalgebra::{DMatrix, DVector};

use super::Observation;
use crate::error::{Error, Result};
use crate::geo::{GridGeoref, RainField};

/// Fitted thin-plate spline `f(p) = a0 + a1 x + a2 y + sum_i w_i phi(|p - p_i|)`
/// with `phi(r) = r^2 ln r`.
#[derive(Clone, Debug)]
pub struct ThinPlateSpline {
    centers: Vec<(f64, f64)>,
    weights: Vec<f64>,
    affine: [f64; 3],
}

fn kernel(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

impl ThinPlateSpline {
    /// Solves the augmented system `[K + s I, P; P^T, 0] [w; a] = [v; 0]` by LU.
    pub fn fit(obs: &[Observation], smoothing: f64) -> Result<Self> {
        let n = obs.len();
        if n < 3 {
            return Err(Error::Domain(format!("TPS needs at least 3 stations, got {n}")));
        }
        if !(smoothing >= 0.0) {
            return Err(Error::Domain(format!("TPS smoothing must be >= 0, got {smoothing}")));
        }
        let mut dups = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if obs[i].0 == obs[j].0 && obs[i].1 == obs[j].1 {
                    dups.push(format!("#{i} and #{j} at ({}, {})", obs[i].0, obs[i].1));
                }
            }
        }
        if !dups.is_empty() {
            return Err(Error::Domain(format!("TPS system is singular: duplicate stations {}", dups.join(", "))));
        }
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        for i in 0..n {
            let (xi, yi, vi) = obs[i];
            for j in 0..n {
                let (xj, yj, _) = obs[j];
                a[(i, j)] = kernel((xi - xj).powi(2) + (yi - yj).powi(2));
            }
            a[(i, i)] += smoothing;
            for (c, p) in [1.0, xi, yi].into_iter().enumerate() {
                a[(i, n + c)] = p;
                a[(n + c, i)] = p;
            }
            rhs[i] = vi;
        }
        let sol = a
            .lu()
            .solve(&rhs)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Domain("TPS system is singular (stations collinear?)".into()))?;
        Ok(Self {
            centers: obs.iter().map(|&(x, y, _)| (x, y)).collect(),
            weights: sol.rows(0, n).iter().copied().collect(),
            affine: [sol[n], sol[n + 1], sol[n + 2]],
        })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let mut v = self.affine[0] + self.affine[1] * x + self.affine[2] * y;
        for (&(cx, cy), w) in self.centers.iter().zip(&self.weights) {
            v += w * kernel((x - cx).powi(2) + (y - cy).powi(2));
        }
        v
    }
}

/// Thin-plate spline evaluated at every cell center. With `smoothing = 0`
/// the surface passes through every station.
pub fn tps_interpolate(obs: &[Observation], georef: GridGeoref, smoothing: f64) -> Result<RainField> {
    let spline = ThinPlateSpline::fit(obs, smoothing)?;
    Ok(RainField::from_fn(georef, |x, y| spline.eval(x, y)))
}
