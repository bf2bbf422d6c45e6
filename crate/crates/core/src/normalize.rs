//! Invertible rainfall scalings used between physical (mm/h) and model space.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum RainScaling {
    /// `ln(1 + r)`; compresses heavy-tailed intensities.
    #[default]
    Log1p,
    Identity,
    /// Division by a fixed positive constant.
    Divide(f64),
}

impl RainScaling {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "log1p" => Ok(RainScaling::Log1p),
            "identity" => Ok(RainScaling::Identity),
            _ => {
                if let Some(v) = s.strip_prefix("divide:") {
                    let c: f64 = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad divisor in rain scaling '{s}'")))?;
                    if !(c > 0.0 && c.is_finite()) {
                        return Err(Error::Config(format!("rain scaling divisor must be positive, got {c}")));
                    }
                    Ok(RainScaling::Divide(c))
                } else {
                    Err(Error::Config(format!("unknown rain scaling '{s}' (log1p | identity | divide:<c>)")))
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            RainScaling::Log1p => "log1p".into(),
            RainScaling::Identity => "identity".into(),
            RainScaling::Divide(c) => format!("divide:{c}"),
        }
    }

    pub fn forward(&self, v: f64) -> f64 {
        match self {
            RainScaling::Log1p => v.ln_1p(),
            RainScaling::Identity => v,
            RainScaling::Divide(c) => v / c,
        }
    }

    pub fn inverse(&self, v: f64) -> f64 {
        match self {
            RainScaling::Log1p => v.exp_m1(),
            RainScaling::Identity => v,
            RainScaling::Divide(c) => v * c,
        }
    }

    pub fn normalize(&self, values: &[f64]) -> Result<Vec<f64>> {
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::Domain(format!("rain intensity must be nonnegative, got {v}")));
        }
        Ok(values.iter().map(|&v| self.forward(v)).collect())
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.inverse(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log1p_examples() {
        let s = RainScaling::Log1p;
        assert_eq!(s.normalize(&[0.0]).unwrap(), vec![0.0]);
        let e = s.normalize(&[std::f64::consts::E - 1.0]).unwrap()[0];
        assert!((e - 1.0).abs() < 1e-15);
        let v = [0.0, 1.0, 50.0];
        let back = s.denormalize(&s.normalize(&v).unwrap());
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn negative_rejected() {
        assert!(RainScaling::Log1p.normalize(&[1.0, -0.1]).is_err());
    }

    #[test]
    fn parse_round_trip() {
        for s in [RainScaling::Log1p, RainScaling::Identity, RainScaling::Divide(2.5)] {
            assert_eq!(RainScaling::parse(&s.name()).unwrap(), s);
        }
        assert!(RainScaling::parse("sqrt").is_err());
    }
}
