//! Training losses and evaluation metrics.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{cosine_value, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::select_rows;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the geographic regularizer.
    pub lambda: f64,
    /// Query pairs sampled per window for the regularizer.
    pub pair_budget: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            pair_budget: 64,
        }
    }
}

/// Mean squared residual over entries where `mask` is set.
pub fn mse_loss(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "prediction {}, truth {}, mask {} differ in length",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    let sel: Vec<f64> = (0..pred.len()).filter(|&i| mask[i]).map(|i| (pred[i] - truth[i]).powi(2)).collect();
    if sel.is_empty() {
        return Err(Error::Domain("MSE over an empty mask".into()));
    }
    // same operation order as the graph mean, so both agree to the bit
    Ok(sel.iter().sum::<f64>() * (1.0 / sel.len() as f64))
}

/// Graph version of [`mse_loss`] for a prediction variable of any shape.
pub fn mse_loss_var(g: &mut Graph, pred: Var, truth: &[f64], mask: &[bool]) -> Result<Var> {
    let n = g.value(pred).len();
    if truth.len() != n || mask.len() != n {
        return Err(Error::Shape(format!("prediction {n}, truth {}, mask {} differ in length", truth.len(), mask.len())));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::Domain("MSE over an empty mask".into()));
    }
    let t: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
    let m = idx.len();
    let p = g.gather(pred, idx.into(), vec![m]);
    let t = g.constant(Tensor::new(vec![m], t));
    let r = g.sub(p, t);
    let sq = g.mul(r, r);
    Ok(g.mean(sq))
}

/// `(1/|P|) sum Sim(p_i, p_j) (1 - Sim(a_i, a_j))` with cosine similarity
/// (zero-norm vectors have similarity 0).
pub fn geo_loss(positions: &[Vec<f64>], attentions: &[Vec<f64>], pairs: &[(usize, usize)]) -> Result<f64> {
    check_pairs(positions.len(), attentions.len(), pairs)?;
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| cosine_value(&positions[i], &positions[j]) * (1.0 - cosine_value(&attentions[i], &attentions[j])))
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Graph version of [`geo_loss`]; `attn` is `[Q, A]` with one attention row
/// per query over a shared admissible token set.
pub fn geo_loss_var(g: &mut Graph, positions: &[Vec<f64>], attn: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let q = g.shape(attn)[0];
    check_pairs(positions.len(), q, pairs)?;
    let a = g.shape(attn)[1];
    let weights: Vec<f64> = pairs.iter().map(|&(i, j)| cosine_value(&positions[i], &positions[j])).collect();
    let mut terms = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let ai = select_rows(g, attn, &[i]);
        let aj = select_rows(g, attn, &[j]);
        let ai = g.reshape(ai, vec![a]);
        let aj = g.reshape(aj, vec![a]);
        terms.push(g.cosine(ai, aj));
    }
    let sims = g.concat(&terms, 0);
    let dis = g.affine(sims, -1.0, 1.0);
    let w = g.constant(Tensor::new(vec![pairs.len()], weights));
    let weighted = g.mul(dis, w);
    Ok(g.mean(weighted))
}

fn check_pairs(n_pos: usize, n_att: usize, pairs: &[(usize, usize)]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Domain("geographic loss needs at least one query pair".into()));
    }
    if n_pos != n_att {
        return Err(Error::Shape(format!("{n_pos} positions for {n_att} attention vectors")));
    }
    if pairs.iter().any(|&(i, j)| i >= n_pos || j >= n_pos || i == j) {
        return Err(Error::Domain("query pairs must name two distinct, valid queries".into()));
    }
    Ok(())
}

/// All distinct pairs when there are at most `budget` of them, otherwise
/// `budget` pairs drawn uniformly without replacement.
pub fn sample_pairs(queries: usize, budget: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let total = queries * queries.saturating_sub(1) / 2;
    let pair_of = |mut k: usize| {
        let mut i = 0;
        while k >= queries - 1 - i {
            k -= queries - 1 - i;
            i += 1;
        }
        (i, i + 1 + k)
    };
    if total <= budget {
        return (0..total).map(pair_of).collect();
    }
    let mut ks = sample(rng, total, budget).into_vec();
    ks.sort_unstable();
    ks.into_iter().map(pair_of).collect()
}

/// `mse + lambda * geo`.
pub fn total_loss(mse: f64, geo: f64, cfg: &LossConfig) -> f64 {
    mse + cfg.lambda * geo
}

fn check_pair(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("truth has {} values, prediction {}", truth.len(), pred.len())));
    }
    if truth.is_empty() {
        return Err(Error::Domain("metric over an empty sample".into()));
    }
    Ok(())
}

pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let s: f64 = truth.iter().zip(pred).map(|(g, r)| (g - r).powi(2)).sum();
    Ok((s / truth.len() as f64).sqrt())
}

pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let s: f64 = truth.iter().zip(pred).map(|(g, r)| (g - r).abs()).sum();
    Ok(s / truth.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Nash-Sutcliffe efficiency `1 - sum (G - R)^2 / sum (G - mean G)^2`.
pub fn nse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    if truth.len() < 2 {
        return Err(Error::UndefinedMetric("NSE needs at least two samples".into()));
    }
    let gm = mean(truth);
    let den: f64 = truth.iter().map(|g| (g - gm).powi(2)).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("NSE of a constant truth series".into()));
    }
    let num: f64 = truth.iter().zip(pred).map(|(g, r)| (g - r).powi(2)).sum();
    Ok(1.0 - num / den)
}

/// Pearson correlation coefficient.
pub fn cc(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let (gm, rm) = (mean(truth), mean(pred));
    let mut sgr = 0.0;
    let mut sgg = 0.0;
    let mut srr = 0.0;
    for (g, r) in truth.iter().zip(pred) {
        sgr += (g - gm) * (r - rm);
        sgg += (g - gm).powi(2);
        srr += (r - rm).powi(2);
    }
    if sgg == 0.0 || srr == 0.0 {
        return Err(Error::UndefinedMetric("correlation of a constant series".into()));
    }
    Ok((sgr / (sgg.sqrt() * srr.sqrt())).clamp(-1.0, 1.0))
}

/// Error summary for one station.
#[derive(Clone, Debug, PartialEq)]
pub struct StationScore {
    pub id: String,
    pub rmse: f64,
    pub mae: f64,
    pub samples: usize,
}

/// Scores of one method over all evaluated (station, step) samples, in mm/h.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub rmse: f64,
    pub mae: f64,
    pub nse: f64,
    pub cc: f64,
    pub samples: usize,
    pub per_station: Vec<StationScore>,
    /// Free-form notes (e.g. interpolation fallbacks taken).
    pub warnings: Vec<String>,
}

pub const CSV_HEADER: &str = "method,rmse,mae,nse,cc";

impl MetricsReport {
    /// Scores `pred` against `truth`; `station` names the station of each sample.
    pub fn compute(method: &str, truth: &[f64], pred: &[f64], station: &[String]) -> Result<Self> {
        if station.len() != truth.len() {
            return Err(Error::Shape("one station label per sample required".into()));
        }
        let mut ids: Vec<&String> = Vec::new();
        for s in station {
            if !ids.contains(&s) {
                ids.push(s);
            }
        }
        let mut per_station = Vec::with_capacity(ids.len());
        for id in ids {
            let idx: Vec<usize> = (0..station.len()).filter(|&i| &station[i] == id).collect();
            let t: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
            let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
            per_station.push(StationScore {
                id: id.clone(),
                rmse: rmse(&t, &p)?,
                mae: mae(&t, &p)?,
                samples: idx.len(),
            });
        }
        Ok(Self {
            method: method.to_string(),
            rmse: rmse(truth, pred)?,
            mae: mae(truth, pred)?,
            nse: nse(truth, pred)?,
            cc: cc(truth, pred)?,
            samples: truth.len(),
            per_station,
            warnings: Vec::new(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.method, self.rmse, self.mae, self.nse, self.cc)
    }

    /// Header plus one row per report.
    pub fn to_csv(reports: &[MetricsReport]) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    /// `key: value` lines followed by the per-station breakdown.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method: {}", self.method);
        let _ = writeln!(s, "units: mm/h");
        let _ = writeln!(s, "samples: {}", self.samples);
        let _ = writeln!(s, "rmse: {}", self.rmse);
        let _ = writeln!(s, "mae: {}", self.mae);
        let _ = writeln!(s, "nse: {}", self.nse);
        let _ = writeln!(s, "cc: {}", self.cc);
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        for st in &self.per_station {
            let _ = writeln!(s, "station {}: rmse {} mae {} samples {}", st.id, st.rmse, st.mae, st.samples);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_examples() {
        let m = [true, true];
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0], &m).unwrap(), 0.0);
        assert_eq!(mse_loss(&[2.0, 3.0], &[1.0, 2.0], &m).unwrap(), 1.0);
        assert_eq!(mse_loss(&[0.0, 2.0], &[1.0, 1.0], &m).unwrap(), 1.0);
        assert!(mse_loss(&[0.0], &[1.0], &[false]).is_err());
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![3], vec![0.0, 2.0, 9.0]));
        let l = mse_loss_var(&mut g, p, &[1.0, 1.0, 0.0], &[true, true, false]).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn geo_examples() {
        let pos = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        let att = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((geo_loss(&pos, &att, &[(0, 1)]).unwrap() - 1.0).abs() < 1e-12);
        let same = vec![vec![0.3, 0.7], vec![0.3, 0.7]];
        assert_eq!(geo_loss(&pos, &same, &[(0, 1)]).unwrap(), 0.0);
        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(geo_loss(&ortho, &att, &[(0, 1)]).unwrap(), 0.0);
        let zero = vec![vec![0.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(geo_loss(&pos, &zero, &[(0, 1)]).unwrap(), 1.0);
        assert!(geo_loss(&pos, &att, &[]).is_err());

        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let l = geo_loss_var(&mut g, &pos, a, &[(0, 1)]).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pair_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_pairs(3, 64, &mut rng), vec![(0, 1), (0, 2), (1, 2)]);
        let p = sample_pairs(40, 64, &mut rng);
        assert_eq!(p.len(), 64);
        assert!(p.iter().all(|&(i, j)| i < j && j < 40));
        assert!(sample_pairs(1, 64, &mut rng).is_empty());
    }

    #[test]
    fn total_examples() {
        let c = LossConfig::default();
        assert!((total_loss(1.0, 1.0, &c) - 1.1).abs() < 1e-15);
        assert_eq!(total_loss(0.37, 5.0, &LossConfig { lambda: 0.0, ..c }), 0.37);
        assert_eq!(total_loss(0.37, 0.0, &c), 0.37);
    }

    #[test]
    fn metric_examples() {
        let g = [0.0, 2.0];
        assert_eq!(nse(&g, &g).unwrap(), 1.0);
        assert_eq!(nse(&g, &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(nse(&g, &[2.0, 0.0]).unwrap(), -3.0);
        assert!(matches!(nse(&[1.0, 1.0], &g), Err(Error::UndefinedMetric(_))));
        assert!((cc(&[0.0, 1.0, 2.0], &[0.0, 2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cc(&[0.0, 1.0, 2.0], &[5.0, 4.0, 3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(cc(&[0.0, 1.0], &[3.0, 3.0]).is_err());
        assert!((rmse(&[0.0, 0.0], &[3.0, -4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae(&[0.0, 0.0], &[3.0, -4.0]).unwrap(), 3.5);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn report_formats() {
        let ids: Vec<String> = ["a", "a", "b"].iter().map(|s| s.to_string()).collect();
        let r = MetricsReport::compute("idw", &[0.0, 1.0, 2.0], &[0.0, 1.0, 2.5], &ids).unwrap();
        assert_eq!(r.per_station.len(), 2);
        let csv = MetricsReport::to_csv(&[r.clone()]);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert!(r.to_text().contains("rmse: "));
    }

    proptest! {
        #[test]
        fn rmse_bounds_mae(v in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..50)) {
            let (t, p): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            prop_assert!(rmse(&t, &p).unwrap() >= mae(&t, &p).unwrap() - 1e-12);
        }

        #[test]
        fn geo_symmetric_and_scale_invariant(
            pos in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 4),
            att in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 5), 4),
            s in 0.1f64..10.0,
        ) {
            let pairs = [(0, 1), (1, 3), (2, 3)];
            let swapped: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (j, i)).collect();
            let scaled: Vec<Vec<f64>> = att.iter().map(|a| a.iter().map(|x| x * s).collect()).collect();
            let base = geo_loss(&pos, &att, &pairs).unwrap();
            prop_assert!((base - geo_loss(&pos, &att, &swapped).unwrap()).abs() < 1e-12);
            prop_assert!((base - geo_loss(&pos, &scaled, &pairs).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn cc_affine_invariant(v in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 3..30), a in 0.1f64..5.0, b in -5.0f64..5.0) {
            let (t, p): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let Ok(c0) = cc(&t, &p) {
                let t2: Vec<f64> = t.iter().map(|x| a * x + b).collect();
                let p2: Vec<f64> = p.iter().map(|x| a * x + b).collect();
                prop_assert!((c0 - cc(&t2, &p2).unwrap()).abs() < 1e-9);
            }
        }
    }
}
