//! Point metrics and rank correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Floor on the MAPE denominator, µg/m³.
pub const MAPE_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    /// Mean of `predicted − observed`.
    pub bias: f64,
    /// Against the mean of the targets; absent when the targets are constant.
    pub r2: Option<f64>,
}

/// Inclusive bounds on the observed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeFilter {
    pub min: f64,
    pub max: f64,
}

impl RangeFilter {
    pub fn contains(&self, x: f64) -> bool {
        (self.min..=self.max).contains(&x)
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.min, self.max)
    }
}

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::domain("metrics of an empty sample"));
    }
    if pred.iter().chain(target).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// `100 · mean(|p − t| / max(|t|, ε))`.
pub fn mape(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs() / t.abs().max(MAPE_EPSILON))
        .sum();
    Ok(100.0 * s / pred.len() as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    Ok((pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64).sqrt())
}

/// `1 − SS_res / SS_tot`; `None` when the targets are constant.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<Option<f64>> {
    check(pred, target)?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot))
}

/// All metrics, optionally restricted to targets inside `filter`. An empty
/// selection is an error.
pub fn compute_metrics(pred: &[f64], target: &[f64], filter: Option<RangeFilter>) -> Result<Metrics> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let (p, t): (Vec<f64>, Vec<f64>) = pred
        .iter()
        .zip(target)
        .filter(|(_, t)| filter.map_or(true, |f| f.contains(**t)))
        .map(|(p, t)| (*p, *t))
        .unzip();
    if p.is_empty() {
        return Err(Error::domain(match filter {
            Some(f) => format!("no observations inside the range {}", f.label()),
            None => "metrics of an empty sample".into(),
        }));
    }
    Ok(Metrics {
        n: p.len(),
        mae: mae(&p, &t)?,
        rmse: rmse(&p, &t)?,
        mape: mape(&p, &t)?,
        bias: p.iter().zip(&t).map(|(p, t)| p - t).sum::<f64>() / p.len() as f64,
        r2: r2(&p, &t)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided, from the t approximation with `n − 2` degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation: Pearson correlation of the average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Spearman> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} elements", a.len(), b.len())));
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::domain(format!("Spearman needs at least 3 pairs, got {n}")));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Spearman input".into()));
    }
    if a.iter().all(|x| *x == a[0]) || b.iter().all(|x| *x == b[0]) {
        return Err(Error::domain("Spearman correlation of a constant vector"));
    }
    let rho = pearson(&average_ranks(a), &average_ranks(b)).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::domain(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Spearman { rho, p_value, n })
}
