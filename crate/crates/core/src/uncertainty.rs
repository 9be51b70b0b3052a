//! Monte Carlo sensor-subset ensembles: per-query mean, variance and
//! coefficient of variation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{derived_rng, RunConfig};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::geo::encode_latlon;
use crate::model::{Model, QueryPoint, SensorPool};
use crate::record::{format_date, SensorRecord};
use crate::train::sample_nearby_sensors;

/// Means at or below this (µg/m³) have no CV.
pub const CV_MIN_MEAN: f64 = 0.1;
const MEMBER_STREAM: u64 = 0x3c;

/// How each ensemble member picks its sensors from the day's candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubsetPolicy {
    /// Every candidate.
    All,
    /// The `n` nearest candidates.
    Nearest { n: usize },
    /// `n` candidates drawn with Gaussian distance weights of width `sigma`.
    Gaussian { n: usize, sigma: f64 },
}

impl SubsetPolicy {
    /// The policy used in training.
    pub fn from_config(config: &RunConfig) -> Self {
        SubsetPolicy::Gaussian {
            n: config.n_sensors,
            sigma: config.sampling_sigma,
        }
    }

    /// True when every member necessarily sees the same subset.
    pub fn is_degenerate(&self) -> bool {
        !matches!(self, SubsetPolicy::Gaussian { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub policy: SubsetPolicy,
    /// Ensemble size `M`, at least 2.
    pub m: usize,
    pub seed: u64,
}

impl McSettings {
    pub fn from_config(config: &RunConfig) -> Self {
        McSettings {
            policy: SubsetPolicy::from_config(config),
            m: config.mc_samples,
            seed: config.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionWithUncertainty {
    pub lat: f64,
    pub lon: f64,
    pub date: crate::record::Day,
    pub mean: f64,
    /// Sample variance with `M − 1` in the denominator.
    pub variance: f64,
    /// `σ/μ`, absent when `μ ≤ 0.1`.
    pub cv: Option<f64>,
    pub m: usize,
}

/// Mean, sample variance and CV of back-transformed member predictions.
pub fn summarize_members(members: &[f64]) -> Result<(f64, f64, Option<f64>)> {
    let m = members.len();
    if m < 2 {
        return Err(Error::domain(format!("an ensemble needs at least 2 members, got {m}")));
    }
    if let Some(x) = members.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("ensemble member {x}")));
    }
    // shifted by the first member so identical members give exactly zero
    let x0 = members[0];
    let mean = x0 + members.iter().map(|x| x - x0).sum::<f64>() / m as f64;
    let variance = members.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64;
    let cv = (mean > CV_MIN_MEAN).then(|| variance.sqrt() / mean);
    Ok((mean, variance, cv))
}

/// Fills covariates and land cover the query lacks from the nearest sensor
/// record in `pool`.
pub fn complete_query(point: &mut QueryPoint, pool: &SensorPool, records: &[SensorRecord]) {
    if let Some(e) = pool.nearest(point.lat, point.lon, point.date) {
        point.fill_from(&records[e.record]);
    }
}

/// Pool positions member `j` uses.
fn member_subset(
    pool: &SensorPool,
    candidates: &[usize],
    point: &QueryPoint,
    policy: SubsetPolicy,
    rng_path: (u64, u64, u64),
) -> Result<Vec<usize>> {
    Ok(match policy {
        SubsetPolicy::All => candidates.to_vec(),
        SubsetPolicy::Nearest { n } => {
            let q = encode_latlon(point.lat, point.lon)?;
            let mut by_d: Vec<(f64, usize)> = candidates
                .iter()
                .map(|&k| (q.chord_distance(&pool.entries[k].coord), k))
                .collect();
            by_d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            by_d.into_iter().take(n).map(|(_, k)| k).collect()
        }
        SubsetPolicy::Gaussian { n, sigma } => {
            let q = encode_latlon(point.lat, point.lon)?;
            let coords: Vec<_> = candidates.iter().map(|&k| pool.entries[k].coord).collect();
            let (seed, id, j) = rng_path;
            let mut rng = derived_rng(seed, &[MEMBER_STREAM, id, j]);
            sample_nearby_sensors(&q, &coords, n, sigma, &mut rng)
                .into_iter()
                .map(|p| candidates[p])
                .collect()
        }
    })
}

/// Back-transformed predictions of the `M` ensemble members for one query.
/// Member `j` draws its subset from the stream `(seed, query_id, j)`.
/// `exclude_site` removes a site's own sensors from the candidates.
pub fn mc_members(
    model: &Model,
    pool: &SensorPool,
    point: &QueryPoint,
    exclude_site: Option<&str>,
    settings: &McSettings,
    query_id: u64,
) -> Result<Vec<f64>> {
    if settings.m < 2 {
        return Err(Error::domain(format!("M must be at least 2, got {}", settings.m)));
    }
    let candidates = pool.candidates(point.date, exclude_site);
    if candidates.is_empty() {
        return Err(Error::data(format!("no sensor reports on {}", format_date(point.date))));
    }
    let query = model.query_token(point)?;
    if settings.policy.is_degenerate() {
        let subset = member_subset(pool, &candidates, point, settings.policy, (0, 0, 0))?;
        let v = model.predict(&pool.tokens(&subset), &query)?.value;
        return Ok(vec![v; settings.m]);
    }
    (0..settings.m as u64)
        .map(|j| {
            let subset = member_subset(pool, &candidates, point, settings.policy, (settings.seed, query_id, j))?;
            Ok(model.predict(&pool.tokens(&subset), &query)?.value)
        })
        .collect()
}

pub fn mc_predict(
    model: &Model,
    pool: &SensorPool,
    point: &QueryPoint,
    exclude_site: Option<&str>,
    settings: &McSettings,
    query_id: u64,
) -> Result<PredictionWithUncertainty> {
    let members = mc_members(model, pool, point, exclude_site, settings, query_id)?;
    let (mean, variance, cv) = summarize_members(&members)?;
    Ok(PredictionWithUncertainty {
        lat: point.lat,
        lon: point.lon,
        date: point.date,
        mean,
        variance,
        cv,
        m: settings.m,
    })
}

/// [`mc_predict`] over many queries in parallel; query `i` uses id `i`.
pub fn cv_field(
    model: &Model,
    pool: &SensorPool,
    points: &[(QueryPoint, Option<String>)],
    settings: &McSettings,
) -> Result<Vec<PredictionWithUncertainty>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, (p, ex))| mc_predict(model, pool, p, ex.as_deref(), settings, i as u64))
        .collect()
}

/// Writes `lat,lon,date,mean,variance,cv,m`; a missing CV is an empty field.
pub fn write_uncertainty_csv(rows: &[PredictionWithUncertainty], path: &Path) -> Result<()> {
    write_atomic(path, &uncertainty_csv(rows)?)
}

pub fn uncertainty_csv(rows: &[PredictionWithUncertainty]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lat", "lon", "date", "mean", "variance", "cv", "m"])?;
    for r in rows {
        w.write_record([
            r.lat.to_string(),
            r.lon.to_string(),
            format_date(r.date),
            format!("{:.9e}", r.mean),
            format!("{:.9e}", r.variance),
            r.cv.map(|c| format!("{c:.9e}")).unwrap_or_default(),
            r.m.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::io("uncertainty csv", e.into_error()))
}
