//! Predictions on held-out records, grouped reports and exports.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{idw2_estimate, write_atomic};
use crate::error::{Error, Result};
use crate::geo::{encode_latlon, hex_index, HexCellId};
use crate::model::{Model, QueryPoint, SensorPool};
use crate::record::{format_date, Day, Season, SensorRecord};
use crate::uncertainty::{complete_query, mc_predict, McSettings};

use super::metrics::{compute_metrics, Metrics, RangeFilter};

/// Hex resolution of the regional breakdown.
pub const REPORT_HEX_RESOLUTION: u8 = 3;

/// One held-out record with its prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub record: usize,
    pub site_id: String,
    pub date: Day,
    pub lat: f64,
    pub lon: f64,
    pub observed: f64,
    /// Ensemble mean.
    pub predicted: f64,
    pub variance: f64,
    pub cv: Option<f64>,
}

/// Predicts every record in `indices` by ensemble mean, using same-day pool
/// sensors from other sites. Records with no such sensor are skipped.
pub fn evaluate_records(
    model: &Model,
    pool: &SensorPool,
    records: &[SensorRecord],
    indices: &[usize],
    settings: &McSettings,
) -> Result<Vec<EvalRow>> {
    let rows: Vec<Option<EvalRow>> = indices
        .par_iter()
        .map(|&i| {
            let r = &records[i];
            if pool.candidates(r.date, Some(&r.site_id)).is_empty() {
                return Ok(None);
            }
            let mut q = QueryPoint::from_record(r);
            complete_query(&mut q, pool, records);
            let p = mc_predict(model, pool, &q, Some(&r.site_id), settings, i as u64)?;
            Ok(Some(EvalRow {
                record: i,
                site_id: r.site_id.clone(),
                date: r.date,
                lat: r.lat,
                lon: r.lon,
                observed: r.pm25,
                predicted: p.mean,
                variance: p.variance,
                cv: p.cv,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// IDW2 from the `n` nearest same-day pool sensors at other sites, or
/// `None` when there are none.
pub fn idw_baseline(pool: &SensorPool, records: &[SensorRecord], record: &SensorRecord, n: usize) -> Result<Option<f64>> {
    let q = encode_latlon(record.lat, record.lon)?;
    let mut near: Vec<(f64, usize)> = pool
        .candidates(record.date, Some(&record.site_id))
        .into_iter()
        .map(|k| (q.chord_distance(&pool.entries[k].coord), k))
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let pts: Vec<_> = near
        .iter()
        .take(n)
        .map(|&(_, k)| {
            let e = &pool.entries[k];
            (e.lat, e.lon, records[e.record].pm25)
        })
        .collect();
    Ok(idw2_estimate((record.lat, record.lon), &pts))
}

pub fn row_metrics(rows: &[EvalRow], filter: Option<RangeFilter>) -> Result<Metrics> {
    let p: Vec<f64> = rows.iter().map(|r| r.predicted).collect();
    let t: Vec<f64> = rows.iter().map(|r| r.observed).collect();
    compute_metrics(&p, &t, filter)
}

/// Metrics for one (season, hex cell) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalCell {
    pub season: Season,
    pub cell: String,
    pub metrics: Metrics,
}

/// Metrics grouped by season and resolution-3 hex cell, in key order.
pub fn seasonal_report(rows: &[EvalRow]) -> Result<Vec<SeasonalCell>> {
    let mut groups: BTreeMap<(Season, HexCellId), Vec<EvalRow>> = BTreeMap::new();
    for r in rows {
        let cell = hex_index(r.lat, r.lon, REPORT_HEX_RESOLUTION)?;
        groups.entry((Season::of(r.date), cell)).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|((season, cell), g)| {
            Ok(SeasonalCell {
                season,
                cell: cell.to_string(),
                metrics: row_metrics(&g, None)?,
            })
        })
        .collect()
}

/// Rounds to `digits` significant digits and prints the shortest decimal
/// that reads back as the rounded value.
pub fn sig_digits(x: f64, digits: usize) -> String {
    if !x.is_finite() || x == 0.0 {
        return format!("{x}");
    }
    let rounded: f64 = format!("{:.*e}", digits - 1, x).parse().expect("formatted float parses");
    format!("{rounded}")
}

pub fn parity_csv(rows: &[EvalRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["date", "lat", "lon", "observed", "predicted"])?;
    for r in rows {
        w.write_record([
            format_date(r.date),
            sig_digits(r.lat, 9),
            sig_digits(r.lon, 9),
            sig_digits(r.observed, 9),
            sig_digits(r.predicted, 9),
        ])?;
    }
    w.into_inner().map_err(|e| Error::io("parity csv", e.into_error()))
}

/// Writes `date,lat,lon,observed,predicted` with 9 significant digits.
pub fn parity_export(rows: &[EvalRow], path: &Path) -> Result<()> {
    write_atomic(path, &parity_csv(rows)?)
}

/// Metrics keyed by split, then range filter, then season (`all` for no
/// restriction).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model_hash: String,
    pub data_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, BTreeMap<String, BTreeMap<String, Metrics>>>,
}

pub const ALL: &str = "all";

impl Summary {
    /// Adds every filter × season cell for one split. Empty cells are left
    /// out.
    pub fn add_split(&mut self, split: &str, rows: &[EvalRow], filters: &[RangeFilter]) -> Result<()> {
        let mut by_filter = BTreeMap::new();
        let keys: Vec<(String, Option<RangeFilter>)> = std::iter::once((ALL.to_string(), None))
            .chain(filters.iter().map(|f| (f.label(), Some(*f))))
            .collect();
        for (label, filter) in keys {
            let mut by_season = BTreeMap::new();
            let selected: Vec<EvalRow> = rows
                .iter()
                .filter(|r| filter.map_or(true, |f| f.contains(r.observed)))
                .cloned()
                .collect();
            if selected.is_empty() {
                continue;
            }
            by_season.insert(ALL.to_string(), row_metrics(&selected, None)?);
            let mut seasons: BTreeMap<Season, Vec<EvalRow>> = BTreeMap::new();
            for r in selected {
                seasons.entry(Season::of(r.date)).or_default().push(r);
            }
            for (s, g) in seasons {
                by_season.insert(s.name().to_string(), row_metrics(&g, None)?);
            }
            by_filter.insert(label, by_season);
        }
        if by_filter.is_empty() {
            return Err(Error::domain(format!("no rows to summarize for split `{split}`")));
        }
        self.metrics.insert(split.to_string(), by_filter);
        Ok(())
    }

    pub fn get(&self, split: &str, filter: &str, season: &str) -> Option<&Metrics> {
        self.metrics.get(split)?.get(filter)?.get(season)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
