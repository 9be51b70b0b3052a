//! A cleaned, split and scaled dataset, and its on-disk layout.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::clean::{aggregate_colocated, drop_low_concentrations};
use super::ingest::{parse_stations, IngestReport, STATION_HEADER};
use super::lag::{LagBuilder, LagVector};
use super::scaler::{
    fit_categorical, fit_minmax, fit_scaler, percentile_caps, write_atomic, Caps, ScalerKind, ScalerParams, ScalerSet,
    LOG_FLOOR,
};
use super::split::{split_by_site, split_dataset};
use crate::config::{short_hash, DatasetSplit, RunConfig, SplitPart};
use crate::error::{Error, Result};
use crate::record::{format_date, SensorRecord, COVARIATES};

pub const RECORDS_FILE: &str = "records.csv";
pub const SCALERS_FILE: &str = "scalers.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LAGS_FILE: &str = "lags.csv";

/// Scaler names besides the covariates.
pub const PM25: &str = "pm25";
pub const TIME: &str = "time";
pub const LATLON: &str = "latlon";
pub const LAND_COVER: &str = "land_cover";

/// Which axis the train/val/test split stratifies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Record,
    Site,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Record => "record",
            SplitKind::Site => "site",
        })
    }
}

impl FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "record" => Ok(SplitKind::Record),
            "site" => Ok(SplitKind::Site),
            _ => Err(Error::Config(format!("unknown split kind `{s}` (record|site)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hash of the records table and split assignment.
    pub data_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub split_kind: SplitKind,
    pub lag_window: usize,
    pub n_records: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub ingest: IngestReport,
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub records: Vec<SensorRecord>,
    pub split: DatasetSplit,
    pub scalers: ScalerSet,
    /// One window per record, same order.
    pub lags: Vec<LagVector>,
    pub manifest: Manifest,
}

/// Fits every scaler on the given (training) records. Land-cover classes
/// come from `all` so that no class seen anywhere is unknown at inference.
pub fn fit_scalers(train: &[&SensorRecord], all: &[SensorRecord]) -> Result<ScalerSet> {
    if train.is_empty() {
        return Err(Error::data("cannot fit scalers on an empty training set"));
    }
    let mut set = ScalerSet::default();

    let pm: Vec<f64> = train.iter().map(|r| r.pm25).collect();
    let upper = percentile_caps(&pm).map(|c| c.upper).unwrap_or(f64::MAX).max(LOG_FLOOR);
    set.insert(PM25, fit_scaler(ScalerKind::Log, &pm, Some(Caps::new(LOG_FLOOR, upper)?))?);

    let days: Vec<f64> = train.iter().map(|r| r.date as f64).collect();
    let time = fit_minmax(&days, (0.0, 1.0), None).or_else(|_| fit_minmax(&[days[0], days[0] + 1.0], (0.0, 1.0), None))?;
    set.insert(TIME, time);
    set.insert(LATLON, ScalerParams::LatLon);

    let classes: Vec<i64> = all.iter().filter_map(|r| r.land_cover).collect();
    if !classes.is_empty() {
        set.insert(LAND_COVER, fit_categorical(&classes));
    }

    for name in COVARIATES {
        let v: Vec<f64> = train.iter().filter_map(|r| r.covariate(name)).collect();
        let Some(mut caps) = percentile_caps(&v) else {
            continue;
        };
        let fitted = if name == "elevation" {
            caps.lower = 0.0;
            caps.upper = caps.upper.max(1.0);
            fit_scaler(ScalerKind::MinMax, &v, Some(caps))
        } else {
            fit_scaler(ScalerKind::Standard, &v, Some(caps))
        };
        match fitted {
            Ok(p) => set.insert(name, p),
            Err(e) => log::warn!("no scaler for `{name}`: {e}"),
        }
    }
    Ok(set)
}

/// Computes the lag window of every record against the whole table.
pub fn build_lags(records: &[SensorRecord], window: usize, scalers: &ScalerSet) -> Result<Vec<LagVector>> {
    use rayon::prelude::*;
    let builder = LagBuilder::new(records);
    let log = scalers.get(PM25)?;
    records.par_iter().map(|r| builder.build(r, window, log)).collect()
}

fn records_csv(records: &[SensorRecord], split: &DatasetSplit) -> Result<Vec<u8>> {
    let parts = split.assignment(records.len());
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header: Vec<&str> = STATION_HEADER.to_vec();
        header.push("split");
        w.write_record(&header)?;
        for (r, p) in records.iter().zip(parts) {
            let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            let mut row = vec![
                r.site_id.clone(),
                format!("{}", r.lat),
                format!("{}", r.lon),
                format_date(r.date),
                format!("{}", r.pm25),
                r.land_cover.map(|c| c.to_string()).unwrap_or_default(),
            ];
            row.extend(STATION_HEADER[6..].iter().map(|f| opt(r.covariate(f))));
            row.push(p.map(|p| p.to_string()).unwrap_or_default());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("records.csv", e))?;
    }
    Ok(buf)
}

impl PreparedDataset {
    /// Cleans `records`, splits them, fits scalers on the training part and
    /// builds lag windows.
    pub fn preprocess(
        records: Vec<SensorRecord>,
        config: &RunConfig,
        split_kind: SplitKind,
        ingest: IngestReport,
    ) -> Result<Self> {
        config.validate()?;
        let (records, _) = drop_low_concentrations(records);
        let mut records = aggregate_colocated(records)?;
        for r in &records {
            r.validate()?;
        }
        records.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.site_id.cmp(&b.site_id)));
        let split = match split_kind {
            SplitKind::Record => split_dataset(records.len(), config.split_fractions, config.seed)?,
            SplitKind::Site => split_by_site(&records, config.split_fractions, config.seed)?,
        };
        Self::assemble(records, split, split_kind, config, ingest)
    }

    /// Builds a dataset around an explicit split.
    pub fn assemble(
        records: Vec<SensorRecord>,
        split: DatasetSplit,
        split_kind: SplitKind,
        config: &RunConfig,
        ingest: IngestReport,
    ) -> Result<Self> {
        if split.train.is_empty() {
            return Err(Error::data("training split is empty"));
        }
        let train: Vec<&SensorRecord> = split.train.iter().map(|&i| &records[i]).collect();
        let scalers = fit_scalers(&train, &records)?;
        let lags = build_lags(&records, config.lag_window, &scalers)?;
        let data_hash = short_hash(&records_csv(&records, &split)?);
        let manifest = Manifest {
            data_hash,
            config_hash: config.hash(),
            seed: config.seed,
            split_kind,
            lag_window: config.lag_window,
            n_records: records.len(),
            n_train: split.train.len(),
            n_val: split.val.len(),
            n_test: split.test.len(),
            ingest,
        };
        Ok(PreparedDataset {
            records,
            split,
            scalers,
            lags,
            manifest,
        })
    }

    pub fn part(&self, part: SplitPart) -> &[usize] {
        self.split.part(part)
    }

    /// Writes records (with split column), scalers, lag windows and the
    /// manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(RECORDS_FILE), &records_csv(&self.records, &self.split)?)?;
        self.scalers.save(&dir.join(SCALERS_FILE))?;

        let mut lags = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut lags);
            let mut header = vec!["site_id".to_string(), "date".into(), "provenance".into()];
            header.extend((1..=self.manifest.lag_window).map(|k| format!("lag{k}")));
            w.write_record(&header)?;
            for (r, l) in self.records.iter().zip(&self.lags) {
                let mut row = vec![r.site_id.clone(), format_date(r.date), l.provenance_string()];
                row.extend(l.values.iter().map(|v| format!("{v}")));
                w.write_record(&row)?;
            }
            w.flush().map_err(|e| Error::io(dir.join(LAGS_FILE), e))?;
        }
        write_atomic(&dir.join(LAGS_FILE), &lags)?;

        let mut manifest = serde_json::to_string_pretty(&self.manifest)?;
        manifest.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
    }

    /// Reads a directory written by [`PreparedDataset::save`]. Lag windows
    /// are rebuilt from the records and the stored scalers.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
        let scalers = ScalerSet::load(&dir.join(SCALERS_FILE))?;

        let bytes = read(RECORDS_FILE)?;
        let name = dir.join(RECORDS_FILE).display().to_string();
        let mut rdr = csv::ReaderBuilder::new().from_reader(bytes.as_slice());
        let mut station = Vec::new();
        let mut parts = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut station);
            w.write_record(STATION_HEADER)?;
            let h = rdr.headers()?.clone();
            if h.len() != STATION_HEADER.len() + 1 || &h[STATION_HEADER.len()] != "split" {
                return Err(Error::DataLine {
                    path: name,
                    line: 1,
                    msg: "expected station header plus `split`".into(),
                });
            }
            for row in rdr.records() {
                let row = row?;
                let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
                parts.push(row[STATION_HEADER.len()].parse::<SplitPart>().map_err(|e| Error::DataLine {
                    path: name.clone(),
                    line,
                    msg: e.to_string(),
                })?);
                w.write_record(row.iter().take(STATION_HEADER.len()))?;
            }
            w.flush().map_err(|e| Error::io(dir, e))?;
        }
        let mut report = IngestReport::default();
        let records = parse_stations(station.as_slice(), &name, &mut report)?;
        let split = DatasetSplit::from_assignment(&parts);
        let data_hash = short_hash(&records_csv(&records, &split)?);
        if data_hash != manifest.data_hash {
            return Err(Error::data(format!(
                "{name}: content hash {data_hash} does not match manifest {}",
                manifest.data_hash
            )));
        }
        let lags = build_lags(&records, manifest.lag_window, &scalers)?;
        Ok(PreparedDataset {
            records,
            split,
            scalers,
            lags,
            manifest,
        })
    }
}
