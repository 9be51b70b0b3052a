//! Leave-one-region-out splits.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::config::{DatasetSplit, RunConfig, SplitPart};
use crate::data::{IngestReport, PreparedDataset, SplitKind};
use crate::error::{Error, Result};
use crate::model::{Model, SensorPool};
use crate::record::SensorRecord;
use crate::train::{TrainOptions, Trainer};
use crate::uncertainty::McSettings;

use super::metrics::Metrics;
use super::report::{evaluate_records, row_metrics, EvalRow};

/// A held-out region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionMask {
    /// Inclusive latitude/longitude box.
    Box {
        lat_min: f64,
        lat_max: f64,
        lon_min: f64,
        lon_max: f64,
    },
    Sites { ids: BTreeSet<String> },
}

impl RegionMask {
    pub fn contains(&self, r: &SensorRecord) -> bool {
        match self {
            RegionMask::Box {
                lat_min,
                lat_max,
                lon_min,
                lon_max,
            } => (*lat_min..=*lat_max).contains(&r.lat) && (*lon_min..=*lon_max).contains(&r.lon),
            RegionMask::Sites { ids } => ids.contains(&r.site_id),
        }
    }

    /// Parses `lat_min,lat_max,lon_min,lon_max`.
    pub fn parse_box(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("region `{s}` is not four numbers")))?;
        let [lat_min, lat_max, lon_min, lon_max] = v[..] else {
            return Err(Error::Config(format!("region `{s}` needs lat_min,lat_max,lon_min,lon_max")));
        };
        if !(lat_min <= lat_max && lon_min <= lon_max) {
            return Err(Error::Config(format!("region `{s}` has inverted bounds")));
        }
        Ok(RegionMask::Box {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        })
    }
}

/// Record indices inside and outside a region. Every record of a site
/// falls on the same side, decided by its first record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LosoSplit {
    pub included: Vec<usize>,
    pub excluded: Vec<usize>,
}

pub fn loso_split(records: &[SensorRecord], region: &RegionMask) -> Result<LosoSplit> {
    let mut side: std::collections::HashMap<&str, bool> = std::collections::HashMap::new();
    let mut split = LosoSplit {
        included: Vec::new(),
        excluded: Vec::new(),
    };
    for (i, r) in records.iter().enumerate() {
        let out = *side.entry(&r.site_id).or_insert_with(|| region.contains(r));
        if out {
            split.excluded.push(i);
        } else {
            split.included.push(i);
        }
    }
    if split.excluded.is_empty() {
        return Err(Error::data("the held-out region contains no records"));
    }
    if split.included.is_empty() {
        return Err(Error::data("the held-out region contains every record"));
    }
    Ok(split)
}

/// Outcome of a region-exclusion run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LosoReport {
    /// Held-out records inside the region, scored by both models.
    pub n_eval: usize,
    /// Model trained without the region.
    pub excluded: Metrics,
    /// Model trained with the region's other sites.
    pub included: Metrics,
    pub batches_audited: usize,
    /// Training examples that touched a region record; zero when the
    /// exclusion holds.
    pub leaked_examples: usize,
    pub config_hash: String,
    pub seed: u64,
}

pub struct LosoRun {
    pub report: LosoReport,
    pub excluded_rows: Vec<EvalRow>,
    pub included_rows: Vec<EvalRow>,
    pub excluded_model: Model,
    pub included_model: Model,
}

/// Trains twice on a site-level split of `records`: once as is and once
/// with every site in `region` removed (from training, validation and lag
/// filling alike). Both models are then scored on the test-split records
/// inside the region, with sensors from the first run's training part, so
/// only the weights differ between the two scores.
pub fn run_loso(records: Vec<SensorRecord>, region: &RegionMask, config: &RunConfig) -> Result<LosoRun> {
    let full = PreparedDataset::preprocess(records, config, SplitKind::Site, IngestReport::default())?;
    let side = loso_split(&full.records, region)?;
    let in_region: std::collections::HashSet<usize> = side.excluded.iter().copied().collect();
    let eval: Vec<usize> = full.part(SplitPart::Test).iter().copied().filter(|i| in_region.contains(i)).collect();
    if eval.is_empty() {
        return Err(Error::data("no test-split site lies inside the region"));
    }

    // reduced dataset: region records dropped before lags and scalers
    let keep: Vec<usize> = side.included.clone();
    let assignment = full.split.assignment(full.records.len());
    let parts: Vec<SplitPart> = keep.iter().map(|&i| assignment[i].expect("every record has a part")).collect();
    let reduced = PreparedDataset::assemble(
        keep.iter().map(|&i| full.records[i].clone()).collect(),
        DatasetSplit::from_assignment(&parts),
        SplitKind::Site,
        config,
        IngestReport::default(),
    )?;

    let train = |data: &PreparedDataset, audit: bool| -> Result<(Model, usize, usize)> {
        let trainer = Trainer::new(data, config)?;
        let (mut batches, mut leaked) = (0usize, 0usize);
        let mut hook = |b: &crate::train::TrainBatch| {
            batches += 1;
            if audit {
                leaked += b
                    .examples
                    .iter()
                    .filter(|e| std::iter::once(&e.query).chain(&e.sensors).any(|&k| region.contains(&data.records[k])))
                    .count();
            }
        };
        let report = trainer.run_with(&TrainOptions::default(), &mut hook).map_err(|f| f.error)?;
        Ok((report.model, batches, leaked))
    };
    let (excluded_model, batches, leaked) = train(&reduced, true)?;
    if leaked > 0 {
        log::error!("{leaked} training examples touched the held-out region");
    }
    let (included_model, _, _) = train(&full, false)?;

    let settings = McSettings::from_config(config);
    let score = |model: &Model| -> Result<Vec<EvalRow>> {
        let pool = SensorPool::build(&full.records, &full.lags, full.part(SplitPart::Train), &model.scalers, &model.schema)?;
        evaluate_records(model, &pool, &full.records, &eval, &settings)
    };
    let excluded_rows = score(&excluded_model)?;
    let included_rows = score(&included_model)?;
    Ok(LosoRun {
        report: LosoReport {
            n_eval: excluded_rows.len(),
            excluded: row_metrics(&excluded_rows, None)?,
            included: row_metrics(&included_rows, None)?,
            batches_audited: batches,
            leaked_examples: leaked,
            config_hash: config.hash(),
            seed: config.seed,
        },
        excluded_rows,
        included_rows,
        excluded_model,
        included_model,
    })
}
