use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::config::{seeded_rng, DatasetSplit};
use crate::error::{Error, Result};
use crate::record::SensorRecord;

/// Minimum table size accepted by [`split_dataset`].
pub const MIN_SPLIT_RECORDS: usize = 10;

fn part_sizes(n: usize, fractions: [f64; 3]) -> Result<(usize, usize)> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::domain(format!("split fractions {fractions:?} must sum to 1")));
    }
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    Ok((n_train.min(n), n_val))
}

/// Record-level shuffled split; deterministic under `seed`. Each part is
/// returned in ascending index order.
pub fn split_dataset(n_records: usize, fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if n_records < MIN_SPLIT_RECORDS {
        return Err(Error::data(format!(
            "need at least {MIN_SPLIT_RECORDS} records to split, got {n_records}"
        )));
    }
    let (n_train, n_val) = part_sizes(n_records, fractions)?;
    let mut idx: Vec<usize> = (0..n_records).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let mut split = DatasetSplit {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    };
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Site-level split: every record of a site lands in the same part.
pub fn split_by_site(records: &[SensorRecord], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let mut sites: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        sites.entry(r.site_id.as_str()).or_default().push(i);
    }
    if sites.len() < 3 {
        return Err(Error::data("site-level split needs at least three sites"));
    }
    let (n_train, n_val) = part_sizes(sites.len(), fractions)?;
    let mut order: Vec<&str> = sites.keys().copied().collect();
    order.shuffle(&mut seeded_rng(seed));
    let mut split = DatasetSplit::default();
    for (k, site) in order.iter().enumerate() {
        let target = if k < n_train {
            &mut split.train
        } else if k < n_train + n_val {
            &mut split.val
        } else {
            &mut split.test
        };
        target.extend_from_slice(&sites[site]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
