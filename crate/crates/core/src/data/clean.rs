use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::record::{SensorRecord, PM25_DROP_BELOW};

/// Removes records whose PM2.5 is below the log-transform threshold.
/// Returns the kept records and the number dropped.
pub fn drop_low_concentrations(records: Vec<SensorRecord>) -> (Vec<SensorRecord>, usize) {
    let before = records.len();
    let kept: Vec<SensorRecord> = records
        .into_iter()
        .filter(|r| r.pm25 >= PM25_DROP_BELOW)
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Collapses colocated monitors into one record per `(site_id, date)` with
/// the mean concentration. Output keeps first-appearance order; covariates
/// come from the first duplicate.
pub fn aggregate_colocated(records: Vec<SensorRecord>) -> Result<Vec<SensorRecord>> {
    let mut site_coords: HashMap<String, (f64, f64)> = HashMap::new();
    let mut slot: HashMap<(String, i64), usize> = HashMap::new();
    let mut out: Vec<SensorRecord> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();

    for r in records {
        match site_coords.get(&r.site_id) {
            Some(&(lat, lon)) if lat != r.lat || lon != r.lon => {
                return Err(Error::data(format!(
                    "site `{}` reported at ({lat}, {lon}) and ({}, {})",
                    r.site_id, r.lat, r.lon
                )));
            }
            Some(_) => {}
            None => {
                site_coords.insert(r.site_id.clone(), (r.lat, r.lon));
            }
        }
        let key = (r.site_id.clone(), r.date);
        match slot.get(&key) {
            Some(&i) => {
                sums[i].0 += r.pm25;
                sums[i].1 += 1;
            }
            None => {
                slot.insert(key, out.len());
                sums.push((r.pm25, 1));
                out.push(r);
            }
        }
    }
    for (r, (sum, n)) in out.iter_mut().zip(sums) {
        r.pm25 = sum / n as f64;
    }
    Ok(out)
}
