//! Lagged PM2.5 features with two-stage gap filling.
//!
//! Missing days in a site's trailing window are filled from neighbouring
//! sites by inverse-distance-squared weighting, then by linear interpolation
//! along the site's own series, and finally by padding with the current value.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::scaler::ScalerParams;
use crate::error::Result;
use crate::geo::haversine_km;
use crate::record::{Day, SensorRecord};

/// Search radii for neighbour lookup, tried in order.
pub const IDW_RADII_KM: [f64; 5] = [5.0, 10.0, 20.0, 35.0, 50.0];
/// At most this many nearest neighbours contribute to one estimate.
pub const IDW_MAX_NEIGHBORS: usize = 32;
/// Neighbours closer than this (1 m) are returned directly.
const COINCIDENT_KM: f64 = 0.001;

/// A neighbour observation: `(lat, lon, value)`.
pub type IdwPoint = (f64, f64, f64);

/// IDW2 estimate at `target` from same-day observations, expanding the search
/// radius until at least one neighbour is found. `None` when nothing lies
/// within the largest radius.
pub fn idw2_interpolate(target: (f64, f64), candidates: &[IdwPoint]) -> Option<f64> {
    let mut dist: Vec<(f64, f64)> = candidates
        .iter()
        .map(|&(lat, lon, v)| (haversine_km(target, (lat, lon)), v))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    for radius in IDW_RADII_KM {
        let within = dist.partition_point(|(d, _)| *d <= radius);
        if within == 0 {
            continue;
        }
        return idw2_sorted(&dist[..within.min(IDW_MAX_NEIGHBORS)]);
    }
    None
}

/// Plain IDW2 over every point, with no search radius. `None` when there
/// are no points.
pub fn idw2_estimate(target: (f64, f64), points: &[IdwPoint]) -> Option<f64> {
    let mut dist: Vec<(f64, f64)> = points
        .iter()
        .map(|&(lat, lon, v)| (haversine_km(target, (lat, lon)), v))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    idw2_sorted(&dist)
}

/// `(distance, value)` pairs sorted by distance.
fn idw2_sorted(used: &[(f64, f64)]) -> Option<f64> {
    let first = used.first()?;
    if first.0 < COINCIDENT_KM {
        return Some(first.1);
    }
    let (num, den) = used.iter().fold((0.0, 0.0), |(n, d), &(dk, v)| {
        let w = 1.0 / (dk * dk);
        (n + v * w, d + w)
    });
    Some(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LagSource {
    Observed,
    Idw2,
    Linear,
    Padded,
}

impl LagSource {
    pub fn code(self) -> char {
        match self {
            LagSource::Observed => 'O',
            LagSource::Idw2 => 'I',
            LagSource::Linear => 'L',
            LagSource::Padded => 'P',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Some(match c {
            'O' => LagSource::Observed,
            'I' => LagSource::Idw2,
            'L' => LagSource::Linear,
            'P' => LagSource::Padded,
            _ => return None,
        })
    }
}

/// Trailing PM2.5 window for one record, most recent day first.
#[derive(Debug, Clone, PartialEq)]
pub struct LagVector {
    /// Log-scaled values.
    pub values: Vec<f64>,
    /// The same values in µg/m³.
    pub raw: Vec<f64>,
    pub provenance: Vec<LagSource>,
}

impl LagVector {
    pub fn from_raw(raw: Vec<f64>, provenance: Vec<LagSource>, scaler: &ScalerParams) -> Result<Self> {
        let values = raw.iter().map(|&v| scaler.apply(v)).collect::<Result<Vec<_>>>()?;
        Ok(LagVector {
            values,
            raw,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn provenance_string(&self) -> String {
        self.provenance.iter().map(|p| p.code()).collect()
    }
}

/// Indexes a record table by site series and by day for lag construction.
pub struct LagBuilder<'a> {
    records: &'a [SensorRecord],
    series: HashMap<&'a str, BTreeMap<Day, f64>>,
    by_day: HashMap<Day, Vec<usize>>,
}

impl<'a> LagBuilder<'a> {
    pub fn new(records: &'a [SensorRecord]) -> Self {
        let mut series: HashMap<&str, BTreeMap<Day, f64>> = HashMap::new();
        let mut by_day: HashMap<Day, Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            series.entry(r.site_id.as_str()).or_default().insert(r.date, r.pm25);
            by_day.entry(r.date).or_default().push(i);
        }
        LagBuilder {
            records,
            series,
            by_day,
        }
    }

    /// Builds the window for `record`, which must be one of the indexed
    /// records or at least carry a current-day PM2.5 value.
    pub fn build(&self, record: &SensorRecord, window: usize, scaler: &ScalerParams) -> Result<LagVector> {
        let own = self.series.get(record.site_id.as_str());
        let mut raw = Vec::with_capacity(window);
        let mut provenance = Vec::with_capacity(window);
        for k in 1..=window as i64 {
            let day = record.date - k;
            if let Some(&v) = own.and_then(|s| s.get(&day)) {
                raw.push(v);
                provenance.push(LagSource::Observed);
                continue;
            }
            let neighbours: Vec<IdwPoint> = self
                .by_day
                .get(&day)
                .into_iter()
                .flatten()
                .map(|&i| &self.records[i])
                .filter(|r| r.site_id != record.site_id)
                .map(|r| (r.lat, r.lon, r.pm25))
                .collect();
            if let Some(v) = idw2_interpolate((record.lat, record.lon), &neighbours) {
                raw.push(v);
                provenance.push(LagSource::Idw2);
                continue;
            }
            if let Some(v) = own.and_then(|s| linear_in_series(s, day, record.date, record.pm25)) {
                raw.push(v);
                provenance.push(LagSource::Linear);
                continue;
            }
            raw.push(record.pm25);
            provenance.push(LagSource::Padded);
        }
        LagVector::from_raw(raw, provenance, scaler)
    }
}

/// Linear interpolation at `day` between the last observation before it and
/// the first observation after it, looking no further ahead than `current`.
fn linear_in_series(series: &BTreeMap<Day, f64>, day: Day, current: Day, current_value: f64) -> Option<f64> {
    let (&d0, &v0) = series.range(..day).next_back()?;
    let (d1, v1) = series
        .range(day + 1..current)
        .next()
        .map(|(&d, &v)| (d, v))
        .unwrap_or((current, current_value));
    let t = (day - d0) as f64 / (d1 - d0) as f64;
    Some(v0 + (v1 - v0) * t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scaler::{fit_scaler, ScalerKind};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn log_scaler() -> ScalerParams {
        fit_scaler(ScalerKind::Log, &[], None).unwrap()
    }

    /// Offsets a point due north by `km`.
    fn north(lat: f64, km: f64) -> f64 {
        lat + (km / crate::geo::EARTH_RADIUS_KM).to_degrees()
    }

    #[test]
    fn idw_weight_arithmetic() {
        let t = (40.0, -105.0);
        let c = [(north(40.0, 1.0), -105.0, 2.0), (north(40.0, 2.0), -105.0, 4.0)];
        // (2·1 + 4·0.25) / 1.25
        assert_abs_diff_eq!(idw2_interpolate(t, &c).unwrap(), 2.4, epsilon = 1e-9);
        assert_eq!(idw2_interpolate(t, &c[..1]).unwrap(), 2.0);
        assert_eq!(idw2_interpolate(t, &[]), None);
        assert_eq!(idw2_interpolate(t, &[(north(40.0, 60.0), -105.0, 1.0)]), None);
        // coincident neighbour wins outright
        assert_eq!(idw2_interpolate(t, &[(40.0, -105.0, 7.0), (north(40.0, 1.0), -105.0, 1.0)]), Some(7.0));
    }

    #[test]
    fn idw_caps_neighbour_count() {
        let t = (40.0, -105.0);
        // 40 neighbours at 0.1..4.0 km; the far 8 carry a distinct value
        let c: Vec<IdwPoint> = (1..=40)
            .map(|i| (north(40.0, 0.1 * i as f64), -105.0, if i > 32 { 1000.0 } else { 1.0 }))
            .collect();
        assert_abs_diff_eq!(idw2_interpolate(t, &c).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn idw_expands_radius() {
        let t = (40.0, -105.0);
        let c = [(north(40.0, 30.0), -105.0, 3.0), (north(40.0, 45.0), -105.0, 9.0)];
        // nothing within 20 km, first hit at the 35 km ring
        assert_eq!(idw2_interpolate(t, &c).unwrap(), 3.0);
    }

    #[test]
    fn full_history_is_observed() {
        let recs: Vec<SensorRecord> = (0..20)
            .map(|d| SensorRecord::new("a", 40.0, -105.0, d, 1.0 + d as f64))
            .collect();
        let b = LagBuilder::new(&recs);
        let lag = b.build(&recs[19], 15, &log_scaler()).unwrap();
        assert_eq!(lag.len(), 15);
        assert!(lag.provenance.iter().all(|p| *p == LagSource::Observed));
        assert_eq!(lag.raw[0], 19.0);
        assert_eq!(lag.raw[14], 5.0);
        assert_abs_diff_eq!(lag.values[0], 19f64.log10(), epsilon = 1e-15);
    }

    #[test]
    fn empty_history_pads_current() {
        let recs = vec![SensorRecord::new("a", 40.0, -105.0, 100, 8.0)];
        let s = log_scaler();
        let lag = LagBuilder::new(&recs).build(&recs[0], 15, &s).unwrap();
        assert!(lag.provenance.iter().all(|p| *p == LagSource::Padded));
        assert!(lag.raw.iter().all(|v| *v == 8.0));
        assert!(lag.values.iter().all(|v| *v == s.apply(8.0).unwrap()));
    }

    #[test]
    fn gap_filled_from_neighbours_then_series() {
        let mut recs = vec![
            SensorRecord::new("a", 40.0, -105.0, 10, 6.0),
            SensorRecord::new("a", 40.0, -105.0, 7, 3.0),
            // neighbours on day 9 only
            SensorRecord::new("b", north(40.0, 1.0), -105.0, 9, 2.0),
            SensorRecord::new("c", north(40.0, 2.0), -105.0, 9, 4.0),
        ];
        recs.push(SensorRecord::new("far", 45.0, -105.0, 8, 100.0));
        let lag = LagBuilder::new(&recs).build(&recs[0], 5, &log_scaler()).unwrap();
        assert_eq!(
            lag.provenance,
            vec![
                LagSource::Idw2,     // day 9
                LagSource::Linear,   // day 8, between day 7 (3.0) and day 10 (6.0)
                LagSource::Observed, // day 7
                LagSource::Padded,   // day 6, nothing earlier
                LagSource::Padded,
            ]
        );
        assert_abs_diff_eq!(lag.raw[0], 2.4, epsilon = 1e-9);
        assert_abs_diff_eq!(lag.raw[1], 4.0, epsilon = 1e-12);
        assert_eq!(lag.raw[2], 3.0);
        assert_eq!(lag.raw[3], 6.0);
    }

    fn brute_force_idw(t: (f64, f64), c: &[IdwPoint]) -> f64 {
        let (mut n, mut d) = (0.0, 0.0);
        for &(lat, lon, v) in c {
            let dist = haversine_km(t, (lat, lon));
            n += v / (dist * dist);
            d += 1.0 / (dist * dist);
        }
        n / d
    }

    proptest! {
        #[test]
        fn idw_matches_all_pairs_oracle(
            pts in prop::collection::vec((0.005f64..0.03, -0.03f64..0.03, 0.1f64..100.0), 1..32),
        ) {
            // every candidate within 5 km and at most 32 of them
            let t = (40.0, -105.0);
            let c: Vec<IdwPoint> = pts.iter().map(|&(dl, dn, v)| (40.0 + dl, -105.0 + dn, v)).collect();
            let got = idw2_interpolate(t, &c).unwrap();
            let want = brute_force_idw(t, &c);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        }

        #[test]
        fn lag_window_always_complete(days in prop::collection::btree_set(0i64..40, 1..25), window in 1usize..20) {
            let recs: Vec<SensorRecord> = days.iter().map(|&d| SensorRecord::new("a", 40.0, -105.0, d, 1.0 + d as f64)).collect();
            let b = LagBuilder::new(&recs);
            for r in &recs {
                let lag = b.build(r, window, &log_scaler()).unwrap();
                prop_assert_eq!(lag.len(), window);
                prop_assert!(lag.values.iter().all(|v| v.is_finite()));
            }
        }
    }
}
