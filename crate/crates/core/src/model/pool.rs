//! Sensor tokens indexed by day, ready to be sampled or fed to the encoder.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{LagVector, ScalerSet, PM25};
use crate::error::Result;
use crate::geo::{encode_latlon, haversine_km, SphericalCoord};
use crate::record::{Day, SensorRecord};

use super::features::{assemble_sensor_token, FeatureSchema};
use super::network::Token;

#[derive(Debug, Clone)]
pub struct SensorEntry {
    /// Index into the record table the pool was built from.
    pub record: usize,
    pub site_id: String,
    pub lat: f64,
    pub lon: f64,
    pub date: Day,
    pub coord: SphericalCoord,
    pub token: Token,
}

#[derive(Debug, Clone, Default)]
pub struct SensorPool {
    pub entries: Vec<SensorEntry>,
    by_date: BTreeMap<Day, Vec<usize>>,
}

impl SensorPool {
    /// Tokens for `records[i]` for every `i` in `indices`. Lag windows are
    /// rescaled from their raw values with `scalers`, so a pool built for a
    /// model always matches that model's scaling.
    pub fn build(
        records: &[SensorRecord],
        lags: &[LagVector],
        indices: &[usize],
        scalers: &ScalerSet,
        schema: &FeatureSchema,
    ) -> Result<Self> {
        let log = scalers.get(PM25)?;
        let entries: Vec<SensorEntry> = indices
            .par_iter()
            .map(|&i| {
                let r = &records[i];
                let lag = LagVector::from_raw(lags[i].raw.clone(), lags[i].provenance.clone(), log)?;
                Ok(SensorEntry {
                    record: i,
                    site_id: r.site_id.clone(),
                    lat: r.lat,
                    lon: r.lon,
                    date: r.date,
                    coord: encode_latlon(r.lat, r.lon)?,
                    token: assemble_sensor_token(r, &lag, scalers, schema)?,
                })
            })
            .collect::<Result<_>>()?;
        let mut by_date: BTreeMap<Day, Vec<usize>> = BTreeMap::new();
        for (k, e) in entries.iter().enumerate() {
            by_date.entry(e.date).or_default().push(k);
        }
        Ok(SensorPool { entries, by_date })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pool positions of the sensors reporting on `day`.
    pub fn on_date(&self, day: Day) -> &[usize] {
        self.by_date.get(&day).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Sensors reporting on `day`, minus those at `exclude_site`.
    pub fn candidates(&self, day: Day, exclude_site: Option<&str>) -> Vec<usize> {
        self.on_date(day)
            .iter()
            .copied()
            .filter(|&k| exclude_site != Some(self.entries[k].site_id.as_str()))
            .collect()
    }

    pub fn dates(&self) -> impl Iterator<Item = Day> + '_ {
        self.by_date.keys().copied()
    }

    /// Nearest sensor on `day`, or on any day when none reports that day.
    pub fn nearest(&self, lat: f64, lon: f64, day: Day) -> Option<&SensorEntry> {
        let pick = |idx: &mut dyn Iterator<Item = usize>| {
            idx.map(|k| &self.entries[k])
                .min_by(|a, b| haversine_km((lat, lon), (a.lat, a.lon)).total_cmp(&haversine_km((lat, lon), (b.lat, b.lon))))
        };
        pick(&mut self.on_date(day).iter().copied()).or_else(|| pick(&mut (0..self.entries.len())))
    }

    pub fn tokens(&self, positions: &[usize]) -> Vec<Token> {
        positions.iter().map(|&k| self.entries[k].token.clone()).collect()
    }
}
