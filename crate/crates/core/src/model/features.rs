//! Token layouts and assembly from records and query points.

use serde::{Deserialize, Serialize};

use crate::config::{short_hash, FeatureSetKind, RunConfig};
use crate::data::{LagVector, ScalerSet, LAND_COVER, PM25, TIME};
use crate::error::{Error, Result};
use crate::geo::{encode_latlon, fourier_encode};
use crate::record::{Day, SensorRecord, COVARIATES};

use super::network::Token;

/// Numeric layout of sensor and query tokens. The land-cover embedding is
/// appended inside the network and is not listed here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub feature_set: FeatureSetKind,
    pub lag_window: usize,
    pub fourier_bands: usize,
    pub fourier_period: f64,
    pub embed_dim: usize,
    pub sensor_fields: Vec<String>,
    pub query_fields: Vec<String>,
}

/// Full width of a minimal sensor token, embedding included.
pub const fn minimal_sensor_token_width(lag_window: usize, fourier_bands: usize, embed_dim: usize) -> usize {
    1 + lag_window + 1 + 2 * fourier_bands * 3 + embed_dim
}

/// Full width of a minimal query token, embedding included.
pub const fn minimal_query_token_width(fourier_bands: usize, embed_dim: usize) -> usize {
    2 * fourier_bands * 3 + embed_dim
}

fn coord_fields(bands: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(6 * bands);
    for axis in ["x", "y", "z"] {
        out.extend((1..=bands).map(|n| format!("{axis}_sin{n}")));
        out.extend((1..=bands).map(|n| format!("{axis}_cos{n}")));
    }
    out
}

impl FeatureSchema {
    pub fn new(config: &RunConfig) -> Self {
        let full = config.feature_set == FeatureSetKind::Full;
        let covs = || COVARIATES.iter().map(|c| c.to_string());

        let mut sensor_fields = vec![PM25.to_string()];
        sensor_fields.extend((1..=config.lag_window).map(|k| format!("lag{k}")));
        sensor_fields.push(TIME.into());
        if full {
            sensor_fields.extend(covs());
        }
        sensor_fields.extend(coord_fields(config.fourier_bands));

        let mut query_fields = Vec::new();
        if full {
            query_fields.push(TIME.into());
            query_fields.extend(covs());
        }
        query_fields.extend(coord_fields(config.fourier_bands));

        FeatureSchema {
            feature_set: config.feature_set,
            lag_window: config.lag_window,
            fourier_bands: config.fourier_bands,
            fourier_period: config.fourier_period,
            embed_dim: config.embed_dim,
            sensor_fields,
            query_fields,
        }
    }

    pub fn sensor_width(&self) -> usize {
        self.sensor_fields.len()
    }

    pub fn query_width(&self) -> usize {
        self.query_fields.len()
    }

    pub fn sensor_token_width(&self) -> usize {
        self.sensor_width() + self.embed_dim
    }

    pub fn query_token_width(&self) -> usize {
        self.query_width() + self.embed_dim
    }

    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("schema serializes"))
    }

    fn push_coords(&self, lat: f64, lon: f64, out: &mut Vec<f64>) -> Result<()> {
        let c = encode_latlon(lat, lon)?;
        for v in c.encoder_inputs() {
            out.extend(fourier_encode(v, self.fourier_bands, self.fourier_period)?);
        }
        Ok(())
    }
}

fn class_of(land_cover: Option<i64>, scalers: &ScalerSet) -> Result<usize> {
    let lc = land_cover.ok_or(Error::MissingCovariate("land_cover"))?;
    scalers.get(LAND_COVER)?.class_index(lc)
}

fn push_covariates(values: impl Fn(&str) -> Option<f64>, scalers: &ScalerSet, out: &mut Vec<f64>) -> Result<()> {
    for name in COVARIATES {
        let v = values(name).ok_or(Error::MissingCovariate(name))?;
        out.push(scalers.get(name)?.apply(v)?);
    }
    Ok(())
}

/// Builds a sensor token in the schema's field order.
pub fn assemble_sensor_token(
    record: &SensorRecord,
    lag: &LagVector,
    scalers: &ScalerSet,
    schema: &FeatureSchema,
) -> Result<Token> {
    if lag.len() != schema.lag_window {
        return Err(Error::Shape(format!(
            "lag window has {} entries, schema expects {}",
            lag.len(),
            schema.lag_window
        )));
    }
    let mut numeric = Vec::with_capacity(schema.sensor_width());
    numeric.push(scalers.get(PM25)?.apply(record.pm25)?);
    numeric.extend_from_slice(&lag.values);
    numeric.push(scalers.get(TIME)?.apply(record.date as f64)?);
    if schema.feature_set == FeatureSetKind::Full {
        push_covariates(|n| record.covariate(n), scalers, &mut numeric)?;
    }
    schema.push_coords(record.lat, record.lon, &mut numeric)?;
    debug_assert_eq!(numeric.len(), schema.sensor_width());
    if let Some(i) = numeric.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sensor feature `{}`", schema.sensor_fields[i])));
    }
    Ok(Token {
        numeric,
        class: class_of(record.land_cover, scalers)?,
    })
}

/// A location to predict at. It carries no PM2.5 by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub lat: f64,
    pub lon: f64,
    pub date: Day,
    pub land_cover: Option<i64>,
    /// In [`COVARIATES`] order.
    pub covariates: [Option<f64>; 10],
}

impl QueryPoint {
    pub fn new(lat: f64, lon: f64, date: Day) -> Result<Self> {
        crate::record::validate_latlon(lat, lon)?;
        Ok(QueryPoint {
            lat,
            lon,
            date,
            land_cover: None,
            covariates: [None; 10],
        })
    }

    /// The static part of a record: location, date, land cover, covariates.
    pub fn from_record(r: &SensorRecord) -> Self {
        let mut covariates = [None; 10];
        for (slot, name) in covariates.iter_mut().zip(COVARIATES) {
            *slot = r.covariate(name);
        }
        QueryPoint {
            lat: r.lat,
            lon: r.lon,
            date: r.date,
            land_cover: r.land_cover,
            covariates,
        }
    }

    pub fn covariate(&self, name: &str) -> Option<f64> {
        COVARIATES.iter().position(|c| *c == name).and_then(|i| self.covariates[i])
    }

    /// Fills land cover and covariates the point lacks from `donor`.
    pub fn fill_from(&mut self, donor: &SensorRecord) {
        if self.land_cover.is_none() {
            self.land_cover = donor.land_cover;
        }
        for (slot, name) in self.covariates.iter_mut().zip(COVARIATES) {
            if slot.is_none() {
                *slot = donor.covariate(name);
            }
        }
    }
}

pub fn assemble_query_token(point: &QueryPoint, scalers: &ScalerSet, schema: &FeatureSchema) -> Result<Token> {
    let mut numeric = Vec::with_capacity(schema.query_width());
    if schema.feature_set == FeatureSetKind::Full {
        numeric.push(scalers.get(TIME)?.apply(point.date as f64)?);
        push_covariates(|n| point.covariate(n), scalers, &mut numeric)?;
    }
    schema.push_coords(point.lat, point.lon, &mut numeric)?;
    if let Some(i) = numeric.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("query feature `{}`", schema.query_fields[i])));
    }
    Ok(Token {
        numeric,
        class: class_of(point.land_cover, scalers)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn minimal_widths() {
        let s = FeatureSchema::new(&RunConfig::default());
        assert_eq!(s.sensor_token_width(), 1 + 15 + 1 + 2 * 8 * 3 + 12);
        assert_eq!(s.sensor_token_width(), minimal_sensor_token_width(15, 8, 12));
        assert_eq!(s.query_token_width(), minimal_query_token_width(8, 12));
        assert!(!s.query_fields.iter().any(|f| f == PM25 || f.starts_with("lag")));
    }

    #[test]
    fn full_adds_ten_covariates() {
        let min = FeatureSchema::new(&RunConfig::default());
        let full = FeatureSchema::new(&RunConfig {
            feature_set: FeatureSetKind::Full,
            ..RunConfig::default()
        });
        assert_eq!(full.sensor_width(), min.sensor_width() + 10);
        assert_eq!(full.query_width(), min.query_width() + 11);
        assert!(full.sensor_width() > min.sensor_width() && full.query_width() > min.query_width());
        assert_ne!(full.hash(), min.hash());
        for w in [full, min] {
            assert!(!w.query_fields.iter().any(|f| f == PM25 || f.starts_with("lag")));
        }
    }
}
