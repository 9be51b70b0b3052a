//! A trained model with its configuration, scalers and feature schema, and
//! its binary file format.
//!
//! Layout: `GRIDFREE` magic, u32 version, u64 header length, JSON header,
//! u64 parameter count, then the parameters as little-endian f64.

use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, seeded_rng, RunConfig};
use crate::data::{write_atomic, ScalerSet, LAND_COVER, PM25};
use crate::error::{Error, Result};

use super::features::{assemble_query_token, FeatureSchema, QueryPoint};
use super::layers::TensorSpec;
use super::network::{ModelDims, Network, Token};

pub const MODEL_MAGIC: &[u8; 8] = b"GRIDFREE";
pub const MODEL_VERSION: u32 = 1;

/// Stream tag for parameter initialization.
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: String,
    config_hash: String,
    seed: u64,
    schema: FeatureSchema,
    schema_hash: String,
    data_hash: String,
    dims: ModelDims,
    scalers: ScalerSet,
    tensors: Vec<TensorSpec>,
}

/// One back-transformed prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// µg/m³.
    pub value: f64,
    /// Raw network output, log10 µg/m³.
    pub log10: f64,
    /// Set when the back-transform underflowed and the value was clamped to 0.
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub schema: FeatureSchema,
    pub scalers: ScalerSet,
    pub net: Network,
    pub params: Vec<f64>,
    pub data_hash: String,
}

impl Model {
    pub fn dims(config: &RunConfig, schema: &FeatureSchema, n_classes: usize) -> ModelDims {
        ModelDims {
            sensor_width: schema.sensor_width(),
            query_width: schema.query_width(),
            n_classes,
            embed_dim: config.embed_dim,
            latent_count: config.latent_count,
            latent_dim: config.latent_dim,
            n_heads: config.n_heads,
            n_blocks: config.n_blocks,
            recycle_count: config.recycle_count,
        }
    }

    /// A freshly initialized model; the initialization depends only on the
    /// config seed.
    pub fn new(config: &RunConfig, scalers: ScalerSet, data_hash: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let schema = FeatureSchema::new(config);
        let n_classes = scalers.get(LAND_COVER)?.n_classes();
        let net = Network::new(Self::dims(config, &schema, n_classes))?;
        let params = net.init_params(&mut seeded_rng(derive_seed(config.seed, &[INIT_STREAM])));
        Ok(Model {
            config: config.clone(),
            schema,
            scalers,
            net,
            params,
            data_hash: data_hash.into(),
        })
    }

    pub fn query_token(&self, point: &QueryPoint) -> Result<Token> {
        assemble_query_token(point, &self.scalers, &self.schema)
    }

    /// Back-transforms a network output to µg/m³.
    pub fn back_transform(&self, log10: f64) -> Result<Prediction> {
        if !log10.is_finite() {
            return Err(Error::NonFinite(format!("model output {log10}")));
        }
        let value = self.scalers.get(PM25)?.invert(log10)?;
        let clamped = !(value > 0.0);
        Ok(Prediction {
            value: if value.is_finite() { value.max(0.0) } else { f64::MAX },
            log10,
            clamped,
        })
    }

    pub fn predict(&self, sensors: &[Token], query: &Token) -> Result<Prediction> {
        self.back_transform(self.net.forward(&self.params, sensors, query)?)
    }

    /// Several queries against one sensor set; each query is decoded alone.
    pub fn predict_many(&self, sensors: &[Token], queries: &[Token]) -> Result<Vec<Prediction>> {
        self.net
            .forward_many(&self.params, sensors, queries)?
            .into_iter()
            .map(|y| self.back_transform(y))
            .collect()
    }

    fn header(&self) -> Header {
        Header {
            config: self.config.to_text(),
            config_hash: self.config.hash(),
            seed: self.config.seed,
            schema: self.schema.clone(),
            schema_hash: self.schema.hash(),
            data_hash: self.data_hash.clone(),
            dims: self.net.dims.clone(),
            scalers: self.scalers.clone(),
            tensors: self.net.layout.tensors.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::with_capacity(32 + header.len() + 8 * self.params.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::data(format!("model artifact: {m}"));
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != MODEL_MAGIC {
            return Err(bad("not a model file"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        cur.read_exact(&mut b4).map_err(|_| bad("truncated"))?;
        let version = u32::from_le_bytes(b4);
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        cur.read_exact(&mut b8).map_err(|_| bad("truncated"))?;
        let hlen = u64::from_le_bytes(b8) as usize;
        let start = cur.position() as usize;
        let header_bytes = bytes.get(start..start + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        cur.set_position((start + hlen) as u64);
        cur.read_exact(&mut b8).map_err(|_| bad("truncated"))?;
        let n = u64::from_le_bytes(b8) as usize;
        let body = &bytes[cur.position() as usize..];
        if body.len() != 8 * n {
            return Err(bad(&format!("expected {n} parameters, found {} bytes", body.len())));
        }
        let params: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();

        let config = RunConfig::from_text(&header.config)?;
        let schema = FeatureSchema::new(&config);
        if schema.hash() != header.schema_hash || schema != header.schema {
            return Err(Error::SchemaMismatch {
                expected: schema.hash(),
                found: header.schema_hash,
            });
        }
        let n_classes = header.scalers.get(LAND_COVER)?.n_classes();
        let net = Network::new(Self::dims(&config, &schema, n_classes))?;
        if net.dims != header.dims || net.layout.tensors != header.tensors || net.n_params() != n {
            return Err(Error::SchemaMismatch {
                expected: format!("{} parameters in {} tensors", net.n_params(), net.layout.tensors.len()),
                found: format!("{n} parameters in {} tensors", header.tensors.len()),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(Model {
            config,
            schema,
            scalers: header.scalers,
            net,
            params,
            data_hash: header.data_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fit_categorical, fit_scaler, ScalerKind, TIME};

    fn scalers() -> ScalerSet {
        let mut s = ScalerSet::default();
        s.insert(PM25, fit_scaler(ScalerKind::Log, &[], None).unwrap());
        s.insert(TIME, fit_scaler(ScalerKind::MinMax, &[0.0, 100.0], None).unwrap());
        s.insert(LAND_COVER, fit_categorical(&[11, 21, 41]));
        s
    }

    fn small_config() -> RunConfig {
        RunConfig {
            latent_count: 4,
            latent_dim: 8,
            n_heads: 2,
            n_blocks: 1,
            recycle_count: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn bytes_round_trip() {
        let m = Model::new(&small_config(), scalers(), "abc").unwrap();
        let back = Model::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
        assert_eq!(back.scalers, m.scalers);
        assert_eq!(back.data_hash, "abc");
    }

    #[test]
    fn schema_mismatch_rejected() {
        let m = Model::new(&small_config(), scalers(), "abc").unwrap();
        let mut h = m.header();
        h.schema.fourier_bands = 4;
        h.schema_hash = h.schema.hash();
        let header = serde_json::to_vec(&h).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MODEL_MAGIC);
        bytes.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&(m.params.len() as u64).to_le_bytes());
        for p in &m.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        assert!(matches!(Model::from_bytes(&bytes), Err(Error::SchemaMismatch { .. })));
    }

    #[test]
    fn truncated_file_rejected() {
        let m = Model::new(&small_config(), scalers(), "abc").unwrap();
        let bytes = m.to_bytes().unwrap();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Model::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn untrained_prediction_is_finite() {
        let m = Model::new(&small_config(), scalers(), "abc").unwrap();
        let q = QueryPoint {
            land_cover: Some(21),
            ..QueryPoint::new(40.0, -105.0, 50).unwrap()
        };
        let token = m.query_token(&q).unwrap();
        let sensor = Token {
            numeric: vec![0.3; m.schema.sensor_width()],
            class: 0,
        };
        let p = m.predict(&[sensor], &token).unwrap();
        assert!(p.value.is_finite() && p.value > 0.0 && !p.clamped);
    }
}
