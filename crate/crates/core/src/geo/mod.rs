//! Coordinate encodings, distances, hexagonal indexing and hex aggregation.

mod aggregate;
mod hex;

pub use aggregate::{aggregate_scalar_to_hex, aggregate_wind_to_hex, WindAggregate};
pub use hex::{hex_index, AxialHexIndexer, HexCellId, HexIndexer, MAX_RESOLUTION};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::validate_latlon;

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// A location on the unit sphere plus the normalised projected pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalCoord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub x_norm: f64,
    pub y_norm: f64,
}

impl SphericalCoord {
    /// The three coordinates fed to the positional encoder. `z` is kept so the
    /// two hemispheres stay distinguishable.
    pub fn encoder_inputs(&self) -> [f64; 3] {
        [self.x_norm, self.y_norm, self.z]
    }

    /// Euclidean (chord) distance between two points on the unit sphere.
    pub fn chord_distance(&self, other: &SphericalCoord) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Converts latitude/longitude in degrees to unit-sphere Cartesian
/// coordinates and normalises the projected `(x, y)` pair by the vector norm.
pub fn encode_latlon(lat: f64, lon: f64) -> Result<SphericalCoord> {
    validate_latlon(lat, lon)?;
    let (phi, lambda) = (lat.to_radians(), lon.to_radians());
    let x = phi.cos() * lambda.cos();
    let y = phi.cos() * lambda.sin();
    let z = phi.sin();
    let norm = (x * x + y * y + z * z).sqrt();
    Ok(SphericalCoord {
        x,
        y,
        z,
        x_norm: x / norm,
        y_norm: y / norm,
    })
}

/// Sine/cosine positional encoding of one scalar: `N_f` sines followed by
/// `N_f` cosines at frequencies `1..=N_f` over period `P`.
pub fn fourier_encode(x: f64, bands: usize, period: f64) -> Result<Vec<f64>> {
    if bands == 0 || !(period > 0.0) {
        return Err(Error::domain(format!(
            "fourier encoding needs bands >= 1 and period > 0 (got {bands}, {period})"
        )));
    }
    let mut out = vec![0.0; 2 * bands];
    fourier_encode_into(x, bands, period, &mut out);
    Ok(out)
}

/// Writes the encoding of `x` into `out[..2 * bands]` without checks.
pub(crate) fn fourier_encode_into(x: f64, bands: usize, period: f64, out: &mut [f64]) {
    for i in 0..bands {
        let arg = 2.0 * PI * (i + 1) as f64 * x / period;
        out[i] = arg.sin();
        out[i + bands] = arg.cos();
    }
}

/// Great-circle distance in kilometres between two `(lat, lon)` points.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dp = p2 - p1;
    let dl = (b.1 - a.1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}
