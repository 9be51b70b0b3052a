use std::fmt;

use serde::{Deserialize, Serialize};

use super::EARTH_RADIUS_KM;
use crate::error::{Error, Result};
use crate::record::validate_latlon;

pub const MAX_RESOLUTION: u8 = 15;

/// Mean hexagon area at level 8, km². Each coarser level is seven times larger.
const LEVEL8_AREA_KM2: f64 = 0.737_327_598;

const Q_BITS: u32 = 30;
const OFFSET: i64 = 1 << (Q_BITS - 1);
const MASK: u64 = (1 << Q_BITS) - 1;

/// Opaque 64-bit hexagonal cell identifier tagged with its resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HexCellId(pub u64);

impl HexCellId {
    pub fn resolution(self) -> u8 {
        (self.0 >> (2 * Q_BITS)) as u8
    }

    fn axial(self) -> (i64, i64) {
        let q = ((self.0 >> Q_BITS) & MASK) as i64 - OFFSET;
        let r = (self.0 & MASK) as i64 - OFFSET;
        (q, r)
    }

    fn pack(res: u8, q: i64, r: i64) -> Self {
        let qq = (q + OFFSET) as u64 & MASK;
        let rr = (r + OFFSET) as u64 & MASK;
        HexCellId(((res as u64) << (2 * Q_BITS)) | (qq << Q_BITS) | rr)
    }
}

impl fmt::Display for HexCellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// A spatial index mapping coordinates onto hexagonal cells.
pub trait HexIndexer: Send + Sync {
    fn index(&self, lat: f64, lon: f64, resolution: u8) -> Result<HexCellId>;

    /// Centre of a cell as `(lat, lon)` in degrees.
    fn centroid(&self, cell: HexCellId) -> (f64, f64);
}

/// Pointy-top axial hexagon grid laid over the equirectangular plane
/// (`x = Rλ`, `y = Rφ`). Cell areas follow the usual seven-fold refinement,
/// with level 8 at roughly 0.74 km².
#[derive(Debug, Clone, Copy, Default)]
pub struct AxialHexIndexer;

impl AxialHexIndexer {
    /// Hexagon edge length in km for a resolution.
    pub fn edge_km(resolution: u8) -> f64 {
        let area = LEVEL8_AREA_KM2 * 7f64.powi(8 - resolution as i32);
        (2.0 * area / (3.0 * 3f64.sqrt())).sqrt()
    }
}

impl HexIndexer for AxialHexIndexer {
    fn index(&self, lat: f64, lon: f64, resolution: u8) -> Result<HexCellId> {
        if resolution > MAX_RESOLUTION {
            return Err(Error::domain(format!(
                "hex resolution {resolution} outside [0, {MAX_RESOLUTION}]"
            )));
        }
        validate_latlon(lat, lon)?;
        let e = Self::edge_km(resolution);
        let x = EARTH_RADIUS_KM * lon.to_radians();
        let y = EARTH_RADIUS_KM * lat.to_radians();
        let qf = (3f64.sqrt() / 3.0 * x - y / 3.0) / e;
        let rf = (2.0 / 3.0 * y) / e;
        let (q, r) = cube_round(qf, rf);
        Ok(HexCellId::pack(resolution, q, r))
    }

    fn centroid(&self, cell: HexCellId) -> (f64, f64) {
        let e = Self::edge_km(cell.resolution());
        let (q, r) = cell.axial();
        let x = e * 3f64.sqrt() * (q as f64 + r as f64 / 2.0);
        let y = e * 1.5 * r as f64;
        let lat = (y / EARTH_RADIUS_KM).to_degrees().clamp(-90.0, 90.0);
        let lon = (x / EARTH_RADIUS_KM).to_degrees().clamp(-180.0, 180.0);
        (lat, lon)
    }
}

fn cube_round(qf: f64, rf: f64) -> (i64, i64) {
    let sf = -qf - rf;
    let (mut q, mut r, s) = (qf.round(), rf.round(), sf.round());
    let (dq, dr, ds) = ((q - qf).abs(), (r - rf).abs(), (s - sf).abs());
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    (q as i64, r as i64)
}

/// Cell of `(lat, lon)` under the default indexer.
pub fn hex_index(lat: f64, lon: f64, resolution: u8) -> Result<HexCellId> {
    AxialHexIndexer.index(lat, lon, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn deterministic_and_distinct() {
        let a = hex_index(40.0, -105.0, 8).unwrap();
        assert_eq!(a, hex_index(40.0, -105.0, 8).unwrap());
        assert_eq!(a.resolution(), 8);
        // ~1000 km apart
        let b = hex_index(40.0, -93.3, 8).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_resolution() {
        assert!(hex_index(0.0, 0.0, 16).is_err());
        assert!(hex_index(95.0, 0.0, 8).is_err());
    }

    #[test]
    fn level8_area_scale() {
        let e = AxialHexIndexer::edge_km(8);
        let area = 1.5 * 3f64.sqrt() * e * e;
        assert!((area - 0.737).abs() < 1e-3);
        let e3 = AxialHexIndexer::edge_km(3);
        assert!((1.5 * 3f64.sqrt() * e3 * e3 - 12_392.0).abs() < 10.0);
    }

    #[test]
    fn nearby_points_share_cells() {
        let id = hex_index(35.0, -100.0, 3).unwrap();
        let (clat, clon) = AxialHexIndexer.centroid(id);
        // well inside a ~69 km edge cell
        for (dl, dn) in [(0.05, 0.0), (-0.05, 0.05), (0.0, -0.05)] {
            assert_eq!(hex_index(clat + dl, clon + dn, 3).unwrap(), id);
        }
    }

    proptest! {
        #[test]
        fn centroid_round_trip(lat in -60.0f64..60.0, lon in -160.0f64..160.0, res in 0u8..=15) {
            let id = hex_index(lat, lon, res).unwrap();
            let (clat, clon) = AxialHexIndexer.centroid(id);
            prop_assert_eq!(hex_index(clat, clon, res).unwrap(), id);
            // the point lies within one circumradius (in the plane) of its centre
            let e = AxialHexIndexer::edge_km(res);
            let dx = EARTH_RADIUS_KM * (lon - clon).to_radians();
            let dy = EARTH_RADIUS_KM * (lat - clat).to_radians();
            prop_assert!((dx * dx + dy * dy).sqrt() <= e * (1.0 + 1e-9));
        }
    }
}
