//! Synthetic PM2.5 fields with an analytic ground truth.
//!
//! The field is a baseline plus drifting, pulsing Gaussian plumes. Sensor
//! records sample it at fixed sites with additive noise, and covariates are
//! generated to be consistent with the plumes (wind follows plume drift,
//! population peaks near plume origins).

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::seeded_rng;
use crate::error::{Error, Result};
use crate::geo::haversine_km;
use crate::record::{Day, SensorRecord};

/// Land-cover codes assigned to synthetic sites.
pub const SYNTH_LAND_CLASSES: [i64; 5] = [11, 21, 41, 71, 82];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    /// Roughly the contiguous United States.
    pub fn conus() -> Self {
        BBox {
            lat_min: 25.0,
            lat_max: 49.0,
            lon_min: -124.0,
            lon_max: -67.0,
        }
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }
}

/// One Gaussian plume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlumeSource {
    pub lat: f64,
    pub lon: f64,
    /// Peak enhancement, µg/m³.
    pub amplitude: f64,
    pub width_km: f64,
    /// Centre drift in degrees per day.
    pub drift_lat: f64,
    pub drift_lon: f64,
    /// The amplitude pulses by ±40 % with this period.
    pub cycle_days: f64,
    pub phase: f64,
}

impl PlumeSource {
    pub fn centre(&self, t: f64) -> (f64, f64) {
        (self.lat + self.drift_lat * t, self.lon + self.drift_lon * t)
    }

    pub fn value(&self, lat: f64, lon: f64, t: f64) -> f64 {
        let d = haversine_km((lat, lon), self.centre(t));
        let pulse = 1.0 + 0.4 * (2.0 * PI * t / self.cycle_days + self.phase).sin();
        self.amplitude * pulse * (-d * d / (2.0 * self.width_km * self.width_km)).exp()
    }
}

/// Where synthetic sites are placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SiteLayout {
    Uniform,
    /// `dense_fraction` of the sites west of `split_lon`, the rest east of it.
    DenseSparse { split_lon: f64, dense_fraction: f64 },
    /// Sites spread uniformly over discs of `radius_deg` around each centre,
    /// assigned round-robin.
    Clusters { centres: Vec<(f64, f64)>, radius_deg: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFieldSpec {
    pub n_sites: usize,
    pub n_days: usize,
    pub start_day: Day,
    pub bbox: BBox,
    /// µg/m³ everywhere.
    pub baseline: f64,
    pub sources: Vec<PlumeSource>,
    /// Standard deviation of the additive measurement noise, µg/m³.
    pub noise_sd: f64,
    pub layout: SiteLayout,
    /// Probability that a (site, day) observation is missing.
    pub missing_fraction: f64,
}

impl SyntheticFieldSpec {
    /// Random plumes over `bbox` drifting eastward, drawn from `seed`.
    pub fn with_random_sources(
        n_sites: usize,
        n_days: usize,
        n_sources: usize,
        noise_sd: f64,
        bbox: BBox,
        seed: u64,
    ) -> Self {
        let mut rng = seeded_rng(seed ^ 0x5eed_f1e1d);
        let lat_span = bbox.lat_max - bbox.lat_min;
        let lon_span = bbox.lon_max - bbox.lon_min;
        let sources = (0..n_sources)
            .map(|_| PlumeSource {
                lat: bbox.lat_min + lat_span * rng.gen_range(0.2..0.8),
                lon: bbox.lon_min + lon_span * rng.gen_range(0.1..0.6),
                amplitude: rng.gen_range(8.0..20.0),
                width_km: rng.gen_range(0.06..0.12) * lon_span * 111.0,
                drift_lat: rng.gen_range(-0.02..0.02) * lat_span / 24.0,
                drift_lon: rng.gen_range(0.01..0.05) * lon_span / 57.0,
                cycle_days: rng.gen_range(20.0..60.0),
                phase: rng.gen_range(0.0..2.0 * PI),
            })
            .collect();
        SyntheticFieldSpec {
            n_sites,
            n_days,
            start_day: 18262, // 2020-01-01
            bbox,
            baseline: 4.0,
            sources,
            noise_sd,
            layout: SiteLayout::Uniform,
            missing_fraction: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::domain("synthetic field needs at least one source"));
        }
        if self.n_sites == 0 || self.n_days == 0 {
            return Err(Error::domain("synthetic field needs sites and days"));
        }
        if !(self.baseline >= 0.005) {
            return Err(Error::domain("synthetic baseline must be at least 0.005"));
        }
        if !(self.noise_sd >= 0.0) || !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(Error::domain("noise_sd must be >= 0 and missing_fraction in [0, 1)"));
        }
        Ok(())
    }
}

/// The analytic ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticField {
    pub start_day: Day,
    pub baseline: f64,
    pub sources: Vec<PlumeSource>,
}

impl SyntheticField {
    /// True concentration in µg/m³.
    pub fn eval(&self, lat: f64, lon: f64, day: Day) -> f64 {
        let t = (day - self.start_day) as f64;
        self.baseline + self.sources.iter().map(|s| s.value(lat, lon, t)).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSite {
    pub site_id: String,
    pub lat: f64,
    pub lon: f64,
    pub land_cover: i64,
    pub elevation: f64,
    pub pop_day: f64,
    pub pop_night: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<SensorRecord>,
    pub field: SyntheticField,
    pub sites: Vec<SyntheticSite>,
    /// MAE of predicting the global mean concentration for every record.
    pub naive_baseline_mae: f64,
}

fn place_sites(spec: &SyntheticFieldSpec, rng: &mut crate::config::Rng) -> Vec<(f64, f64)> {
    let b = spec.bbox;
    let uniform = |rng: &mut crate::config::Rng, lon_lo: f64, lon_hi: f64| {
        (rng.gen_range(b.lat_min..b.lat_max), rng.gen_range(lon_lo..lon_hi))
    };
    match &spec.layout {
        SiteLayout::Uniform => (0..spec.n_sites).map(|_| uniform(rng, b.lon_min, b.lon_max)).collect(),
        SiteLayout::DenseSparse {
            split_lon,
            dense_fraction,
        } => {
            let n_dense = (spec.n_sites as f64 * dense_fraction).round() as usize;
            (0..spec.n_sites)
                .map(|i| {
                    if i < n_dense {
                        uniform(rng, b.lon_min, *split_lon)
                    } else {
                        uniform(rng, *split_lon, b.lon_max)
                    }
                })
                .collect()
        }
        SiteLayout::Clusters { centres, radius_deg } => (0..spec.n_sites)
            .map(|i| {
                let (clat, clon) = centres[i % centres.len()];
                let r = radius_deg * rng.gen::<f64>().sqrt();
                let a = rng.gen_range(0.0..2.0 * PI);
                (
                    (clat + r * a.sin()).clamp(-90.0, 90.0),
                    (clon + r * a.cos()).clamp(-180.0, 180.0),
                )
            })
            .collect(),
    }
}

/// Samples sensor records from the field and returns them with the oracle.
pub fn generate_synthetic(spec: &SyntheticFieldSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let field = SyntheticField {
        start_day: spec.start_day,
        baseline: spec.baseline,
        sources: spec.sources.clone(),
    };
    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).expect("valid normal");
    let unit = Normal::new(0.0, 1.0).expect("valid normal");

    let sites: Vec<SyntheticSite> = place_sites(spec, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, (lat, lon))| {
            let cell = ((lat / 4.0).floor() as i64 + 3 * (lon / 5.0).floor() as i64).rem_euclid(5);
            let urban: f64 = spec
                .sources
                .iter()
                .map(|s| {
                    let d = haversine_km((lat, lon), (s.lat, s.lon));
                    (-d * d / (2.0 * 250.0 * 250.0)).exp()
                })
                .sum();
            let elevation = (800.0 + 900.0 * (lon / 9.0).sin() * (lat / 7.0).cos() + 60.0 * unit.sample(&mut rng)).max(-20.0);
            SyntheticSite {
                site_id: format!("S{i:04}"),
                lat,
                lon,
                land_cover: SYNTH_LAND_CLASSES[cell as usize],
                elevation,
                pop_day: 80.0 + 2500.0 * urban + 20.0 * rng.gen::<f64>(),
                pop_night: 60.0 + 1800.0 * urban + 20.0 * rng.gen::<f64>(),
            }
        })
        .collect();

    let mut records = Vec::with_capacity(spec.n_sites * spec.n_days);
    for d in 0..spec.n_days {
        let day = spec.start_day + d as Day;
        let doy = (day.rem_euclid(365)) as f64;
        for site in &sites {
            if spec.missing_fraction > 0.0 && rng.gen::<f64>() < spec.missing_fraction {
                continue;
            }
            let truth = field.eval(site.lat, site.lon, day);
            let pm25 = if spec.noise_sd > 0.0 {
                (truth + noise.sample(&mut rng)).max(0.005)
            } else {
                truth
            };
            let mut r = SensorRecord::new(site.site_id.clone(), site.lat, site.lon, day, pm25);
            let tmax = 20.0 + 10.0 * (2.0 * PI * (doy - 110.0) / 365.0).sin() - 0.006 * site.elevation
                + 1.5 * unit.sample(&mut rng);
            let rhmin = (35.0 + 10.0 * unit.sample(&mut rng)).clamp(2.0, 90.0);
            // wind blows along the drift of the nearest plume
            let t = d as f64;
            let near = spec
                .sources
                .iter()
                .min_by(|a, b| {
                    haversine_km((site.lat, site.lon), a.centre(t))
                        .total_cmp(&haversine_km((site.lat, site.lon), b.centre(t)))
                })
                .expect("at least one source");
            let (ve, vn) = (near.drift_lon * site.lat.to_radians().cos(), near.drift_lat);
            let toward = ve.atan2(vn).to_degrees();
            r.land_cover = Some(site.land_cover);
            r.elevation = Some(site.elevation);
            r.tmax = Some(tmax);
            r.tmin = Some(tmax - 8.0 - 4.0 * rng.gen::<f64>());
            r.rhmin = Some(rhmin);
            r.rhmax = Some((rhmin + 30.0 + 10.0 * rng.gen::<f64>()).min(100.0));
            r.precip = Some(if rng.gen::<f64>() < 0.3 { -5.0 * rng.gen::<f64>().max(1e-12).ln() } else { 0.0 });
            r.wind_speed = Some((1.5 + 40.0 * ve.hypot(vn) + 0.5 * unit.sample(&mut rng)).max(0.0));
            r.wind_dir = Some((toward + 180.0).rem_euclid(360.0) % 360.0);
            r.pop_day = Some(site.pop_day);
            r.pop_night = Some(site.pop_night);
            records.push(r);
        }
    }

    let mean = records.iter().map(|r| r.pm25).sum::<f64>() / records.len().max(1) as f64;
    let naive_baseline_mae =
        records.iter().map(|r| (r.pm25 - mean).abs()).sum::<f64>() / records.len().max(1) as f64;
    Ok(SyntheticDataset {
        records,
        field,
        sites,
        naive_baseline_mae,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(noise: f64) -> SyntheticFieldSpec {
        SyntheticFieldSpec::with_random_sources(20, 10, 3, noise, BBox::conus(), 5)
    }

    #[test]
    fn noiseless_records_equal_oracle() {
        let ds = generate_synthetic(&small_spec(0.0), 1).unwrap();
        assert_eq!(ds.records.len(), 200);
        for r in &ds.records {
            assert_eq!(r.pm25, ds.field.eval(r.lat, r.lon, r.date));
        }
    }

    #[test]
    fn single_source_peaks_at_centre() {
        let mut spec = small_spec(0.0);
        spec.sources.truncate(1);
        let ds = generate_synthetic(&spec, 1).unwrap();
        let day = spec.start_day + 4;
        let (clat, clon) = spec.sources[0].centre(4.0);
        let peak = ds.field.eval(clat, clon, day);
        let mut rng = seeded_rng(3);
        for _ in 0..500 {
            let lat = rng.gen_range(25.0..49.0);
            let lon = rng.gen_range(-124.0..-67.0);
            assert!(ds.field.eval(lat, lon, day) <= peak);
        }
    }

    #[test]
    fn naive_baseline_brute_force() {
        let ds = generate_synthetic(&small_spec(0.5), 2).unwrap();
        let n = ds.records.len() as f64;
        let mean: f64 = ds.records.iter().map(|r| r.pm25).sum::<f64>() / n;
        let mae: f64 = ds.records.iter().map(|r| (r.pm25 - mean).abs()).sum::<f64>() / n;
        assert!((ds.naive_baseline_mae - mae).abs() < 1e-12);
        assert!(mae > 0.0);
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate_synthetic(&small_spec(0.5), 9).unwrap();
        let b = generate_synthetic(&small_spec(0.5), 9).unwrap();
        assert_eq!(a.records, b.records);
        for r in &a.records {
            r.validate().unwrap();
            let dir = r.wind_dir.unwrap();
            assert!((0.0..360.0).contains(&dir));
        }
    }

    #[test]
    fn layouts_respect_regions() {
        let mut spec = small_spec(0.0);
        spec.n_sites = 40;
        spec.layout = SiteLayout::DenseSparse {
            split_lon: -95.0,
            dense_fraction: 0.75,
        };
        let ds = generate_synthetic(&spec, 4).unwrap();
        let west = ds.sites.iter().filter(|s| s.lon < -95.0).count();
        assert_eq!(west, 30);

        spec.layout = SiteLayout::Clusters {
            centres: vec![(40.0, -110.0), (35.0, -85.0)],
            radius_deg: 3.0,
        };
        let ds = generate_synthetic(&spec, 4).unwrap();
        for (i, s) in ds.sites.iter().enumerate() {
            let (clat, clon) = [(40.0, -110.0), (35.0, -85.0)][i % 2];
            assert!(((s.lat - clat).powi(2) + (s.lon - clon).powi(2)).sqrt() <= 3.0 + 1e-9);
        }
    }

    #[test]
    fn rejects_empty_sources() {
        let mut spec = small_spec(0.0);
        spec.sources.clear();
        assert!(generate_synthetic(&spec, 1).is_err());
    }
}
