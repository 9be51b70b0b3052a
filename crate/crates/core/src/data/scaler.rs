//! Per-variable scalers and their persisted parameter set.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied before the base-10 log transform of PM2.5.
pub const LOG_FLOOR: f64 = 0.001;
pub const LOG_BASE: f64 = 10.0;

/// Percentiles used for the default outlier caps.
pub const CAP_PERCENTILES: (f64, f64) = (0.001, 0.999);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalerKind {
    MinMax,
    Standard,
    Log,
    LatLon,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Caps {
    pub lower: f64,
    pub upper: f64,
}

impl Caps {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower <= upper) {
            return Err(Error::domain(format!("cap lower {lower} exceeds upper {upper}")));
        }
        Ok(Caps { lower, upper })
    }

    pub fn apply(&self, x: f64) -> f64 {
        x.clamp(self.lower, self.upper)
    }
}

/// Fitted parameters for one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalerParams {
    MinMax {
        x_min: f64,
        x_max: f64,
        range: (f64, f64),
        caps: Option<Caps>,
    },
    Standard {
        mean: f64,
        std: f64,
        caps: Option<Caps>,
    },
    Log {
        base: f64,
        floor: f64,
        caps: Option<Caps>,
    },
    /// Latitude/longitude to unit-sphere coordinates; no fitted state.
    LatLon,
    /// Sorted class vocabulary; a class maps to its position.
    Categorical { classes: Vec<i64> },
}

/// Clamps every value into `[lower, upper]`.
pub fn cap_outliers(values: &[f64], lower: f64, upper: f64) -> Result<Vec<f64>> {
    let caps = Caps::new(lower, upper)?;
    Ok(values.iter().map(|&v| caps.apply(v)).collect())
}

/// Linear-interpolated quantile of unsorted data, `q ∈ [0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Default caps: the 0.1 and 99.9 percentiles of the samples.
pub fn percentile_caps(values: &[f64]) -> Option<Caps> {
    let lo = quantile(values, CAP_PERCENTILES.0)?;
    let hi = quantile(values, CAP_PERCENTILES.1)?;
    Some(Caps { lower: lo, upper: hi })
}

/// Fits a scalar scaler. Caps are applied to the samples before any
/// statistic is taken.
pub fn fit_scaler(kind: ScalerKind, samples: &[f64], caps: Option<Caps>) -> Result<ScalerParams> {
    let capped: Vec<f64> = match caps {
        Some(c) => samples.iter().map(|&x| c.apply(x)).collect(),
        None => samples.to_vec(),
    };
    if capped.iter().any(|x| !x.is_finite()) {
        return Err(Error::data("non-finite sample in scaler fit"));
    }
    match kind {
        ScalerKind::MinMax => fit_minmax(&capped, (0.0, 1.0), caps),
        ScalerKind::Standard => {
            if capped.len() < 2 {
                return Err(Error::data("standard scaler needs at least two samples"));
            }
            let n = capped.len() as f64;
            let mean = capped.iter().sum::<f64>() / n;
            let var = capped.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std > 0.0) {
                return Err(Error::data("degenerate standard deviation: constant samples"));
            }
            Ok(ScalerParams::Standard { mean, std, caps })
        }
        ScalerKind::Log => Ok(ScalerParams::Log {
            base: LOG_BASE,
            floor: LOG_FLOOR,
            caps,
        }),
        ScalerKind::LatLon => Ok(ScalerParams::LatLon),
        ScalerKind::Categorical => {
            let classes = capped
                .iter()
                .map(|&x| {
                    if x.fract() != 0.0 {
                        Err(Error::data(format!("categorical sample {x} is not an integer")))
                    } else {
                        Ok(x as i64)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(fit_categorical(&classes))
        }
    }
}

pub fn fit_minmax(samples: &[f64], range: (f64, f64), caps: Option<Caps>) -> Result<ScalerParams> {
    let x_min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let x_max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(x_max > x_min) {
        return Err(Error::data("min-max scaler needs at least two distinct samples"));
    }
    Ok(ScalerParams::MinMax {
        x_min,
        x_max,
        range,
        caps,
    })
}

pub fn fit_categorical(classes: &[i64]) -> ScalerParams {
    let mut v = classes.to_vec();
    v.sort_unstable();
    v.dedup();
    ScalerParams::Categorical { classes: v }
}

impl ScalerParams {
    pub fn kind(&self) -> ScalerKind {
        match self {
            ScalerParams::MinMax { .. } => ScalerKind::MinMax,
            ScalerParams::Standard { .. } => ScalerKind::Standard,
            ScalerParams::Log { .. } => ScalerKind::Log,
            ScalerParams::LatLon => ScalerKind::LatLon,
            ScalerParams::Categorical { .. } => ScalerKind::Categorical,
        }
    }

    fn caps(&self) -> Option<Caps> {
        match self {
            ScalerParams::MinMax { caps, .. }
            | ScalerParams::Standard { caps, .. }
            | ScalerParams::Log { caps, .. } => *caps,
            _ => None,
        }
    }

    /// Scales one value (capping first when caps are set).
    pub fn apply(&self, x: f64) -> Result<f64> {
        let x = match self.caps() {
            Some(c) => c.apply(x),
            None => x,
        };
        match *self {
            ScalerParams::MinMax {
                x_min, x_max, range, ..
            } => {
                let scale = (range.1 - range.0) / (x_max - x_min);
                Ok((x - x_min) * scale + range.0)
            }
            ScalerParams::Standard { mean, std, .. } => Ok((x - mean) / std),
            ScalerParams::Log { base, floor, .. } => Ok(x.max(floor).ln() / base.ln()),
            ScalerParams::LatLon => Err(Error::domain(
                "lat/lon scaler maps coordinate pairs; use geo::encode_latlon",
            )),
            ScalerParams::Categorical { .. } => Err(Error::domain(
                "categorical scaler maps class codes; use class_index",
            )),
        }
    }

    /// Algebraic inverse of [`apply`](Self::apply) on the capped range.
    pub fn invert(&self, y: f64) -> Result<f64> {
        match *self {
            ScalerParams::MinMax {
                x_min, x_max, range, ..
            } => {
                let scale = (range.1 - range.0) / (x_max - x_min);
                Ok((y - range.0) / scale + x_min)
            }
            ScalerParams::Standard { mean, std, .. } => Ok(y * std + mean),
            ScalerParams::Log { base, .. } => Ok(base.powf(y)),
            ScalerParams::LatLon | ScalerParams::Categorical { .. } => Err(Error::domain(
                "scaler has no scalar inverse",
            )),
        }
    }

    /// Position of a class in the vocabulary.
    pub fn class_index(&self, class: i64) -> Result<usize> {
        match self {
            ScalerParams::Categorical { classes } => {
                classes.binary_search(&class).map_err(|_| Error::UnknownCategory {
                    field: "land_cover".into(),
                    value: class,
                })
            }
            _ => Err(Error::domain("class_index on a non-categorical scaler")),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ScalerParams::Categorical { classes } => classes.len(),
            _ => 0,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            ScalerParams::MinMax { x_min, x_max, .. } => x_max > x_min,
            ScalerParams::Standard { std, .. } => *std > 0.0,
            ScalerParams::Log { base, floor, .. } => *floor > 0.0 && *base > 1.0,
            ScalerParams::LatLon => true,
            ScalerParams::Categorical { classes } => classes.windows(2).all(|w| w[0] < w[1]),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::data(format!("invalid parameters for scaler `{name}`")))
        }
    }
}

/// Named scalers, serialised as one JSON document with sorted keys.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScalerSet(pub BTreeMap<String, ScalerParams>);

impl ScalerSet {
    pub fn get(&self, name: &str) -> Result<&ScalerParams> {
        self.0
            .get(name)
            .ok_or_else(|| Error::data(format!("no fitted scaler for `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, params: ScalerParams) {
        self.0.insert(name.into(), params);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.0).expect("scalers serialise");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, ScalerParams> = serde_json::from_str(text)?;
        for (k, v) in &map {
            v.validate(k)?;
        }
        Ok(ScalerSet(map))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = path.with_extension("tmp~");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    if let Some(d) = dir {
        if let Ok(f) = std::fs::File::open(d) {
            let _ = f.sync_all();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn minmax_fit_and_apply() {
        let xs: Vec<f64> = (0..=10).map(f64::from).collect();
        let p = fit_scaler(ScalerKind::MinMax, &xs, None).unwrap();
        match p {
            ScalerParams::MinMax { x_min, x_max, .. } => {
                assert_eq!((x_min, x_max), (0.0, 10.0));
            }
            _ => unreachable!(),
        }
        assert_eq!(p.apply(5.0).unwrap(), 0.5);
        assert!(fit_scaler(ScalerKind::MinMax, &[3.0, 3.0], None).is_err());
    }

    #[test]
    fn standard_uses_population_sd() {
        let p = fit_scaler(ScalerKind::Standard, &[1.0, 2.0, 3.0], None).unwrap();
        match p {
            ScalerParams::Standard { mean, std, .. } => {
                assert_eq!(mean, 2.0);
                assert_abs_diff_eq!(std, (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
            }
            _ => unreachable!(),
        }
        assert_eq!(p.apply(2.0).unwrap(), 0.0);
        assert!(matches!(
            fit_scaler(ScalerKind::Standard, &[4.0, 4.0, 4.0], None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn log_floor_and_base() {
        let p = fit_scaler(ScalerKind::Log, &[1.0, 50.0], None).unwrap();
        assert_eq!(
            p,
            ScalerParams::Log {
                base: 10.0,
                floor: 0.001,
                caps: None
            }
        );
        assert_abs_diff_eq!(p.apply(100.0).unwrap(), 2.0, epsilon = 1e-15);
        // floored at 0.001 → -3
        assert_abs_diff_eq!(p.apply(0.0).unwrap(), -3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.apply(1e-6).unwrap(), -3.0, epsilon = 1e-12);
    }

    #[test]
    fn caps_clamp_before_fit() {
        assert_eq!(cap_outliers(&[-50.0], 0.0, 9000.0).unwrap(), vec![0.0]);
        assert_eq!(cap_outliers(&[5.0], 0.0, 10.0).unwrap(), vec![5.0]);
        assert_eq!(cap_outliers(&[1e6], 0.0, 10.0).unwrap(), vec![10.0]);
        assert!(cap_outliers(&[1.0], 2.0, 1.0).is_err());

        let caps = Caps::new(0.0, 9000.0).unwrap();
        let p = fit_scaler(ScalerKind::MinMax, &[-50.0, 100.0, 900.0], Some(caps)).unwrap();
        match p {
            ScalerParams::MinMax { x_min, .. } => assert_eq!(x_min, 0.0),
            _ => unreachable!(),
        }
        assert_eq!(p.apply(-10.0).unwrap(), 0.0);
    }

    #[test]
    fn categorical_vocabulary() {
        let p = fit_categorical(&[41, 11, 82, 41, 21]);
        assert_eq!(p.n_classes(), 4);
        assert_eq!(p.class_index(11).unwrap(), 0);
        assert_eq!(p.class_index(82).unwrap(), 3);
        assert!(matches!(
            p.class_index(90),
            Err(Error::UnknownCategory { value: 90, .. })
        ));
        assert!(p.apply(1.0).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let v = [0.0, 10.0, 20.0, 30.0, 40.0];
        assert_eq!(quantile(&v, 0.5), Some(20.0));
        assert_eq!(quantile(&v, 0.125), Some(5.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn json_is_byte_stable() {
        let mut set = ScalerSet::default();
        set.insert("pm25", fit_scaler(ScalerKind::Log, &[], None).unwrap());
        set.insert("elevation", fit_minmax(&[0.0, 0.1, 1234.5678], (0.0, 1.0), Some(Caps::new(0.0, 4000.0).unwrap())).unwrap());
        set.insert("tmin", fit_scaler(ScalerKind::Standard, &[1.1, 2.7, 3.3], None).unwrap());
        set.insert("land_cover", fit_categorical(&[3, 1, 2]));
        set.insert("latlon", ScalerParams::LatLon);
        let text = set.to_json();
        let back = ScalerSet::from_json(&text).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_json(), text);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scalers.json");
        set.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
        assert_eq!(ScalerSet::load(&path).unwrap(), set);
    }

    proptest! {
        #[test]
        fn round_trip_and_monotone(a in -1e3f64..1e3, b in -1e3f64..1e3, extra in prop::collection::vec(-1e3f64..1e3, 2..20)) {
            prop_assume!((a - b).abs() > 1e-3);
            let mut xs = extra.clone();
            xs.push(a);
            xs.push(b);
            for kind in [ScalerKind::MinMax, ScalerKind::Standard] {
                let p = fit_scaler(kind, &xs, None).unwrap();
                for &x in &xs {
                    let back = p.invert(p.apply(x).unwrap()).unwrap();
                    prop_assert!((back - x).abs() <= 1e-9 * (1.0 + x.abs()));
                }
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assert!(p.apply(lo).unwrap() <= p.apply(hi).unwrap());
            }
            let p = fit_scaler(ScalerKind::Log, &xs, None).unwrap();
            let (x1, x2) = (a.abs() + 0.001, b.abs() + 0.001);
            let back = p.invert(p.apply(x1).unwrap()).unwrap();
            prop_assert!((back - x1).abs() <= 1e-9 * (1.0 + x1));
            if x1 < x2 {
                prop_assert!(p.apply(x1).unwrap() <= p.apply(x2).unwrap());
            }
        }
    }
}
