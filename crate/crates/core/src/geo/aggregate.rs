use crate::error::{Error, Result};

/// Area-weighted mean `Σ vᵢwᵢ / Σ wᵢ` of grid values overlapping one cell.
pub fn aggregate_scalar_to_hex(cells: &[(f64, f64)]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for &(v, w) in cells {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::domain(format!("overlap weight {w} must be finite and >= 0")));
        }
        num += v * w;
        den += w;
    }
    if den <= 0.0 {
        return Err(Error::domain("overlap weights sum to zero"));
    }
    Ok(num / den)
}

/// Resultant of a vector-averaged wind field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindAggregate {
    /// m/s.
    pub speed: f64,
    /// Degrees in `[0, 360)`; 0 when `calm`.
    pub dir: f64,
    /// Components cancelled out; the direction carries no information.
    pub calm: bool,
}

/// Averages `(speed, direction°, weight)` entries through their U/V
/// components (`U = s·sin θ`, `V = s·cos θ`) so directions either side of
/// north do not average to south.
pub fn aggregate_wind_to_hex(entries: &[(f64, f64, f64)]) -> Result<WindAggregate> {
    let mut u = 0.0;
    let mut v = 0.0;
    let mut den = 0.0;
    let mut max_speed: f64 = 0.0;
    for &(s, dir, w) in entries {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::domain(format!("wind speed {s} must be finite and >= 0")));
        }
        if !(0.0..360.0).contains(&dir) {
            return Err(Error::domain(format!("wind direction {dir} outside [0, 360)")));
        }
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::domain(format!("overlap weight {w} must be finite and >= 0")));
        }
        let t = dir.to_radians();
        u += w * s * t.sin();
        v += w * s * t.cos();
        den += w;
        max_speed = max_speed.max(s);
    }
    if den <= 0.0 {
        return Err(Error::domain("overlap weights sum to zero"));
    }
    u /= den;
    v /= den;
    let speed = u.hypot(v);
    if speed <= 1e-12 * max_speed.max(1.0) {
        return Ok(WindAggregate {
            speed: 0.0,
            dir: 0.0,
            calm: true,
        });
    }
    let mut dir = u.atan2(v).to_degrees().rem_euclid(360.0);
    if dir >= 360.0 {
        dir = 0.0;
    }
    Ok(WindAggregate {
        speed,
        dir,
        calm: false,
    })
}
