//! Station observations and calendar-day handling.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calendar day as an integer count of days since 1970-01-01.
pub type Day = i64;

/// Records with PM2.5 below this value are dropped before log scaling.
pub const PM25_DROP_BELOW: f64 = 0.005;

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch")
}

/// Parses an ISO-8601 `YYYY-MM-DD` date.
pub fn parse_date(s: &str) -> Result<Day> {
    let d = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|_| Error::data(format!("invalid date `{s}`, expected YYYY-MM-DD")))?;
    Ok((d - epoch()).num_days())
}

pub fn format_date(day: Day) -> String {
    (epoch() + chrono::Duration::days(day))
        .format("%Y-%m-%d")
        .to_string()
}

/// Month (1..=12) of a day.
pub fn month_of(day: Day) -> u32 {
    (epoch() + chrono::Duration::days(day)).month()
}

/// Meteorological seasons: DJF, MAM, JJA, SON.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Fall,
}

impl Season {
    pub fn of(day: Day) -> Season {
        match month_of(day) {
            12 | 1 | 2 => Season::Winter,
            3..=5 => Season::Spring,
            6..=8 => Season::Summer,
            _ => Season::Fall,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Season::Winter => "winter",
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Fall => "fall",
        }
    }
}

/// One (site, day) observation with its covariates.
///
/// Covariates are optional because the minimal feature set needs none of
/// them; token assembly reports the first missing one by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub site_id: String,
    pub lat: f64,
    pub lon: f64,
    pub date: Day,
    /// µg/m³.
    pub pm25: f64,
    pub land_cover: Option<i64>,
    /// Metres.
    pub elevation: Option<f64>,
    pub tmin: Option<f64>,
    pub tmax: Option<f64>,
    pub rhmin: Option<f64>,
    pub rhmax: Option<f64>,
    /// mm/day.
    pub precip: Option<f64>,
    /// m/s.
    pub wind_speed: Option<f64>,
    /// Degrees the wind blows from, in `[0, 360)`.
    pub wind_dir: Option<f64>,
    pub pop_day: Option<f64>,
    pub pop_night: Option<f64>,
}

/// Continuous covariates in token order; the full feature set appends these
/// to both sensor and query tokens.
pub const COVARIATES: [&str; 10] = [
    "tmin",
    "tmax",
    "rhmin",
    "rhmax",
    "precip",
    "wind_speed",
    "wind_dir",
    "pop_day",
    "pop_night",
    "elevation",
];

impl SensorRecord {
    /// A record with only the mandatory fields set.
    pub fn new(site_id: impl Into<String>, lat: f64, lon: f64, date: Day, pm25: f64) -> Self {
        SensorRecord {
            site_id: site_id.into(),
            lat,
            lon,
            date,
            pm25,
            land_cover: None,
            elevation: None,
            tmin: None,
            tmax: None,
            rhmin: None,
            rhmax: None,
            precip: None,
            wind_speed: None,
            wind_dir: None,
            pop_day: None,
            pop_night: None,
        }
    }

    pub fn covariate(&self, name: &str) -> Option<f64> {
        match name {
            "tmin" => self.tmin,
            "tmax" => self.tmax,
            "rhmin" => self.rhmin,
            "rhmax" => self.rhmax,
            "precip" => self.precip,
            "wind_speed" => self.wind_speed,
            "wind_dir" => self.wind_dir,
            "pop_day" => self.pop_day,
            "pop_night" => self.pop_night,
            "elevation" => self.elevation,
            _ => None,
        }
    }

    pub fn covariate_mut(&mut self, name: &str) -> Option<&mut Option<f64>> {
        Some(match name {
            "tmin" => &mut self.tmin,
            "tmax" => &mut self.tmax,
            "rhmin" => &mut self.rhmin,
            "rhmax" => &mut self.rhmax,
            "precip" => &mut self.precip,
            "wind_speed" => &mut self.wind_speed,
            "wind_dir" => &mut self.wind_dir,
            "pop_day" => &mut self.pop_day,
            "pop_night" => &mut self.pop_night,
            "elevation" => &mut self.elevation,
            _ => return None,
        })
    }

    /// Checks coordinate and PM2.5 invariants.
    pub fn validate(&self) -> Result<()> {
        validate_latlon(self.lat, self.lon)?;
        if !(self.pm25.is_finite() && self.pm25 >= 0.0) {
            return Err(Error::data(format!("pm25 {} must be finite and >= 0", self.pm25)));
        }
        Ok(())
    }
}

pub fn validate_latlon(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(Error::domain(format!("latitude {lat} outside [-90, 90]")));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(Error::domain(format!("longitude {lon} outside [-180, 180]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dates_round_trip() {
        assert_eq!(parse_date("1970-01-01").unwrap(), 0);
        assert_eq!(parse_date("2020-03-01").unwrap(), 18322);
        assert_eq!(format_date(18322), "2020-03-01");
        assert!(parse_date("2020-13-01").is_err());
    }

    #[test]
    fn seasons_follow_meteorological_months() {
        assert_eq!(Season::of(parse_date("2020-12-15").unwrap()), Season::Winter);
        assert_eq!(Season::of(parse_date("2021-02-28").unwrap()), Season::Winter);
        assert_eq!(Season::of(parse_date("2021-03-01").unwrap()), Season::Spring);
        assert_eq!(Season::of(parse_date("2021-08-31").unwrap()), Season::Summer);
        assert_eq!(Season::of(parse_date("2021-11-30").unwrap()), Season::Fall);
    }

    #[test]
    fn rejects_bad_coordinates() {
        assert!(SensorRecord::new("a", 95.0, 0.0, 0, 1.0).validate().is_err());
        assert!(SensorRecord::new("a", 0.0, -181.0, 0, 1.0).validate().is_err());
        assert!(SensorRecord::new("a", 0.0, 0.0, 0, -1.0).validate().is_err());
        SensorRecord::new("a", 90.0, 180.0, 0, 0.0).validate().unwrap();
    }
}
