//! Station and covariate-grid CSV readers.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::clean::{aggregate_colocated, drop_low_concentrations};
use crate::error::{Error, Result};
use crate::geo::{aggregate_scalar_to_hex, aggregate_wind_to_hex, hex_index, HexCellId};
use crate::record::{format_date, parse_date, validate_latlon, Day, SensorRecord, COVARIATES};

pub const STATION_HEADER: [&str; 16] = [
    "site_id",
    "lat",
    "lon",
    "date",
    "pm25",
    "land_cover",
    "elevation",
    "tmin",
    "tmax",
    "rhmin",
    "rhmax",
    "precip",
    "wind_speed",
    "wind_dir",
    "pop_day",
    "pop_night",
];

pub const GRID_HEADER: [&str; 6] = ["cell_lat", "cell_lon", "date", "variable", "value", "overlap_weight"];

/// Resolution covariate grids are aggregated to.
pub const COVARIATE_HEX_RESOLUTION: u8 = 8;

/// What ingestion did to the input beyond parsing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    /// Values clamped into their physical range, per field.
    pub capped: BTreeMap<String, usize>,
    pub dropped_low: usize,
    pub collapsed: usize,
}

impl IngestReport {
    fn cap(&mut self, field: &str) {
        *self.capped.entry(field.to_string()).or_default() += 1;
    }
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn line_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::DataLine {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn check_header(path: &str, found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let found: Vec<&str> = found.iter().collect();
    if found != expected {
        return Err(line_err(path, 1, format!("expected header `{}`", expected.join(","))));
    }
    Ok(())
}

fn parse_f64(path: &str, line: usize, field: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| line_err(path, line, format!("`{field}`: cannot parse `{s}` as a number")))?;
    if !v.is_finite() {
        return Err(line_err(path, line, format!("`{field}` is not finite")));
    }
    Ok(v)
}

fn parse_opt(path: &str, line: usize, field: &str, s: &str) -> Result<Option<f64>> {
    if s.is_empty() || s.eq_ignore_ascii_case("na") {
        Ok(None)
    } else {
        parse_f64(path, line, field, s).map(Some)
    }
}

/// Clamps a value into its physical range, counting each clamp.
fn clamp_counted(report: &mut IngestReport, field: &str, v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo || v > hi {
        report.cap(field);
        v.clamp(lo, hi)
    } else {
        v
    }
}

/// Parses station rows without any cleaning. `name` labels error messages.
pub fn parse_stations<R: Read>(reader: R, name: &str, report: &mut IngestReport) -> Result<Vec<SensorRecord>> {
    let mut rdr = csv_reader(reader);
    check_header(name, rdr.headers()?, &STATION_HEADER)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            line_err(name, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != STATION_HEADER.len() {
            return Err(line_err(name, line, format!("expected 16 fields, found {}", row.len())));
        }
        let site_id = row[0].to_string();
        if site_id.is_empty() {
            return Err(line_err(name, line, "empty site_id"));
        }
        let lat = parse_f64(name, line, "lat", &row[1])?;
        let lon = parse_f64(name, line, "lon", &row[2])?;
        validate_latlon(lat, lon).map_err(|e| line_err(name, line, e.to_string()))?;
        let date = parse_date(&row[3]).map_err(|e| line_err(name, line, e.to_string()))?;
        let pm25 = parse_f64(name, line, "pm25", &row[4])?;
        let pm25 = clamp_counted(report, "pm25", pm25, 0.0, f64::MAX);
        let mut r = SensorRecord::new(site_id, lat, lon, date, pm25);
        r.land_cover = match parse_opt(name, line, "land_cover", &row[5])? {
            None => None,
            Some(v) if v.fract() == 0.0 => Some(v as i64),
            Some(v) => return Err(line_err(name, line, format!("`land_cover` {v} is not an integer class"))),
        };
        for (k, field) in STATION_HEADER[6..].iter().enumerate() {
            let v = parse_opt(name, line, field, &row[6 + k])?;
            let v = v.map(|v| match *field {
                "rhmin" | "rhmax" => clamp_counted(report, field, v, 0.0, 100.0),
                "precip" | "wind_speed" | "pop_day" | "pop_night" => clamp_counted(report, field, v, 0.0, f64::MAX),
                "wind_dir" => {
                    let w = v.rem_euclid(360.0);
                    if w != v {
                        report.cap(field);
                    }
                    w % 360.0
                }
                _ => v,
            });
            *r.covariate_mut(field).expect("station header names a covariate") = v;
        }
        out.push(r);
        report.rows += 1;
    }
    Ok(out)
}

/// Reads, validates and cleans a station file: low concentrations are
/// dropped, then colocated monitors are averaged.
pub fn ingest_stations(path: &Path) -> Result<(Vec<SensorRecord>, IngestReport)> {
    let name = path.display().to_string();
    let mut report = IngestReport::default();
    let raw = parse_stations(open(path)?, &name, &mut report)?;
    let (kept, dropped) = drop_low_concentrations(raw);
    report.dropped_low = dropped;
    let n = kept.len();
    let records = aggregate_colocated(kept)?;
    report.collapsed = n - records.len();
    for (field, n) in &report.capped {
        log::warn!("{name}: capped {n} out-of-range `{field}` values");
    }
    Ok((records, report))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes records in the station format; floats use shortest round-trip
/// formatting so a read-back is exact.
pub fn write_stations(path: &Path, records: &[SensorRecord]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(STATION_HEADER)?;
        for r in records {
            let mut row = vec![
                r.site_id.clone(),
                format!("{}", r.lat),
                format!("{}", r.lon),
                format_date(r.date),
                format!("{}", r.pm25),
                r.land_cover.map(|c| c.to_string()).unwrap_or_default(),
            ];
            row.extend(STATION_HEADER[6..].iter().map(|f| fmt_opt(r.covariate(f))));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    super::scaler::write_atomic(path, &buf)
}

/// Covariates aggregated onto hex cells, keyed by cell and day.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovariateTable {
    pub resolution: u8,
    pub cells: BTreeMap<(HexCellId, Day), BTreeMap<String, f64>>,
}

impl CovariateTable {
    pub fn lookup(&self, lat: f64, lon: f64, date: Day) -> Result<Option<&BTreeMap<String, f64>>> {
        let id = hex_index(lat, lon, self.resolution)?;
        Ok(self.cells.get(&(id, date)))
    }

    /// Fills every covariate a record lacks from its cell; present values
    /// win. Returns how many values were filled.
    pub fn attach(&self, records: &mut [SensorRecord]) -> Result<usize> {
        let mut filled = 0;
        for r in records.iter_mut() {
            let Some(vars) = self.lookup(r.lat, r.lon, r.date)? else {
                continue;
            };
            for name in COVARIATES {
                let slot = r.covariate_mut(name).expect("known covariate");
                if slot.is_none() {
                    if let Some(&v) = vars.get(name) {
                        *slot = Some(v);
                        filled += 1;
                    }
                }
            }
        }
        Ok(filled)
    }
}

#[derive(Default)]
struct GridGroup {
    scalars: BTreeMap<String, Vec<(f64, f64)>>,
    // keyed by source cell so speed and direction rows pair up
    wind: BTreeMap<(u64, u64), (Option<f64>, Option<f64>, f64)>,
}

/// Parses a covariate grid and aggregates it onto hex cells. Scalar
/// variables use the area-weighted mean; `wind_speed`/`wind_dir` rows from
/// the same source cell are paired and combined as vectors.
pub fn parse_covariate_grid<R: Read>(reader: R, name: &str) -> Result<CovariateTable> {
    let mut rdr = csv_reader(reader);
    check_header(name, rdr.headers()?, &GRID_HEADER)?;
    let mut groups: BTreeMap<(HexCellId, Day), GridGroup> = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            line_err(name, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != GRID_HEADER.len() {
            return Err(line_err(name, line, format!("expected 6 fields, found {}", row.len())));
        }
        let lat = parse_f64(name, line, "cell_lat", &row[0])?;
        let lon = parse_f64(name, line, "cell_lon", &row[1])?;
        validate_latlon(lat, lon).map_err(|e| line_err(name, line, e.to_string()))?;
        let date = parse_date(&row[2]).map_err(|e| line_err(name, line, e.to_string()))?;
        let variable = row[3].to_string();
        if !COVARIATES.contains(&variable.as_str()) {
            return Err(line_err(name, line, format!("unknown variable `{variable}`")));
        }
        let value = parse_f64(name, line, "value", &row[4])?;
        let weight = parse_f64(name, line, "overlap_weight", &row[5])?;
        if weight < 0.0 {
            return Err(line_err(name, line, "negative overlap_weight"));
        }
        let id = hex_index(lat, lon, COVARIATE_HEX_RESOLUTION)?;
        let g = groups.entry((id, date)).or_default();
        match variable.as_str() {
            "wind_speed" | "wind_dir" => {
                let e = g.wind.entry((lat.to_bits(), lon.to_bits())).or_insert((None, None, weight));
                let slot = if variable == "wind_speed" { &mut e.0 } else { &mut e.1 };
                if slot.replace(value).is_some() {
                    return Err(line_err(name, line, format!("duplicate `{variable}` for one cell and day")));
                }
            }
            _ => g.scalars.entry(variable).or_default().push((value, weight)),
        }
    }

    let mut table = CovariateTable {
        resolution: COVARIATE_HEX_RESOLUTION,
        cells: BTreeMap::new(),
    };
    for (key, g) in groups {
        let mut vars = BTreeMap::new();
        for (var, cells) in g.scalars {
            vars.insert(var, aggregate_scalar_to_hex(&cells)?);
        }
        let wind: Vec<(f64, f64, f64)> = g
            .wind
            .values()
            .map(|&(s, d, w)| match (s, d) {
                (Some(s), Some(d)) => Ok((s, d, w)),
                _ => Err(Error::data(format!(
                    "{name}: wind speed and direction must come in pairs (day {})",
                    format_date(key.1)
                ))),
            })
            .collect::<Result<_>>()?;
        if !wind.is_empty() {
            let agg = aggregate_wind_to_hex(&wind)?;
            vars.insert("wind_speed".into(), agg.speed);
            vars.insert("wind_dir".into(), agg.dir);
        }
        table.cells.insert(key, vars);
    }
    Ok(table)
}

pub fn ingest_covariate_grid(path: &Path) -> Result<CovariateTable> {
    parse_covariate_grid(open(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: &str = "site_id,lat,lon,date,pm25,land_cover,elevation,tmin,tmax,rhmin,rhmax,precip,wind_speed,wind_dir,pop_day,pop_night\n";

    fn parse(body: &str) -> Result<(Vec<SensorRecord>, IngestReport)> {
        let mut rep = IngestReport::default();
        let text = format!("{HEAD}{body}");
        parse_stations(text.as_bytes(), "mem.csv", &mut rep).map(|r| (r, rep))
    }

    #[test]
    fn three_rows() {
        let (r, rep) = parse(
            "a,40,-105,2020-01-01,5.5,21,1600,-3,8,20,80,0,2.5,270,100,90\n\
             b,41,-104,2020-01-01,7,41,,,,,,,,,,\n\
             c,39.5,-106,2020-01-02,3,,,,,,,,,,,\n",
        )
        .unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(rep.rows, 3);
        assert_eq!(r[0].wind_dir, Some(270.0));
        assert_eq!(r[1].land_cover, Some(41));
        assert_eq!(r[1].tmin, None);
        assert_eq!(r[2].date, parse_date("2020-01-02").unwrap());
    }

    #[test]
    fn bad_latitude_names_line() {
        let err = parse("a,40,-105,2020-01-01,5,,,,,,,,,,,\nb,95,-105,2020-01-01,5,,,,,,,,,,,\n").unwrap_err();
        match err {
            Error::DataLine { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("latitude"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_number_names_line() {
        let err = parse("a,40,-105,2020-01-01,abc,,,,,,,,,,,\n").unwrap_err();
        assert!(matches!(err, Error::DataLine { line: 2, .. }), "{err}");
    }

    #[test]
    fn out_of_range_values_are_capped_and_counted() {
        let (r, rep) = parse("a,40,-105,2020-01-01,5,,,,,-5,120,-1,,360,,\n").unwrap();
        assert_eq!(r[0].rhmin, Some(0.0));
        assert_eq!(r[0].rhmax, Some(100.0));
        assert_eq!(r[0].precip, Some(0.0));
        assert_eq!(r[0].wind_dir, Some(0.0));
        assert_eq!(rep.capped.values().sum::<usize>(), 4);
    }

    #[test]
    fn duplicates_collapse_on_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.csv");
        std::fs::write(
            &path,
            format!("{HEAD}a,40,-105,2020-01-01,10,,,,,,,,,,,\na,40,-105,2020-01-01,14,,,,,,,,,,,\nb,40,-104,2020-01-01,0.001,,,,,,,,,,,\n"),
        )
        .unwrap();
        let (r, rep) = ingest_stations(&path).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].pm25, 12.0);
        assert_eq!(rep.collapsed, 1);
        assert_eq!(rep.dropped_low, 1);
    }

    #[test]
    fn station_file_round_trip() {
        let (r, _) = parse("a,40.123456789,-105.5,2020-01-01,5.123456789012,21,1600,-3,8,20,80,0,2.5,270,100,90\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.csv");
        write_stations(&path, &r).unwrap();
        let (back, _) = ingest_stations(&path).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn grid_aggregation() {
        let text = "cell_lat,cell_lon,date,variable,value,overlap_weight\n\
                    40.0,-105.0,2020-01-01,tmax,2,0.3\n\
                    40.0,-105.0,2020-01-01,tmax,8,0.7\n\
                    40.0,-105.0,2020-01-01,wind_speed,1,1\n\
                    40.0,-105.0,2020-01-01,wind_dir,350,1\n\
                    40.0001,-105.0,2020-01-01,wind_speed,1,1\n\
                    40.0001,-105.0,2020-01-01,wind_dir,10,1\n";
        let t = parse_covariate_grid(text.as_bytes(), "grid").unwrap();
        let day = parse_date("2020-01-01").unwrap();
        let vars = t.lookup(40.0, -105.0, day).unwrap().unwrap();
        assert!((vars["tmax"] - 6.2).abs() < 1e-12);
        assert!((vars["wind_speed"] - 10f64.to_radians().cos()).abs() < 1e-9);
        assert!(vars["wind_dir"].abs() < 1e-6 || (vars["wind_dir"] - 360.0).abs() < 1e-6);

        let mut recs = vec![SensorRecord::new("a", 40.0, -105.0, day, 3.0)];
        recs[0].tmax = Some(1.0);
        assert_eq!(t.attach(&mut recs).unwrap(), 2);
        assert_eq!(recs[0].tmax, Some(1.0));
        assert!(recs[0].wind_speed.is_some());
    }

    #[test]
    fn grid_rejects_unpaired_wind_and_bad_rows() {
        let text = "cell_lat,cell_lon,date,variable,value,overlap_weight\n40,-105,2020-01-01,wind_speed,1,1\n";
        assert!(parse_covariate_grid(text.as_bytes(), "g").is_err());
        let text = "cell_lat,cell_lon,date,variable,value,overlap_weight\n40,-105,2020-01-01,ozone,1,1\n";
        assert!(matches!(parse_covariate_grid(text.as_bytes(), "g"), Err(Error::DataLine { line: 2, .. })));
    }
}
