use std::io::Write;
use std::path::{Path, PathBuf};

use gridfree::config::{short_hash, RunConfig, SplitPart};
use gridfree::data::synth::{generate_synthetic, BBox, SiteLayout, SyntheticFieldSpec};
use gridfree::data::{
    ingest_covariate_grid, ingest_stations, write_atomic, write_stations, PreparedDataset, SplitKind,
};
use gridfree::eval::{
    evaluate_records, idw_baseline, parity_csv, run_loso, seasonal_report, sig_digits, EvalRow, RangeFilter,
    RegionMask, Summary,
};
use gridfree::model::{Model, QueryPoint, SensorPool};
use gridfree::record::{format_date, parse_date, COVARIATES};
use gridfree::train::{write_train_log, TrainOptions, Trainer};
use gridfree::uncertainty::{complete_query, mc_predict, uncertainty_csv, McSettings, SubsetPolicy};
use gridfree::{Error, Result};
use serde_json::json;

use crate::args::*;

pub const STATIONS_FILE: &str = "stations.csv";
pub const ORACLE_FILE: &str = "oracle.json";
pub const CONFIG_FILE: &str = "config.txt";

/// The configuration a command runs with: `--config` if given, else
/// `fallback`, else defaults; `--seed` overrides the seed.
fn resolve_config(global: &Global, fallback: Option<RunConfig>) -> Result<RunConfig> {
    let mut config = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => fallback.unwrap_or_default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn stations_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join(STATIONS_FILE)
    } else {
        input.to_path_buf()
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes).and_then(|_| stdout.flush()).map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Preprocess(a) => preprocess(g, a),
        Command::Train(a) => train(g, a),
        Command::Predict(a) => predict(g, a),
        Command::Uq(a) => uq(g, a),
        Command::Evaluate(a) => evaluate(g, a),
        Command::Loso(a) => loso(g, a),
    }
}

fn synth(g: &Global, a: SynthArgs) -> Result<()> {
    let config = resolve_config(g, None)?;
    let bbox = BBox::conus();
    let mut spec = SyntheticFieldSpec::with_random_sources(a.sites, a.days, a.sources, a.noise, bbox, config.seed);
    spec.missing_fraction = a.missing;
    spec.layout = match a.layout {
        Layout::Uniform => SiteLayout::Uniform,
        Layout::DenseSparse => SiteLayout::DenseSparse {
            split_lon: (bbox.lon_min + bbox.lon_max) / 2.0,
            dense_fraction: 0.8,
        },
        Layout::TwoRegion => SiteLayout::Clusters {
            centres: vec![(38.0, -110.0), (38.0, -85.0)],
            radius_deg: 6.0,
        },
    };
    let ds = generate_synthetic(&spec, config.seed)?;
    create_dir(&a.out)?;
    write_stations(&a.out.join(STATIONS_FILE), &ds.records)?;
    let oracle = json!({
        "seed": config.seed,
        "config_hash": config.hash(),
        "spec": spec,
        "naive_baseline_mae": ds.naive_baseline_mae,
    });
    write_atomic(&a.out.join(ORACLE_FILE), (serde_json::to_string_pretty(&oracle)? + "\n").as_bytes())?;
    eprintln!("wrote {} records to {}", ds.records.len(), a.out.display());
    Ok(())
}

fn preprocess(g: &Global, a: PreprocessArgs) -> Result<()> {
    let config = resolve_config(g, None)?;
    let (mut records, report) = ingest_stations(&stations_path(&a.input))?;
    if let Some(grid) = &a.covariates {
        let filled = ingest_covariate_grid(grid)?.attach(&mut records)?;
        log::info!("attached {filled} covariate values");
    }
    let kind = match a.split {
        SplitArg::Record => SplitKind::Record,
        SplitArg::Site => SplitKind::Site,
    };
    let data = PreparedDataset::preprocess(records, &config, kind, report)?;
    data.save(&a.out)?;
    write_atomic(&a.out.join(CONFIG_FILE), config.to_text().as_bytes())?;
    let m = &data.manifest;
    eprintln!(
        "{} records: {} train, {} val, {} test (data {})",
        m.n_records, m.n_train, m.n_val, m.n_test, m.data_hash
    );
    Ok(())
}

fn prepared_config(dir: &Path) -> Result<Option<RunConfig>> {
    let p = dir.join(CONFIG_FILE);
    if p.exists() {
        Ok(Some(RunConfig::load(&p)?))
    } else {
        Ok(None)
    }
}

fn train(g: &Global, a: TrainArgs) -> Result<()> {
    let data = PreparedDataset::load(&a.data)?;
    let config = resolve_config(g, prepared_config(&a.data)?)?;
    if config.lag_window != data.manifest.lag_window {
        return Err(Error::Config(format!(
            "lag_window {} differs from the prepared data's {}",
            config.lag_window, data.manifest.lag_window
        )));
    }
    let trainer = Trainer::new(&data, &config)?;
    let opts = TrainOptions {
        checkpoint: a.checkpoint.clone(),
        stop_after: None,
    };
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.csv"));
    let report = match trainer.run(&opts) {
        Ok(r) => r,
        Err(f) => {
            if let Some(m) = &f.last_good {
                let p = with_suffix(&a.out, ".last-good");
                m.save(&p)?;
                eprintln!("saved last good parameters to {}", p.display());
            }
            return Err(f.error);
        }
    };
    write_train_log(&report.log, &log_path)?;
    report.model.save(&a.out)?;
    eprintln!(
        "best epoch {} of {}{}; model {}",
        report.best_epoch,
        report.log.len(),
        if report.stopped_early { " (early stop)" } else { "" },
        a.out.display()
    );
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_query(s: &str) -> Result<QueryPoint> {
    let bad = || Error::Config(format!("query `{s}` is not LAT,LON,YYYY-MM-DD"));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [lat, lon, date] = parts[..] else {
        return Err(bad());
    };
    let lat: f64 = lat.parse().map_err(|_| bad())?;
    let lon: f64 = lon.parse().map_err(|_| bad())?;
    let date = parse_date(date).map_err(|_| bad())?;
    QueryPoint::new(lat, lon, date)
}

/// Reads a query CSV: `lat,lon,date` plus any of `land_cover` and the
/// covariate columns.
pub fn read_query_file(path: &Path) -> Result<Vec<QueryPoint>> {
    let name = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io {
            path: path.to_path_buf(),
            source: io,
        },
        other => Error::Data(format!("{name}: {other:?}")),
    })?;
    let headers = rdr.headers()?.clone();
    let col = |n: &str| headers.iter().position(|h| h.trim() == n);
    let (Some(ilat), Some(ilon), Some(idate)) = (col("lat"), col("lon"), col("date")) else {
        return Err(Error::DataLine {
            path: name,
            line: 1,
            msg: "header must name lat, lon and date".into(),
        });
    };
    let iland = col("land_cover");
    let icov: Vec<Option<usize>> = COVARIATES.iter().map(|c| col(c)).collect();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let err = |msg: String| Error::DataLine {
            path: name.clone(),
            line,
            msg,
        };
        let num = |i: usize, field: &str| -> Result<f64> {
            row.get(i)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| err(format!("`{field}` is not a number")))
        };
        let date = parse_date(row.get(idate).unwrap_or("")).map_err(|e| err(e.to_string()))?;
        let mut q = QueryPoint::new(num(ilat, "lat")?, num(ilon, "lon")?, date).map_err(|e| err(e.to_string()))?;
        let present = |i: Option<usize>| i.and_then(|i| row.get(i)).map(str::trim).filter(|v| !v.is_empty());
        if let Some(v) = present(iland) {
            q.land_cover = Some(v.parse().map_err(|_| err("`land_cover` is not an integer".into()))?);
        }
        for (slot, (i, field)) in q.covariates.iter_mut().zip(icov.iter().zip(COVARIATES)) {
            if let Some(v) = present(*i) {
                *slot = Some(v.parse().map_err(|_| err(format!("`{field}` is not a number")))?);
            }
        }
        out.push(q);
    }
    Ok(out)
}

struct QueryContext {
    model: Model,
    data: PreparedDataset,
    pool: SensorPool,
    points: Vec<QueryPoint>,
}

/// Loads the model and sensors and collects the query points. Every record
/// of the prepared directory serves as a sensor.
fn query_context(a: &QueryArgs) -> Result<QueryContext> {
    let mut points: Vec<QueryPoint> = a.query.iter().map(|q| parse_query(q)).collect::<Result<_>>()?;
    if let Some(f) = &a.query_file {
        points.extend(read_query_file(f)?);
    }
    if points.is_empty() {
        return Err(Error::Config("no query points: pass --query or --query-file".into()));
    }
    let model = Model::load(&a.model)?;
    let data = PreparedDataset::load(&a.data)?;
    let all: Vec<usize> = (0..data.records.len()).collect();
    let pool = SensorPool::build(&data.records, &data.lags, &all, &model.scalers, &model.schema)?;
    for p in &mut points {
        complete_query(p, &pool, &data.records);
    }
    Ok(QueryContext {
        model,
        data,
        pool,
        points,
    })
}

fn mc_config(g: &Global, model: &Model) -> Result<RunConfig> {
    resolve_config(g, Some(model.config.clone()))
}

fn predict(g: &Global, a: QueryArgs) -> Result<()> {
    let ctx = query_context(&a)?;
    let settings = McSettings::from_config(&mc_config(g, &ctx.model)?);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lat", "lon", "date", "pm25"])?;
    for (i, p) in ctx.points.iter().enumerate() {
        let r = mc_predict(&ctx.model, &ctx.pool, p, None, &settings, i as u64)?;
        w.write_record([
            p.lat.to_string(),
            p.lon.to_string(),
            format_date(p.date),
            sig_digits(r.mean, 9),
        ])?;
    }
    let _ = &ctx.data;
    emit(a.out.as_deref(), &w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
}

fn uq(g: &Global, a: UqArgs) -> Result<()> {
    if let Some(m) = a.m {
        if m < 2 {
            return Err(Error::Config(format!("--m must be at least 2, got {m}")));
        }
    }
    let ctx = query_context(&a.query)?;
    let config = mc_config(g, &ctx.model)?;
    let policy = match a.policy {
        PolicyArg::Gaussian => SubsetPolicy::from_config(&config),
        PolicyArg::Nearest => SubsetPolicy::Nearest { n: config.n_sensors },
        PolicyArg::All => SubsetPolicy::All,
    };
    let settings = McSettings {
        policy,
        m: a.m.unwrap_or(config.mc_samples),
        seed: config.seed,
    };
    let rows = ctx
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| mc_predict(&ctx.model, &ctx.pool, p, None, &settings, i as u64))
        .collect::<Result<Vec<_>>>()?;
    emit(a.query.out.as_deref(), &uncertainty_csv(&rows)?)
}

fn parse_range(s: &str) -> Result<RangeFilter> {
    let bad = || Error::Config(format!("range `{s}` is not MIN-MAX"));
    let (lo, hi) = s.split_once('-').ok_or_else(bad)?;
    let f = RangeFilter {
        min: lo.trim().parse().map_err(|_| bad())?,
        max: hi.trim().parse().map_err(|_| bad())?,
    };
    if f.min > f.max {
        return Err(bad());
    }
    Ok(f)
}

fn seasonal_csv(rows: &[EvalRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["season", "cell", "n", "mae", "rmse", "mape", "bias", "r2"])?;
    for c in seasonal_report(rows)? {
        let m = c.metrics;
        w.write_record([
            c.season.name().to_string(),
            c.cell,
            m.n.to_string(),
            sig_digits(m.mae, 9),
            sig_digits(m.rmse, 9),
            sig_digits(m.mape, 9),
            sig_digits(m.bias, 9),
            m.r2.map(|r| sig_digits(r, 9)).unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

fn evaluate(g: &Global, a: EvaluateArgs) -> Result<()> {
    let ranges: Vec<RangeFilter> = a.range.iter().map(|r| parse_range(r)).collect::<Result<_>>()?;
    let model_bytes = std::fs::read(&a.model).map_err(|e| Error::Io {
        path: a.model.clone(),
        source: e,
    })?;
    let model = Model::from_bytes(&model_bytes)?;
    let data = PreparedDataset::load(&a.data)?;
    if model.data_hash != data.manifest.data_hash {
        return Err(Error::Data(format!(
            "model was trained on data {} but {} holds {}",
            model.data_hash,
            a.data.display(),
            data.manifest.data_hash
        )));
    }
    let (part, name) = match a.split {
        SplitName::Train => (SplitPart::Train, "train"),
        SplitName::Val => (SplitPart::Val, "val"),
        SplitName::Test => (SplitPart::Test, "test"),
    };
    let config = mc_config(g, &model)?;
    let settings = McSettings::from_config(&config);
    let pool = SensorPool::build(&data.records, &data.lags, data.part(SplitPart::Train), &model.scalers, &model.schema)?;
    let rows = evaluate_records(&model, &pool, &data.records, data.part(part), &settings)?;
    if rows.is_empty() {
        return Err(Error::Data(format!("no {name} record has a same-day sensor to predict from")));
    }
    let baseline: Vec<EvalRow> = rows
        .iter()
        .map(|r| {
            let rec = &data.records[r.record];
            let p = idw_baseline(&pool, &data.records, rec, config.n_sensors)?.expect("row has candidates");
            Ok(EvalRow {
                predicted: p,
                variance: 0.0,
                cv: None,
                ..r.clone()
            })
        })
        .collect::<Result<_>>()?;

    let mut summary = Summary {
        model_hash: short_hash(&model_bytes),
        data_hash: data.manifest.data_hash.clone(),
        config_hash: config.hash(),
        seed: config.seed,
        ..Summary::default()
    };
    summary.add_split(name, &rows, &ranges)?;
    summary.add_split(&format!("{name}_idw2"), &baseline, &ranges)?;

    create_dir(&a.out)?;
    write_atomic(&a.out.join("summary.json"), summary.to_json()?.as_bytes())?;
    write_atomic(&a.out.join("parity.csv"), &parity_csv(&rows)?)?;
    write_atomic(&a.out.join("seasonal.csv"), &seasonal_csv(&rows)?)?;
    let m = summary.get(name, "all", "all").expect("split just added");
    let b = summary.get(&format!("{name}_idw2"), "all", "all").expect("split just added");
    println!(
        "{name}: n {} mae {} rmse {} mape {} r2 {}",
        m.n,
        sig_digits(m.mae, 6),
        sig_digits(m.rmse, 6),
        sig_digits(m.mape, 6),
        m.r2.map(|r| sig_digits(r, 6)).unwrap_or_else(|| "-".into())
    );
    println!("idw2 baseline: mae {} r2 {}", sig_digits(b.mae, 6), b.r2.map(|r| sig_digits(r, 6)).unwrap_or_else(|| "-".into()));
    Ok(())
}

fn loso(g: &Global, a: LosoArgs) -> Result<()> {
    let region = RegionMask::parse_box(&a.region)?;
    let config = resolve_config(g, None)?;
    let (records, _) = ingest_stations(&stations_path(&a.input))?;
    let run = run_loso(records, &region, &config)?;
    create_dir(&a.out)?;
    let mut report = serde_json::to_string_pretty(&run.report)?;
    report.push('\n');
    write_atomic(&a.out.join("loso.json"), report.as_bytes())?;
    write_atomic(&a.out.join("parity_excluded.csv"), &parity_csv(&run.excluded_rows)?)?;
    write_atomic(&a.out.join("parity_included.csv"), &parity_csv(&run.included_rows)?)?;
    let r2 = |m: &gridfree::eval::Metrics| m.r2.map(|r| sig_digits(r, 6)).unwrap_or_else(|| "-".into());
    println!(
        "region excluded: r2 {} mae {}",
        r2(&run.report.excluded),
        sig_digits(run.report.excluded.mae, 6)
    );
    println!(
        "region included: r2 {} mae {}",
        r2(&run.report.included),
        sig_digits(run.report.included.mae, 6)
    );
    println!(
        "leakage: {} of {} audited batches' examples touched the region",
        run.report.leaked_examples, run.report.batches_audited
    );
    if run.report.leaked_examples > 0 {
        return Err(Error::Data("held-out region records reached training".into()));
    }
    Ok(())
}
