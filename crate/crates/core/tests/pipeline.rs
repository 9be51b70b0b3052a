use gridfree::config::{RunConfig, SplitPart};
use gridfree::data::{
    generate_synthetic, ingest_stations, write_stations, BBox, PreparedDataset, SplitKind, SyntheticFieldSpec,
};
use gridfree::eval::{evaluate_records, mae};
use gridfree::model::{Model, QueryPoint, SensorPool};
use gridfree::train::{TrainOptions, Trainer};
use gridfree::uncertainty::{mc_predict, McSettings};
use proptest::prelude::*;

fn tiny() -> RunConfig {
    RunConfig {
        latent_count: 4,
        latent_dim: 8,
        n_heads: 2,
        n_blocks: 1,
        recycle_count: 1,
        fourier_bands: 2,
        embed_dim: 2,
        lag_window: 3,
        n_sensors: 5,
        batch_size: 8,
        n_batches: 5,
        n_epochs: 3,
        learning_rate: 3e-3,
        mc_samples: 4,
        ..RunConfig::default()
    }
}

fn prepared(config: &RunConfig, dir: &std::path::Path) -> PreparedDataset {
    let spec = SyntheticFieldSpec::with_random_sources(24, 14, 2, 0.3, BBox::conus(), 5);
    let ds = generate_synthetic(&spec, 5).unwrap();
    let csv = dir.join("stations.csv");
    write_stations(&csv, &ds.records).unwrap();
    let (records, report) = ingest_stations(&csv).unwrap();
    PreparedDataset::preprocess(records, config, SplitKind::Site, report).unwrap()
}

#[test]
fn prepared_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny();
    let data = prepared(&config, dir.path());
    let out = dir.path().join("p");
    data.save(&out).unwrap();
    let back = PreparedDataset::load(&out).unwrap();
    assert_eq!(back.manifest, data.manifest);
    assert_eq!(back.records, data.records);
    assert_eq!(back.scalers, data.scalers);
    assert_eq!(back.split, data.split);
    assert_eq!(back.lags, data.lags);
}

#[test]
fn held_out_sites_never_train() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(&tiny(), dir.path());
    let sites = |p: SplitPart| -> std::collections::BTreeSet<&str> {
        data.part(p).iter().map(|&i| data.records[i].site_id.as_str()).collect()
    };
    let train = sites(SplitPart::Train);
    for p in [SplitPart::Val, SplitPart::Test] {
        assert!(sites(p).is_disjoint(&train));
    }
}

#[test]
fn trained_model_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny();
    let data = prepared(&config, dir.path());
    let trainer = Trainer::new(&data, &config).unwrap();
    let model = trainer.run(&TrainOptions::default()).unwrap().model;
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded.params, model.params);
    assert_eq!(loaded.to_bytes().unwrap(), model.to_bytes().unwrap());

    let pool = SensorPool::build(&data.records, &data.lags, data.part(SplitPart::Train), &loaded.scalers, &loaded.schema)
        .unwrap();
    let settings = McSettings::from_config(&config);
    let a = evaluate_records(&model, trainer.pool(), &data.records, data.part(SplitPart::Test), &settings).unwrap();
    let b = evaluate_records(&loaded, &pool, &data.records, data.part(SplitPart::Test), &settings).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty());
    let pred: Vec<f64> = a.iter().map(|r| r.predicted).collect();
    let obs: Vec<f64> = a.iter().map(|r| r.observed).collect();
    assert!(mae(&pred, &obs).unwrap().is_finite());
}

#[test]
fn corrupted_artifact_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny();
    let data = prepared(&config, dir.path());
    let model = Trainer::new(&data, &config).unwrap().initial_model().clone();
    let mut bytes = model.to_bytes().unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    bytes.truncate(n - 1);
    assert!(Model::from_bytes(&bytes).is_err());
    assert!(Model::from_bytes(b"not a model").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn predictions_are_finite_and_non_negative(lat in 25.0f64..49.0, lon in -124.0f64..-67.0, day in 0i64..14) {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny();
        let data = prepared(&config, dir.path());
        let model = Trainer::new(&data, &config).unwrap().initial_model().clone();
        let all: Vec<usize> = (0..data.records.len()).collect();
        let pool = SensorPool::build(&data.records, &data.lags, &all, &model.scalers, &model.schema).unwrap();
        let first = data.records.iter().map(|r| r.date).min().unwrap();
        let mut q = QueryPoint::new(lat, lon, first + day).unwrap();
        gridfree::uncertainty::complete_query(&mut q, &pool, &data.records);
        let p = mc_predict(&model, &pool, &q, None, &McSettings::from_config(&config), 0).unwrap();
        prop_assert!(p.mean.is_finite() && p.mean >= 0.0);
        prop_assert!(p.variance >= 0.0);
    }
}
