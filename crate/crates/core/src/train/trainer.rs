//! The training loop: batch assembly, gradients, early stopping and
//! checkpoints.

use std::fmt;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{derived_rng, RunConfig, SplitPart};
use crate::data::{write_atomic, PreparedDataset, PM25};
use crate::error::{Error, Result};
use crate::model::{assemble_query_token, Model, QueryPoint, Scalar, SensorPool, Token};

use super::loss::{compute_loss, loss_weights};
use super::optim::Optimizer;
use super::sampler::{sample_nearby_sensors, sample_query_batch};

/// Stream tags for the derived random streams.
const TRAIN_STREAM: u64 = 0x7124;
const VAL_STREAM: u64 = 0x7a1d;

/// Validation uses at most this many fixed queries.
pub const MAX_VAL_QUERIES: usize = 512;
/// Examples per gradient work unit; partial gradients are summed in unit
/// order, so results do not depend on the thread count.
const CHUNK: usize = 4;

const CHECKPOINT_MAGIC: &[u8; 8] = b"GFCKPT01";

/// A training query with its eligible sensors.
#[derive(Debug, Clone)]
struct Item {
    /// Record index of the query.
    record: usize,
    site_id: String,
    token: Token,
    target: f64,
    /// Pool positions of same-day sensors at other sites.
    candidates: Vec<usize>,
    coord: crate::geo::SphericalCoord,
}

/// One example of a batch, in record indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub query: usize,
    pub sensors: Vec<usize>,
}

/// A sampled batch, handed to the batch hook before it is used.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub epoch: usize,
    pub batch: usize,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone)]
struct Draw {
    item: usize,
    sensors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when there is no validation split.
    pub val_loss: f64,
    pub wall_seconds: f64,
}

pub fn write_train_log(rows: &[TrainLogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_loss", "wall_seconds"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            format!("{:.3}", r.wall_seconds),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Written at every epoch boundary; resumed from when present.
    pub checkpoint: Option<PathBuf>,
    /// Stop after this many epochs in total, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub struct TrainReport {
    /// Carries the parameters of the best epoch.
    pub model: Model,
    pub log: Vec<TrainLogRow>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// False when `stop_after` cut the run short.
    pub completed: bool,
}

/// Training stopped on an error. `last_good` holds the most recent finite
/// parameters, when there were any updates to keep.
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Model>,
}

impl fmt::Debug for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainFailure")
            .field("error", &self.error)
            .field("last_good", &self.last_good.is_some())
            .finish()
    }
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure { error, last_good: None }
    }
}

/// Everything needed to continue a run from an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub next_epoch: usize,
    pub params: Vec<f64>,
    pub optimizer: Optimizer,
    pub best_params: Vec<f64>,
    pub best_score: Option<f64>,
    pub best_epoch: usize,
    pub since_best: usize,
    pub log: Vec<TrainLogRow>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config_hash: String,
    data_hash: String,
    next_epoch: usize,
    best_score: Option<f64>,
    best_epoch: usize,
    since_best: usize,
    optimizer: crate::config::OptimizerKind,
    t: u64,
    n_params: usize,
    n_moments: usize,
    log: Vec<TrainLogRow>,
}

impl TrainState {
    pub fn save(&self, path: &Path, config_hash: &str, data_hash: &str) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config_hash: config_hash.into(),
            data_hash: data_hash.into(),
            next_epoch: self.next_epoch,
            best_score: self.best_score,
            best_epoch: self.best_epoch,
            since_best: self.since_best,
            optimizer: self.optimizer.kind,
            t: self.optimizer.t,
            n_params: self.params.len(),
            n_moments: self.optimizer.m.len(),
            log: self.log.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in [&self.params, &self.best_params, &self.optimizer.m, &self.optimizer.v] {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        write_atomic(path, &out)
    }

    pub fn load(path: &Path, config_hash: &str, data_hash: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::data(format!("checkpoint {}: {m}", path.display()));
        let mut cur = Cursor::new(bytes.as_slice());
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let mut b8 = [0u8; 8];
        cur.read_exact(&mut b8).map_err(|_| bad("truncated"))?;
        let hlen = u64::from_le_bytes(b8) as usize;
        let body = &bytes[16..];
        let h: CheckpointHeader = serde_json::from_slice(body.get(..hlen).ok_or_else(|| bad("truncated"))?)?;
        if h.config_hash != config_hash || h.data_hash != data_hash {
            return Err(bad("written for a different configuration or dataset"));
        }
        let floats: Vec<f64> = body[hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (n, k) = (h.n_params, h.n_moments);
        if floats.len() != 2 * n + 2 * k || body[hlen..].len() % 8 != 0 {
            return Err(bad("array sizes do not match the header"));
        }
        Ok(TrainState {
            next_epoch: h.next_epoch,
            params: floats[..n].to_vec(),
            best_params: floats[n..2 * n].to_vec(),
            optimizer: Optimizer {
                kind: h.optimizer,
                t: h.t,
                m: floats[2 * n..2 * n + k].to_vec(),
                v: floats[2 * n + k..].to_vec(),
            },
            best_score: h.best_score,
            best_epoch: h.best_epoch,
            since_best: h.since_best,
            log: h.log,
        })
    }
}

pub struct Trainer {
    pub config: RunConfig,
    model: Model,
    pool: SensorPool,
    items: Vec<Item>,
    val_items: Vec<Item>,
    val_draws: Vec<Draw>,
}

impl Trainer {
    /// Sets up a run on the training part of `data`. Sensors come from the
    /// training part only, on the query's day and never from its site.
    pub fn new(data: &PreparedDataset, config: &RunConfig) -> Result<Self> {
        let mut model = Model::new(config, data.scalers.clone(), data.manifest.data_hash.clone())?;
        let pool = SensorPool::build(&data.records, &data.lags, data.part(SplitPart::Train), &model.scalers, &model.schema)?;
        let items = Self::items(data, &model, &pool, data.part(SplitPart::Train))?;
        if items.is_empty() {
            return Err(Error::data("no training record has a same-day sensor at another site"));
        }
        let mean_target = items.iter().map(|i| i.target).sum::<f64>() / items.len() as f64;
        let bias = model.net.output_bias();
        model.params[bias].fill(mean_target);

        let mut val_items = Self::items(data, &model, &pool, data.part(SplitPart::Val))?;
        let mut rng = derived_rng(config.seed, &[VAL_STREAM]);
        if val_items.len() > MAX_VAL_QUERIES {
            let mut keep = rand::seq::index::sample(&mut rng, val_items.len(), MAX_VAL_QUERIES).into_vec();
            keep.sort_unstable();
            val_items = keep.into_iter().map(|k| val_items[k].clone()).collect();
        }
        let val_draws = (0..val_items.len())
            .map(|k| draw(&pool, &val_items, k, config, &mut rng))
            .collect();
        Ok(Trainer {
            config: config.clone(),
            model,
            pool,
            items,
            val_items,
            val_draws,
        })
    }

    fn items(data: &PreparedDataset, model: &Model, pool: &SensorPool, part: &[usize]) -> Result<Vec<Item>> {
        let log = model.scalers.get(PM25)?;
        part.par_iter()
            .filter_map(|&i| {
                let r = &data.records[i];
                let candidates = pool.candidates(r.date, Some(&r.site_id));
                if candidates.is_empty() {
                    return None;
                }
                let build = || -> Result<Item> {
                    Ok(Item {
                        record: i,
                        site_id: r.site_id.clone(),
                        token: assemble_query_token(&QueryPoint::from_record(r), &model.scalers, &model.schema)?,
                        target: log.apply(r.pm25)?,
                        candidates,
                        coord: crate::geo::encode_latlon(r.lat, r.lon)?,
                    })
                };
                Some(build())
            })
            .collect()
    }

    /// The model as initialized, before any update.
    pub fn initial_model(&self) -> &Model {
        &self.model
    }

    pub fn n_queries(&self) -> usize {
        self.items.len()
    }

    pub fn n_val_queries(&self) -> usize {
        self.val_items.len()
    }

    pub fn pool(&self) -> &SensorPool {
        &self.pool
    }

    fn draws(&self, epoch: usize, batch: usize) -> Result<Vec<Draw>> {
        let mut rng = derived_rng(self.config.seed, &[TRAIN_STREAM, epoch as u64, batch as u64]);
        let picks = sample_query_batch(self.items.len(), self.config.batch_size, &mut rng)?;
        Ok(picks
            .into_iter()
            .map(|k| draw(&self.pool, &self.items, k, &self.config, &mut rng))
            .collect())
    }

    fn to_batch(&self, epoch: usize, batch: usize, draws: &[Draw]) -> TrainBatch {
        TrainBatch {
            epoch,
            batch,
            examples: draws
                .iter()
                .map(|d| Example {
                    query: self.items[d.item].record,
                    sensors: d.sensors.iter().map(|&k| self.pool.entries[k].record).collect(),
                })
                .collect(),
        }
    }

    /// The batch the run uses at `(epoch, batch)`; a pure function of the
    /// seed.
    pub fn sample_batch(&self, epoch: usize, batch: usize) -> Result<TrainBatch> {
        Ok(self.to_batch(epoch, batch, &self.draws(epoch, batch)?))
    }

    /// Loss and gradient of one batch, computed in `T` and accumulated in
    /// f64.
    fn gradient<T: Scalar>(&self, params: &[f64], items: &[Item], draws: &[Draw]) -> Result<(f64, Vec<f64>)> {
        let p: Vec<T> = params.iter().map(|&x| T::c(x)).collect();
        let sizes: Vec<usize> = draws.iter().map(|d| d.sensors.len()).collect();
        let w = loss_weights(&sizes)?;
        let b = draws.len() as f64;
        let net = &self.model.net;
        let parts: Vec<(Vec<T>, Vec<f64>)> = draws
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut g = vec![T::zero(); p.len()];
                let mut preds = Vec::with_capacity(chunk.len());
                for (j, d) in chunk.iter().enumerate() {
                    let item = &items[d.item];
                    let sensors = self.pool.tokens(&d.sensors);
                    let coef = T::c(2.0 * w[c * CHUNK + j] / b);
                    let t = T::c(item.target);
                    let y = net.backprop_output(&p, &mut g, &sensors, &item.token, |y| coef * (y - t))?;
                    preds.push(y.to_f64().unwrap_or(f64::NAN));
                }
                Ok((g, preds))
            })
            .collect::<Result<_>>()?;
        let mut grad = vec![0.0f64; params.len()];
        let mut preds = Vec::with_capacity(draws.len());
        for (g, pr) in parts {
            for (a, x) in grad.iter_mut().zip(&g) {
                *a += x.to_f64().unwrap_or(f64::NAN);
            }
            preds.extend(pr);
        }
        let targets: Vec<f64> = draws.iter().map(|d| items[d.item].target).collect();
        let loss = compute_loss(&preds, &targets, &sizes)?;
        Ok((loss, grad))
    }

    /// Weighted validation loss, or NaN without validation queries.
    pub fn validation_loss(&self, params: &[f64]) -> Result<f64> {
        if self.val_draws.is_empty() {
            return Ok(f64::NAN);
        }
        let p: Vec<f32> = params.iter().map(|&x| x as f32).collect();
        let preds: Vec<f64> = self
            .val_draws
            .par_iter()
            .map(|d| {
                let y = self.model.net.forward(&p, &self.pool.tokens(&d.sensors), &self.val_items[d.item].token)?;
                Ok(y as f64)
            })
            .collect::<Result<_>>()?;
        let targets: Vec<f64> = self.val_draws.iter().map(|d| self.val_items[d.item].target).collect();
        let sizes: Vec<usize> = self.val_draws.iter().map(|d| d.sensors.len()).collect();
        compute_loss(&preds, &targets, &sizes)
    }

    fn model_with(&self, params: Vec<f64>) -> Model {
        Model {
            params,
            ..self.model.clone()
        }
    }

    fn fresh_state(&self) -> TrainState {
        TrainState {
            next_epoch: 0,
            params: self.model.params.clone(),
            optimizer: Optimizer::new(self.config.optimizer, self.model.params.len()),
            best_params: self.model.params.clone(),
            best_score: None,
            best_epoch: 0,
            since_best: 0,
            log: Vec::new(),
        }
    }

    pub fn run(&self, opts: &TrainOptions) -> Result<TrainReport, TrainFailure> {
        self.run_with(opts, &mut |_| {})
    }

    /// Trains to completion, early stop, or `stop_after`. `on_batch` sees
    /// every batch before it is used.
    pub fn run_with(&self, opts: &TrainOptions, on_batch: &mut dyn FnMut(&TrainBatch)) -> Result<TrainReport, TrainFailure> {
        let config_hash = self.config.hash();
        let data_hash = self.model.data_hash.clone();
        let mut st = match &opts.checkpoint {
            Some(path) if path.exists() => TrainState::load(path, &config_hash, &data_hash)?,
            _ => self.fresh_state(),
        };
        let mut stopped_early = self.config.patience > 0 && st.since_best >= self.config.patience;
        let mut completed = true;

        for epoch in st.next_epoch..self.config.n_epochs {
            if stopped_early {
                break;
            }
            if opts.stop_after.is_some_and(|n| epoch >= n) {
                completed = false;
                break;
            }
            let t0 = Instant::now();
            let mut total = 0.0;
            for batch in 0..self.config.n_batches {
                let draws = self.draws(epoch, batch)?;
                on_batch(&self.to_batch(epoch, batch, &draws));
                let fail = |error: Error, p: &[f64]| TrainFailure {
                    error,
                    last_good: Some(self.model_with(p.to_vec())),
                };
                let (loss, grad) = match self.gradient::<f32>(&st.params, &self.items, &draws) {
                    Ok(r) => r,
                    Err(Error::NonFinite(_)) => return Err(fail(Error::Diverged { epoch, batch }, &st.params)),
                    Err(e) => return Err(fail(e, &st.params)),
                };
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(fail(Error::Diverged { epoch, batch }, &st.params));
                }
                let before = st.params.clone();
                st.optimizer.step(&mut st.params, &grad, self.config.learning_rate);
                if st.params.iter().any(|p| !p.is_finite()) {
                    return Err(fail(Error::Diverged { epoch, batch }, &before));
                }
                total += loss;
            }
            let train_loss = total / self.config.n_batches.max(1) as f64;
            let val_loss = self.validation_loss(&st.params).map_err(|e| TrainFailure {
                error: e,
                last_good: Some(self.model_with(st.params.clone())),
            })?;
            let score = if val_loss.is_nan() { train_loss } else { val_loss };
            if st.best_score.map_or(true, |b| score < b) {
                st.best_score = Some(score);
                st.best_params.clone_from(&st.params);
                st.best_epoch = epoch;
                st.since_best = 0;
            } else {
                st.since_best += 1;
            }
            log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
            st.log.push(TrainLogRow {
                epoch,
                train_loss,
                val_loss,
                wall_seconds: t0.elapsed().as_secs_f64(),
            });
            st.next_epoch = epoch + 1;
            if let Some(path) = &opts.checkpoint {
                st.save(path, &config_hash, &data_hash)?;
            }
            stopped_early = self.config.patience > 0 && st.since_best >= self.config.patience;
        }
        Ok(TrainReport {
            model: self.model_with(st.best_params),
            log: st.log,
            best_epoch: st.best_epoch,
            stopped_early,
            completed,
        })
    }

    /// Loss and f64 gradient of one batch at `params`.
    pub fn batch_gradient(&self, params: &[f64], epoch: usize, batch: usize) -> Result<(f64, Vec<f64>)> {
        self.gradient::<f64>(params, &self.items, &self.draws(epoch, batch)?)
    }
}

fn draw(pool: &SensorPool, items: &[Item], k: usize, config: &RunConfig, rng: &mut crate::config::Rng) -> Draw {
    let item = &items[k];
    let coords: Vec<_> = item.candidates.iter().map(|&c| pool.entries[c].coord).collect();
    let picked = sample_nearby_sensors(&item.coord, &coords, config.n_sensors, config.sampling_sigma, rng);
    debug_assert!(picked.iter().all(|&p| pool.entries[item.candidates[p]].site_id != item.site_id));
    Draw {
        item: k,
        sensors: picked.into_iter().map(|p| item.candidates[p]).collect(),
    }
}
