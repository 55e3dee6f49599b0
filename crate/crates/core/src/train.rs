//! MSE training with Adam, early stopping and JSON checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{self, Track};
use crate::features::{self, FeatureSequence, NormStats};
use crate::models::{stack_windows, ModelConfig, ModelError, SpeedModel, TargetStats};
use crate::params::{Grads, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("need at least 2 labeled tracks with {min_frames}+ frames, found {found}")]
    NoLabeledData { found: usize, min_frames: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}; try a lower learning rate")]
    NonFinite { epoch: usize, batch: usize },
    #[error("length mismatch: {0} predictions vs {1} targets")]
    Length(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] dataio::DataError),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path} is corrupt: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("checkpoint {path} has format version {found}; this build reads version {expected}")]
    Version { path: String, found: u64, expected: u32 },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    60
}
fn d_seed() -> u64 {
    42
}
fn d_patience() -> usize {
    10
}
fn d_val() -> f64 {
    0.1
}
fn d_stride() -> usize {
    4
}
fn d_clip() -> f64 {
    5.0
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps_adam: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "d_val")]
    pub val_fraction: f64,
    /// Step between the start frames of consecutive training windows.
    #[serde(default = "d_stride")]
    pub window_stride: usize,
    /// Global L2 norm above which gradients are rescaled.
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    /// Return the parameters of the best validation epoch instead of the last.
    #[serde(default = "yes")]
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps_adam: d_eps(),
            batch_size: d_batch(),
            epochs: d_epochs(),
            seed: d_seed(),
            early_stop_patience: d_patience(),
            val_fraction: d_val(),
            window_stride: d_stride(),
            grad_clip: d_clip(),
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.eps_adam > 0.0) {
            return bad(format!("eps_adam {} must be positive", self.eps_adam));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} must lie in (0, 1)", self.val_fraction));
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if self.batch_size == 0 || self.window_stride == 0 {
            return bad("batch_size and window_stride must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip {} must be positive", self.grad_clip));
        }
        Ok(())
    }
}

/// `(mean((p − y)²), 2(p − y)/B)`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(TrainError::Length(pred.len(), target.len()));
    }
    let b = pred.len() as f64;
    let diff: Vec<f64> = pred.data().iter().zip(target.data()).map(|(p, y)| p - y).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
    let grad = Tensor::vector(diff.iter().map(|d| 2.0 * d / b).collect());
    Ok((loss, grad))
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Grads,
    pub v: Grads,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Grads = params
            .iter()
            .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
/// `step` counts from 1.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, cfg: &TrainConfig, step: u64) -> Result<()> {
    if step == 0 {
        return Err(TrainError::Config("Adam step index starts at 1".into()));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (name, p, g) in params.iter_with_grads_mut() {
        let (m, v) = match (state.m.get_mut(name), state.v.get_mut(name)) {
            (Some(m), Some(v)) if m.shape() == p.shape() && v.shape() == p.shape() => (m, v),
            _ => {
                return Err(TrainError::Config(format!(
                    "Adam moments do not match parameter {name}"
                )))
            }
        };
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps_adam);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    /// Mean squared error on standardized targets, one entry per epoch.
    pub train_loss: Vec<f64>,
    /// Track-level validation RMSE in km/h, one entry per epoch.
    pub val_rmse: Vec<f64>,
    /// 1-based epoch with the lowest validation RMSE.
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

/// Indices of the training and validation tracks used by [`train`].
pub fn split_train_val(n: usize, cfg: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok(dataio::split_indices(n, 1.0 - cfg.val_fraction, cfg.seed)?)
}

/// Labeled tracks long enough to produce a window at `seq_len`.
pub fn usable_tracks(tracks: &[Track], seq_len: usize) -> Vec<Track> {
    features::filter_min_length(tracks, seq_len + 1)
        .into_iter()
        .filter(|t| t.speed_kmh.is_some())
        .collect()
}

fn root_mean_square(errors: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for e in errors {
        s += e * e;
        n += 1;
    }
    (s / n as f64).sqrt()
}

/// Track-level RMSE in km/h.
pub fn track_rmse(model: &SpeedModel, tracks: &[Track]) -> Result<f64> {
    let mut errs = Vec::with_capacity(tracks.len());
    for t in tracks {
        let label = t.speed_kmh.expect("usable tracks are labeled");
        errs.push(model.predict_track(t)?.0 - label);
    }
    Ok(root_mean_square(errs.into_iter()))
}

/// Builds a model from `model_cfg` (seeded from `cfg.seed`) and trains it.
pub fn fit(model_cfg: ModelConfig, tracks: &[Track], cfg: &TrainConfig) -> Result<(SpeedModel, History)> {
    cfg.validate()?;
    let model = SpeedModel::build(model_cfg, &mut Rng::with_stream(cfg.seed, 0))?;
    train(model, tracks, cfg)
}

/// Trains `model` on the labeled tracks. A seeded `val_fraction` of them is
/// held out for early stopping; normalization and target statistics come from
/// the remaining training tracks only.
pub fn train(mut model: SpeedModel, tracks: &[Track], cfg: &TrainConfig) -> Result<(SpeedModel, History)> {
    cfg.validate()?;
    let seq_len = model.config().seq_len;
    let usable = usable_tracks(tracks, seq_len);
    if usable.len() < 2 {
        return Err(TrainError::NoLabeledData {
            found: usable.len(),
            min_frames: seq_len + 1,
        });
    }
    let (train_idx, val_idx) = split_train_val(usable.len(), cfg)?;
    let train_tracks: Vec<&Track> = train_idx.iter().map(|&i| &usable[i]).collect();
    let val_tracks: Vec<Track> = val_idx.iter().map(|&i| usable[i].clone()).collect();

    let seqs: Vec<FeatureSequence> = train_tracks
        .iter()
        .map(|t| features::extract_features(t))
        .collect::<std::result::Result<_, _>>()
        .map_err(ModelError::from)?;
    model.norm_stats = features::fit_norm_stats(&seqs).map_err(ModelError::from)?;
    let labels: Vec<f64> = train_tracks.iter().map(|t| t.speed_kmh.unwrap()).collect();
    model.target_stats = TargetStats::fit(&labels);

    let mut windows: Vec<(Tensor, f64)> = Vec::new();
    for (s, &y) in seqs.iter().zip(&labels) {
        let z = model.target_stats.standardize(y);
        let norm = features::normalize(s, &model.norm_stats);
        windows.extend(features::window(&norm, seq_len, cfg.window_stride).into_iter().map(|w| (w.values, z)));
    }
    log::info!(
        "training {} on {} tracks ({} windows), validating on {}",
        model.config().variant,
        train_tracks.len(),
        windows.len(),
        val_tracks.len()
    );

    let mut order_rng = Rng::with_stream(cfg.seed, 1);
    let mut dropout_rng = Rng::with_stream(cfg.seed, 2);
    let mut adam = AdamState::new(model.params());
    let mut step = 0u64;
    let mut history = History {
        best_val_rmse: f64::INFINITY,
        ..History::default()
    };
    let mut best_params: Option<ParamSet> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| &windows[i].0).collect();
            let batch = stack_windows(&xs)?;
            let target = Tensor::vector(chunk.iter().map(|&i| windows[i].1).collect());
            let (_, cache) = model.forward(&batch, true, Some(&mut dropout_rng))?;
            let z = Tensor::vector(cache.standardized().to_vec());
            let (loss, grad) = mse_loss(&z, &target)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b });
            }
            loss_sum += loss * chunk.len() as f64;
            let grads = model.backward_standardized(&cache, &grad)?;
            let params = model.params_mut();
            params.zero_grads();
            params.accumulate(&grads).map_err(ModelError::from)?;
            let norm = params.grad_norm();
            if !norm.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b });
            }
            if norm > cfg.grad_clip {
                params.scale_grads(cfg.grad_clip / norm);
            }
            step += 1;
            adam_step(params, &mut adam, cfg, step)?;
        }
        let train_loss = loss_sum / windows.len() as f64;
        let val = track_rmse(&model, &val_tracks)?;
        history.train_loss.push(train_loss);
        history.val_rmse.push(val);
        log::info!("epoch {epoch:>3}  train mse {train_loss:.5}  val rmse {val:.3} km/h");

        if val < history.best_val_rmse {
            history.best_val_rmse = val;
            history.best_epoch = epoch;
            since_best = 0;
            if cfg.restore_best {
                best_params = Some(model.params().clone());
            }
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                log::info!("early stop after epoch {epoch}; best epoch {}", history.best_epoch);
                break;
            }
        }
    }
    if let Some(best) = best_params {
        *model.params_mut() = best;
    }
    model.params_mut().zero_grads();
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk form of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub norm_stats: NormStats,
    pub target_stats: TargetStats,
    pub params: BTreeMap<String, StoredTensor>,
    pub epoch: usize,
    pub best_val_rmse: Option<f64>,
}

impl Checkpoint {
    pub fn new(model: &SpeedModel, train_config: Option<&TrainConfig>, history: Option<&History>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model_config: model.config().clone(),
            train_config: train_config.cloned(),
            norm_stats: model.norm_stats.clone(),
            target_stats: model.target_stats,
            params: model
                .params()
                .iter()
                .map(|(k, t)| {
                    (
                        k.to_string(),
                        StoredTensor {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
            epoch: history.map_or(0, |h| h.train_loss.len()),
            best_val_rmse: history.map(|h| h.best_val_rmse).filter(|v| v.is_finite()),
        }
    }

    pub fn model(&self) -> std::result::Result<SpeedModel, ModelError> {
        let mut params = ParamSet::new();
        for (name, st) in &self.params {
            let t = Tensor::new(st.shape.clone(), st.data.clone()).map_err(|e| ModelError::Param {
                name: name.clone(),
                reason: e.to_string(),
            })?;
            params.insert(name.clone(), t);
        }
        SpeedModel::from_parts(self.model_config.clone(), params, self.norm_stats.clone(), self.target_stats)
    }

    /// Writes the checkpoint through a temporary sibling file so a crash never
    /// leaves a partial file at `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec(self).map_err(|e| TrainError::Corrupt {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        write_atomic(path, &json).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let shown = || path.display().to_string();
        let bytes = fs::read(path).map_err(|source| TrainError::Io { path: shown(), source })?;
        let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| TrainError::Corrupt {
            path: shown(),
            reason: e.to_string(),
        })?;
        let found = value.get("version").and_then(serde_json::Value::as_u64).ok_or_else(|| TrainError::Corrupt {
            path: shown(),
            reason: "missing integer \"version\" field".into(),
        })?;
        if found != CHECKPOINT_VERSION as u64 {
            return Err(TrainError::Version {
                path: shown(),
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        // Parse from the bytes again: going through `Value` would cost float exactness.
        serde_json::from_slice(&bytes).map_err(|e| TrainError::Corrupt {
            path: shown(),
            reason: e.to_string(),
        })
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp: PathBuf = path.to_path_buf();
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn save_checkpoint(model: &SpeedModel, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(model, None, None).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SpeedModel> {
    let path = path.as_ref();
    Checkpoint::load(path)?.model().map_err(|e| TrainError::Corrupt {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}
