//! Per-prediction accuracy, RMSE, track-level evaluation and CSV reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Track;
use crate::models::{ModelError, SpeedModel};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("accuracy is undefined for an actual speed of zero")]
    ZeroActual,
    #[error("RMSE needs at least one pair")]
    Empty,
    #[error("unlabeled tracks cannot be evaluated: {0:?}")]
    Unlabeled(Vec<String>),
    #[error("tracks too short for the model (need {needed} frames): {offenders:?}")]
    TooShort { needed: usize, offenders: Vec<String> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("report needs at least one model")]
    EmptyReport,
    #[error("report I/O on {path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// `(1 − |predicted − actual| / |actual|) × 100`. Not clamped, so gross
/// errors give negative values.
pub fn accuracy_pct(predicted: f64, actual: f64) -> Result<f64> {
    if actual == 0.0 {
        return Err(MetricsError::ZeroActual);
    }
    // Same value as the textbook form, but exact whenever the inputs are round numbers.
    Ok(100.0 * (actual.abs() - (predicted - actual).abs()) / actual.abs())
}

/// `sqrt(mean((predicted − actual)²))` over `(predicted, actual)` pairs.
pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let s: f64 = pairs.iter().map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((s / pairs.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub track_id: String,
    pub actual_kmh: f64,
    pub predicted_kmh: f64,
    pub accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_sample: Vec<SampleRow>,
    pub mean_accuracy_pct: f64,
    pub rmse_kmh: f64,
    pub n: usize,
}

impl Metrics {
    /// Builds rows from `(id, predicted, actual)` and reduces them.
    pub fn from_predictions(preds: impl IntoIterator<Item = (String, f64, f64)>) -> Result<Self> {
        let per_sample = preds
            .into_iter()
            .map(|(track_id, predicted_kmh, actual_kmh)| {
                Ok(SampleRow {
                    accuracy_pct: accuracy_pct(predicted_kmh, actual_kmh)?,
                    track_id,
                    actual_kmh,
                    predicted_kmh,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(per_sample)
    }

    /// Reduces existing rows: unweighted mean accuracy and RMSE.
    pub fn from_rows(per_sample: Vec<SampleRow>) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = per_sample.iter().map(|r| (r.predicted_kmh, r.actual_kmh)).collect();
        let rmse_kmh = rmse(&pairs)?;
        let n = per_sample.len();
        let mean_accuracy_pct = per_sample.iter().map(|r| r.accuracy_pct).sum::<f64>() / n as f64;
        Ok(Self {
            per_sample,
            mean_accuracy_pct,
            rmse_kmh,
            n,
        })
    }
}

/// Anything that maps a track to one speed estimate.
pub trait SpeedPredictor {
    /// Shortest track the predictor accepts.
    fn min_frames(&self) -> usize;
    /// Track-level speed in km/h.
    fn predict_speed(&self, track: &Track) -> std::result::Result<f64, ModelError>;
}

impl SpeedPredictor for SpeedModel {
    fn min_frames(&self) -> usize {
        self.config().seq_len + 1
    }

    fn predict_speed(&self, track: &Track) -> std::result::Result<f64, ModelError> {
        Ok(self.predict_track(track)?.0)
    }
}

/// Fixed per-track answers, e.g. from an external estimator. Unknown ids
/// fall back to the track's own label, which makes an empty table a perfect
/// predictor.
#[derive(Debug, Clone, Default)]
pub struct OraclePredictor {
    pub answers: BTreeMap<String, f64>,
}

impl SpeedPredictor for OraclePredictor {
    fn min_frames(&self) -> usize {
        1
    }

    fn predict_speed(&self, track: &Track) -> std::result::Result<f64, ModelError> {
        Ok(self
            .answers
            .get(&track.track_id)
            .copied()
            .or(track.speed_kmh)
            .unwrap_or(f64::NAN))
    }
}

fn check_tracks(tracks: &[Track], min_frames: usize) -> Result<()> {
    let unlabeled: Vec<String> = tracks
        .iter()
        .filter(|t| t.speed_kmh.is_none())
        .map(|t| t.track_id.clone())
        .collect();
    if !unlabeled.is_empty() {
        return Err(MetricsError::Unlabeled(unlabeled));
    }
    let offenders: Vec<String> = tracks
        .iter()
        .filter(|t| t.frames.len() < min_frames)
        .map(|t| t.track_id.clone())
        .collect();
    if !offenders.is_empty() {
        return Err(MetricsError::TooShort {
            needed: min_frames,
            offenders,
        });
    }
    Ok(())
}

/// One row per track; accuracy averaged over tracks and RMSE over track-level pairs.
pub fn evaluate<P: SpeedPredictor + ?Sized>(predictor: &P, tracks: &[Track]) -> Result<Metrics> {
    check_tracks(tracks, predictor.min_frames())?;
    let mut rows = Vec::with_capacity(tracks.len());
    for t in tracks {
        rows.push((t.track_id.clone(), predictor.predict_speed(t)?, t.speed_kmh.unwrap()));
    }
    Metrics::from_predictions(rows)
}

/// Diagnostic variant with one row per window, ids suffixed `#k`.
pub fn evaluate_windows(model: &SpeedModel, tracks: &[Track]) -> Result<Metrics> {
    check_tracks(tracks, model.min_frames())?;
    let mut rows = Vec::new();
    for t in tracks {
        let actual = t.speed_kmh.unwrap();
        let (_, per_window) = model.predict_track(t)?;
        rows.extend(
            per_window
                .into_iter()
                .enumerate()
                .map(|(k, p)| (format!("{}#{k}", t.track_id), p, actual)),
        );
    }
    Metrics::from_predictions(rows)
}

pub const SUMMARY_FILE: &str = "summary.csv";

pub fn scatter_file_name(model: &str) -> String {
    let safe: String = model
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("scatter_{safe}.csv")
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> std::result::Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// Writes `summary.csv` (one row per model) and a `scatter_<model>.csv` of
/// actual vs predicted speeds per model into `dir`. Floats use 4 decimals.
pub fn emit_report(metrics_by_model: &BTreeMap<String, Metrics>, dataset: &str, dir: impl AsRef<Path>) -> Result<()> {
    if metrics_by_model.is_empty() {
        return Err(MetricsError::EmptyReport);
    }
    let dir = dir.as_ref();
    let io = |path: &Path, e: &dyn std::fmt::Display| MetricsError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
    let write = |name: &str, bytes: std::result::Result<Vec<u8>, csv::Error>| {
        let path = dir.join(name);
        let bytes = bytes.map_err(|e| io(&path, &e))?;
        crate::train::write_atomic(&path, &bytes).map_err(|e| io(&path, &e))
    };
    write(
        SUMMARY_FILE,
        csv_bytes(
            &["model", "dataset", "mean_accuracy_pct", "rmse_kmh", "n"],
            metrics_by_model.iter().map(|(model, m)| {
                vec![
                    model.clone(),
                    dataset.to_string(),
                    f4(m.mean_accuracy_pct),
                    f4(m.rmse_kmh),
                    m.n.to_string(),
                ]
            }),
        ),
    )?;
    for (model, m) in metrics_by_model {
        write(
            &scatter_file_name(model),
            csv_bytes(
                &["track_id", "actual_kmh", "predicted_kmh"],
                m.per_sample
                    .iter()
                    .map(|r| vec![r.track_id.clone(), f4(r.actual_kmh), f4(r.predicted_kmh)]),
            ),
        )?;
    }
    Ok(())
}

/// Fixed-width text table with one line per model.
pub fn format_table(metrics_by_model: &BTreeMap<String, Metrics>, dataset: &str) -> String {
    let mut out = format!(
        "{:<14} {:<16} {:>13} {:>12} {:>6}\n",
        "model", "dataset", "accuracy (%)", "RMSE (km/h)", "n"
    );
    for (model, m) in metrics_by_model {
        out.push_str(&format!(
            "{:<14} {:<16} {:>13.2} {:>12.3} {:>6}\n",
            model, dataset, m.mean_accuracy_pct, m.rmse_kmh, m.n
        ));
    }
    out
}
