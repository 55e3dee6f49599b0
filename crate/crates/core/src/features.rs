//! Frame-delta features, normalization and fixed-length windows.
//!
//! Each consecutive frame pair yields eight values: the four corner deltas
//! `dx1, dy1, dx2, dy2`, the center displacement `dcx, dcy` and the size change
//! `dw, dh`, all in pixels per frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Track;
use crate::tensor::Tensor;

pub const N_FEATURES: usize = 8;

/// Lower bound applied to every fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("track {track_id:?} has {frames} frame(s); need at least {needed}")]
    TooShort {
        track_id: String,
        frames: usize,
        needed: usize,
    },
    #[error("track {track_id:?}: frame gap {from} -> {to} is not 1")]
    FrameGap { track_id: String, from: i64, to: i64 },
    #[error("cannot fit normalization statistics on zero rows")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `[T, 8]`
    pub values: Tensor,
    pub track_id: String,
    pub label_kmh: Option<f64>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

impl NormStats {
    /// Statistics that leave data unchanged.
    pub fn identity() -> Self {
        Self {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
        }
    }
}

pub fn feature_row(prev: &crate::dataio::BoundingBox, next: &crate::dataio::BoundingBox) -> [f64; N_FEATURES] {
    let dx1 = next.x1 - prev.x1;
    let dy1 = next.y1 - prev.y1;
    let dx2 = next.x2 - prev.x2;
    let dy2 = next.y2 - prev.y2;
    [
        dx1,
        dy1,
        dx2,
        dy2,
        (dx1 + dx2) / 2.0,
        (dy1 + dy2) / 2.0,
        dx2 - dx1,
        dy2 - dy1,
    ]
}

/// `T = frames − 1` rows; row `t` describes the step from frame `t` to `t+1`.
pub fn extract_features(track: &Track) -> Result<FeatureSequence, FeatureError> {
    if track.frames.len() < 2 {
        return Err(FeatureError::TooShort {
            track_id: track.track_id.clone(),
            frames: track.frames.len(),
            needed: 2,
        });
    }
    let mut data = Vec::with_capacity((track.frames.len() - 1) * N_FEATURES);
    for pair in track.frames.windows(2) {
        if pair[1].idx - pair[0].idx != 1 {
            return Err(FeatureError::FrameGap {
                track_id: track.track_id.clone(),
                from: pair[0].idx,
                to: pair[1].idx,
            });
        }
        data.extend_from_slice(&feature_row(&pair[0].bbox, &pair[1].bbox));
    }
    let t = track.frames.len() - 1;
    Ok(FeatureSequence {
        values: Tensor::new(vec![t, N_FEATURES], data).expect("rows are 8 wide"),
        track_id: track.track_id.clone(),
        label_kmh: track.speed_kmh,
    })
}

pub fn filter_min_length(tracks: &[Track], min_frames: usize) -> Vec<Track> {
    tracks.iter().filter(|t| t.frames.len() >= min_frames).cloned().collect()
}

/// Per-feature mean and population standard deviation over every row of every
/// sequence, with the deviation floored at [`STD_FLOOR`].
pub fn fit_norm_stats(sequences: &[FeatureSequence]) -> Result<NormStats, FeatureError> {
    let rows: usize = sequences.iter().map(|s| s.values.rows()).sum();
    if rows == 0 {
        return Err(FeatureError::Empty);
    }
    let n = rows as f64;
    let mut mean = [0.0; N_FEATURES];
    for s in sequences {
        for r in 0..s.values.rows() {
            for (m, v) in mean.iter_mut().zip(s.values.row(r)) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; N_FEATURES];
    for s in sequences {
        for r in 0..s.values.rows() {
            for ((acc, v), m) in var.iter_mut().zip(s.values.row(r)).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
    }
    let std = var.map(|v| (v / n).sqrt().max(STD_FLOOR));
    Ok(NormStats { mean, std })
}

pub fn normalize(seq: &FeatureSequence, stats: &NormStats) -> FeatureSequence {
    let mut out = seq.clone();
    for r in 0..out.values.rows() {
        for (j, v) in out.values.row_mut(r).iter_mut().enumerate() {
            *v = (*v - stats.mean[j]) / stats.std[j];
        }
    }
    out
}

/// Inverse of [`normalize`].
pub fn denormalize(seq: &FeatureSequence, stats: &NormStats) -> FeatureSequence {
    let mut out = seq.clone();
    for r in 0..out.values.rows() {
        for (j, v) in out.values.row_mut(r).iter_mut().enumerate() {
            *v = *v * stats.std[j] + stats.mean[j];
        }
    }
    out
}

/// Every contiguous `seq_len`-row window starting at a multiple of `stride`.
pub fn window(seq: &FeatureSequence, seq_len: usize, stride: usize) -> Vec<FeatureSequence> {
    assert!(seq_len >= 1 && stride >= 1, "seq_len and stride must be positive");
    let t = seq.values.rows();
    if t < seq_len {
        return Vec::new();
    }
    (0..=t - seq_len)
        .step_by(stride)
        .map(|start| FeatureSequence {
            values: Tensor::new(
                vec![seq_len, N_FEATURES],
                seq.values.data()[start * N_FEATURES..(start + seq_len) * N_FEATURES].to_vec(),
            )
            .expect("window slice"),
            track_id: seq.track_id.clone(),
            label_kmh: seq.label_kmh,
        })
        .collect()
}
