//! Track datasets: one JSON record per line,
//! `{"track_id": str, "fps": num, "speed_kmh": num?, "frames": [[idx, [x1, y1, x2, y2]], ...]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("track {track_id:?}: invalid {field}: {reason}")]
    Invalid {
        track_id: String,
        field: &'static str,
        reason: String,
    },
    #[error("need at least 2 tracks to split, got {0}")]
    TooFewTracks(usize),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
}

/// Axis-aligned image box in pixels, origin top-left. Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn validate(&self) -> Result<(), String> {
        let c: [f64; 4] = (*self).into();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(format!("non-finite coordinate in {c:?}"));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(format!("box {c:?} needs x2 > x1 and y2 > y1"));
        }
        Ok(())
    }
}

/// One annotated frame, serialized as `[frame_idx, [x1, y1, x2, y2]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(i64, BoundingBox)", into = "(i64, BoundingBox)")]
pub struct Frame {
    pub idx: i64,
    pub bbox: BoundingBox,
}

impl From<(i64, BoundingBox)> for Frame {
    fn from((idx, bbox): (i64, BoundingBox)) -> Self {
        Self { idx, bbox }
    }
}

impl From<Frame> for (i64, BoundingBox) {
    fn from(f: Frame) -> Self {
        (f.idx, f.bbox)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: String,
    pub fps: f64,
    /// Ground-truth constant speed; absent for inference-only tracks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_kmh: Option<f64>,
    pub frames: Vec<Frame>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |field, reason: String| DataError::Invalid {
            track_id: self.track_id.clone(),
            field,
            reason,
        };
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(invalid("fps", format!("{} is not a positive finite rate", self.fps)));
        }
        if let Some(s) = self.speed_kmh {
            if !(s.is_finite() && s >= 0.0) {
                return Err(invalid("speed_kmh", format!("{s} is not a non-negative finite speed")));
            }
        }
        if self.frames.is_empty() {
            return Err(invalid("frames", "no frames".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            f.bbox
                .validate()
                .map_err(|r| invalid("frames", format!("frame {}: {r}", f.idx)))?;
            if i > 0 && f.idx <= self.frames[i - 1].idx {
                return Err(invalid(
                    "frames",
                    format!("frame index {} does not increase after {}", f.idx, self.frames[i - 1].idx),
                ));
            }
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses and validates tracks from a reader; blank lines are skipped.
pub fn read_tracks<R: BufRead>(reader: R) -> Result<Vec<Track>, DataError> {
    let mut tracks = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let track: Track = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        track.validate()?;
        tracks.push(track);
    }
    Ok(tracks)
}

pub fn load_tracks(path: impl AsRef<Path>) -> Result<Vec<Track>, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    read_tracks(BufReader::new(file))
}

pub fn write_tracks<W: Write>(tracks: &[Track], mut w: W) -> std::io::Result<()> {
    for t in tracks {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_tracks(tracks: &[Track], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    write_tracks(tracks, BufWriter::new(file)).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Track>,
    pub test: Vec<Track>,
    pub seed: u64,
    pub train_fraction: f64,
}

/// Index partition behind [`split_dataset`]: `(train, test)` indices, each in
/// ascending order. `|train| = round(fraction·n)` clamped to `[1, n-1]`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadFraction(train_fraction));
    }
    if n < 2 {
        return Err(DataError::TooFewTracks(n));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Seeded random partition into train and test sets; input order is kept
/// within each side.
pub fn split_dataset(tracks: &[Track], train_fraction: f64, seed: u64) -> Result<DatasetSplit, DataError> {
    let (train, test) = split_indices(tracks.len(), train_fraction, seed)?;
    Ok(DatasetSplit {
        train: train.iter().map(|&i| tracks[i].clone()).collect(),
        test: test.iter().map(|&i| tracks[i].clone()).collect(),
        seed,
        train_fraction,
    })
}
