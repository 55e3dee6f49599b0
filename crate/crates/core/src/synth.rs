//! Pinhole-camera trajectory generator with exactly known speeds.
//!
//! World axes follow the camera: X right, Y down, Z forward, with the road
//! plane at `Y = camera_height_m`. A point projects to
//! `u = f·X/Z + cx`, `v = f·Y/Z + cy`.
//!
//! Two scenarios exist. In *lateral* the vehicle's side face (length × height)
//! slides across the image at a fixed depth, so the per-frame horizontal shift
//! is exactly `f·v/(fps·Z)`. In *approach* a full 3D box drives towards the
//! camera along a lane offset to the side, which exercises scale change.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{BoundingBox, Frame, Track};
use crate::rng::Rng;

/// Minimum extent given to a degenerate projected box.
pub const MIN_BOX_PX: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("point with depth {z} m is not in front of the camera")]
    BehindCamera { z: f64 },
    #[error("vehicle leaves the camera frustum at frame {frame}: {reason}")]
    LeavesFrustum { frame: usize, reason: String },
    #[error("infeasible geometry: {0}")]
    Infeasible(String),
    #[error("track {0:?} needs at least 2 frames for speed recovery")]
    TooShort(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_w: u32,
    pub image_h: u32,
    pub fps: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            focal_px: 1000.0,
            cx: 960.0,
            cy: 540.0,
            image_w: 1920,
            image_h: 1080,
            fps: 30.0,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px.is_finite() && self.focal_px > 0.0) {
            return Err(SynthError::Config(format!("focal_px {} must be positive", self.focal_px)));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(SynthError::Config(format!("fps {} must be positive", self.fps)));
        }
        let inside = (0.0..=self.image_w as f64).contains(&self.cx) && (0.0..=self.image_h as f64).contains(&self.cy);
        if !inside {
            return Err(SynthError::Config(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.image_w, self.image_h
            )));
        }
        Ok(())
    }

    pub fn project(&self, p: [f64; 3]) -> Result<(f64, f64)> {
        let [x, y, z] = p;
        if !(z > 0.0) {
            return Err(SynthError::BehindCamera { z });
        }
        Ok((self.focal_px * x / z + self.cx, self.focal_px * y / z + self.cy))
    }
}

/// Axis-aligned box in camera coordinates (meters). A zero extent along an
/// axis is allowed and describes a flat face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl WorldBox {
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            for (axis, v) in c.iter_mut().enumerate() {
                *v = if i >> axis & 1 == 0 { self.min[axis] } else { self.max[axis] };
            }
        }
        out
    }
}

fn widen(lo: &mut f64, hi: &mut f64) {
    if *hi - *lo < MIN_BOX_PX {
        let mid = (*lo + *hi) / 2.0;
        *lo = mid - MIN_BOX_PX / 2.0;
        *hi = mid + MIN_BOX_PX / 2.0;
    }
}

fn widened(mut b: BoundingBox) -> BoundingBox {
    widen(&mut b.x1, &mut b.x2);
    widen(&mut b.y1, &mut b.y2);
    b
}

/// Image bounding box of the projected corners.
pub fn project_box(world: &WorldBox, cam: &CameraConfig) -> Result<BoundingBox> {
    let mut b = BoundingBox {
        x1: f64::INFINITY,
        y1: f64::INFINITY,
        x2: f64::NEG_INFINITY,
        y2: f64::NEG_INFINITY,
    };
    for c in world.corners() {
        let (u, v) = cam.project(c)?;
        b.x1 = b.x1.min(u);
        b.x2 = b.x2.max(u);
        b.y1 = b.y1.min(v);
        b.y2 = b.y2.max(v);
    }
    Ok(widened(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Lateral,
    Approach,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleDims {
    pub width_m: f64,
    pub height_m: f64,
    pub length_m: f64,
}

impl Default for VehicleDims {
    fn default() -> Self {
        Self {
            width_m: 1.8,
            height_m: 1.5,
            length_m: 4.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Lateral: distance from camera to the vehicle's side face.
    pub depth_m: f64,
    /// Approach: depth of the vehicle's front face at frame 0.
    pub z0_m: f64,
    pub vehicle: VehicleDims,
    pub speed_kmh: f64,
    pub n_frames: usize,
    pub noise_px_std: f64,
    pub seed: u64,
    pub camera_height_m: f64,
    /// Approach: lateral offset of the lane center from the optical axis.
    pub lane_offset_m: f64,
    /// Lateral: vehicle center X at frame 0; `None` centers the trajectory on the optical axis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0_m: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Lateral,
            depth_m: 30.0,
            z0_m: 40.0,
            vehicle: VehicleDims::default(),
            speed_kmh: 60.0,
            n_frames: 32,
            noise_px_std: 0.5,
            seed: 0,
            camera_height_m: 4.0,
            lane_offset_m: 3.5,
            x0_m: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth_m", self.depth_m),
            ("z0_m", self.z0_m),
            ("vehicle.width_m", self.vehicle.width_m),
            ("vehicle.height_m", self.vehicle.height_m),
            ("vehicle.length_m", self.vehicle.length_m),
        ];
        if let Some((n, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(SynthError::Config(format!("{n} = {v} must be positive")));
        }
        if !(self.speed_kmh.is_finite() && self.speed_kmh >= 0.0) {
            return Err(SynthError::Config(format!("speed_kmh {} must be non-negative", self.speed_kmh)));
        }
        if !(self.noise_px_std.is_finite() && self.noise_px_std >= 0.0) {
            return Err(SynthError::Config(format!("noise_px_std {} must be non-negative", self.noise_px_std)));
        }
        if self.n_frames < 2 {
            return Err(SynthError::Config(format!("n_frames {} must be at least 2", self.n_frames)));
        }
        Ok(())
    }

    fn speed_ms(&self) -> f64 {
        self.speed_kmh / 3.6
    }

    /// Lateral start that keeps the side face centered over the whole track.
    fn centered_x0(&self, fps: f64) -> f64 {
        -self.speed_ms() * (self.n_frames - 1) as f64 / fps / 2.0
    }

    /// Vehicle box at frame `t`.
    pub fn world_box(&self, t: usize, fps: f64) -> WorldBox {
        let travel = self.speed_ms() * t as f64 / fps;
        let VehicleDims {
            width_m: w,
            height_m: h,
            length_m: l,
        } = self.vehicle;
        let ground = self.camera_height_m;
        match self.kind {
            ScenarioKind::Lateral => {
                let xc = self.x0_m.unwrap_or_else(|| self.centered_x0(fps)) + travel;
                WorldBox {
                    min: [xc - l / 2.0, ground - h, self.depth_m],
                    max: [xc + l / 2.0, ground, self.depth_m],
                }
            }
            ScenarioKind::Approach => {
                let z = self.z0_m - travel;
                WorldBox {
                    min: [self.lane_offset_m - w / 2.0, ground - h, z],
                    max: [self.lane_offset_m + w / 2.0, ground, z + l],
                }
            }
        }
    }
}

fn frame_check(b: &BoundingBox, cam: &CameraConfig) -> std::result::Result<(), String> {
    let (w, h) = (cam.image_w as f64, cam.image_h as f64);
    if b.x2 < 0.0 || b.x1 > w || b.y2 < 0.0 || b.y1 > h {
        return Err(format!(
            "box [{:.2}, {:.2}, {:.2}, {:.2}] lies outside the {}x{} image",
            b.x1, b.y1, b.x2, b.y2, cam.image_w, cam.image_h
        ));
    }
    Ok(())
}

/// Noiseless projected boxes for every frame.
pub fn clean_boxes(scn: &ScenarioConfig, cam: &CameraConfig) -> Result<Vec<BoundingBox>> {
    scn.validate()?;
    cam.validate()?;
    (0..scn.n_frames)
        .map(|t| {
            let b = project_box(&scn.world_box(t, cam.fps), cam).map_err(|e| SynthError::LeavesFrustum {
                frame: t,
                reason: e.to_string(),
            })?;
            frame_check(&b, cam).map_err(|reason| SynthError::LeavesFrustum { frame: t, reason })?;
            Ok(b)
        })
        .collect()
}

/// One labeled track. Noise is drawn independently per corner from a
/// generator seeded with `scn.seed`.
pub fn generate_track(scn: &ScenarioConfig, cam: &CameraConfig) -> Result<Track> {
    let boxes = clean_boxes(scn, cam)?;
    let mut rng = Rng::new(scn.seed);
    let frames = boxes
        .into_iter()
        .enumerate()
        .map(|(t, mut b)| {
            if scn.noise_px_std > 0.0 {
                for c in [&mut b.x1, &mut b.y1, &mut b.x2, &mut b.y2] {
                    *c += scn.noise_px_std * rng.normal();
                }
                // Jitter can swap corners of a tiny box.
                if b.x2 < b.x1 {
                    std::mem::swap(&mut b.x1, &mut b.x2);
                }
                if b.y2 < b.y1 {
                    std::mem::swap(&mut b.y1, &mut b.y2);
                }
                b = widened(b);
            }
            Frame { idx: t as i64, bbox: b }
        })
        .collect();
    let kind = match scn.kind {
        ScenarioKind::Lateral => "lateral",
        ScenarioKind::Approach => "approach",
    };
    Ok(Track {
        track_id: format!("{kind}-{}", scn.seed),
        fps: cam.fps,
        speed_kmh: Some(scn.speed_kmh),
        frames,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_tracks: usize,
    pub speed_min_kmh: f64,
    pub speed_max_kmh: f64,
    /// Probability that a track is lateral; the rest are approach tracks.
    pub lateral_fraction: f64,
    pub seed: u64,
    pub camera: CameraConfig,
    /// Geometry, frame count and noise shared by every track. Its kind,
    /// speed, seed and start position are drawn per track.
    pub scenario: ScenarioConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_tracks: 400,
            speed_min_kmh: 30.0,
            speed_max_kmh: 105.0,
            lateral_fraction: 0.5,
            seed: 42,
            camera: CameraConfig::default(),
            scenario: ScenarioConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tracks == 0 {
            return Err(SynthError::Config("n_tracks must be at least 1".into()));
        }
        if !(self.speed_min_kmh.is_finite() && self.speed_min_kmh >= 0.0 && self.speed_min_kmh < self.speed_max_kmh) {
            return Err(SynthError::Config(format!(
                "speed range [{}, {}] needs 0 <= lo < hi",
                self.speed_min_kmh, self.speed_max_kmh
            )));
        }
        if !self.speed_max_kmh.is_finite() {
            return Err(SynthError::Config("speed_max_kmh must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.lateral_fraction) {
            return Err(SynthError::Config(format!(
                "lateral_fraction {} outside [0, 1]",
                self.lateral_fraction
            )));
        }
        self.camera.validate()?;
        self.scenario.validate()
    }
}

/// Range of lateral start positions keeping the whole face inside the image
/// for every frame at the given speed.
fn lateral_x0_range(scn: &ScenarioConfig, cam: &CameraConfig) -> Option<(f64, f64)> {
    let z = scn.depth_m;
    let half = scn.vehicle.length_m / 2.0;
    let travel = scn.speed_ms() * (scn.n_frames - 1) as f64 / cam.fps;
    // u(X) = f·X/z + cx must stay within [0, W] for X ± half.
    let x_lo = (0.0 - cam.cx) * z / cam.focal_px + half;
    let x_hi = (cam.image_w as f64 - cam.cx) * z / cam.focal_px - half - travel;
    (x_lo <= x_hi).then_some((x_lo, x_hi))
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Track>> {
    cfg.validate()?;
    let cam = &cfg.camera;
    // The fastest vehicle must fit in both scenario kinds that can occur.
    let fastest = ScenarioConfig {
        speed_kmh: cfg.speed_max_kmh,
        noise_px_std: 0.0,
        ..cfg.scenario.clone()
    };
    if cfg.lateral_fraction > 0.0 && lateral_x0_range(&fastest, cam).is_none() {
        return Err(SynthError::Infeasible(format!(
            "a lateral vehicle at {} km/h crosses the whole image in fewer than {} frames",
            cfg.speed_max_kmh, cfg.scenario.n_frames
        )));
    }
    if cfg.lateral_fraction < 1.0 {
        let probe = ScenarioConfig {
            kind: ScenarioKind::Approach,
            ..fastest
        };
        clean_boxes(&probe, cam).map_err(|e| SynthError::Infeasible(format!("approach at max speed: {e}")))?;
    }

    (0..cfg.n_tracks)
        .map(|i| {
            let mut rng = Rng::with_stream(cfg.seed, i as u64);
            let lateral = rng.next_f64() < cfg.lateral_fraction;
            let speed = rng.uniform(cfg.speed_min_kmh, cfg.speed_max_kmh);
            let mut scn = ScenarioConfig {
                kind: if lateral { ScenarioKind::Lateral } else { ScenarioKind::Approach },
                speed_kmh: speed,
                seed: rng.next_u64(),
                ..cfg.scenario.clone()
            };
            if lateral && scn.x0_m.is_none() {
                let (lo, hi) = lateral_x0_range(&scn, cam).expect("checked at max speed");
                scn.x0_m = Some(rng.uniform(lo, hi));
            }
            let mut track = generate_track(&scn, cam)?;
            track.track_id = format!("syn-{:04}-{i:04}", cfg.seed);
            Ok(track)
        })
        .collect()
}

/// Speed of a lateral track recovered from the least-squares slope of the
/// box-center column against time: `v = slope·Z/f`.
pub fn oracle_speed_lateral(track: &Track, cam: &CameraConfig, depth_m: f64) -> Result<f64> {
    if track.frames.len() < 2 {
        return Err(SynthError::TooShort(track.track_id.clone()));
    }
    let n = track.frames.len() as f64;
    let ts: Vec<f64> = track.frames.iter().map(|f| f.idx as f64 / track.fps).collect();
    // Offsets from the first column keep a stationary track exactly at zero.
    let u0 = track.frames[0].bbox.center().0;
    let us: Vec<f64> = track.frames.iter().map(|f| f.bbox.center().0 - u0).collect();
    let t_mean = ts.iter().sum::<f64>() / n;
    let u_mean = us.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, u) in ts.iter().zip(&us) {
        sxy += (t - t_mean) * (u - u_mean);
        sxx += (t - t_mean) * (t - t_mean);
    }
    let slope = sxy / sxx;
    Ok(slope * depth_m / cam.focal_px * 3.6)
}
