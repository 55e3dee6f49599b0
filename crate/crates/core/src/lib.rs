//! Vehicle speed estimation from per-frame bounding-box trajectories.
//!
//! The pipeline runs tracks → frame-delta features → a recurrent
//! (RNN/LSTM/GRU + temporal attention) or transformer-encoder regressor →
//! accuracy/RMSE metrics. A pinhole-camera generator supplies synthetic
//! tracks with exactly known speeds.

pub mod dataio;
pub mod features;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use rng::Rng;
pub use tensor::Tensor;
