use trackspeed::dataio::DataError;
use trackspeed::metrics::MetricsError;
use trackspeed::models::ModelError;
use trackspeed::synth::SynthError;
use trackspeed::train::TrainError;

/// An error message paired with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERIC: u8 = 4;

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: Self::CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: Self::DATA,
            message: message.into(),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::BadFraction(_) => Failure::config(e.to_string()),
            _ => Failure::data(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Failure::config(e.to_string()),
            _ => Failure::data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::config(e.to_string()),
            TrainError::NonFinite { .. } => Failure {
                code: Failure::NUMERIC,
                message: e.to_string(),
            },
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            _ => Failure::data(e.to_string()),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) => Failure::config(e.to_string()),
            _ => Failure::data(e.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(m) => m.into(),
            _ => Failure::data(e.to_string()),
        }
    }
}
