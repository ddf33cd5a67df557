use std::fmt;

/// Command failure, by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or config (exit 1).
    Usage(String),
    /// Missing, unreadable or inconsistent data (exit 2).
    Data(String),
    /// Broken internal invariant (exit 3).
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<star_core::pipeline::ManifestError> for CliError {
    fn from(e: star_core::pipeline::ManifestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<star_core::pipeline::ClipFileError> for CliError {
    fn from(e: star_core::pipeline::ClipFileError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<star_core::pipeline::PipelineError> for CliError {
    fn from(e: star_core::pipeline::PipelineError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<star_core::net::CheckpointError> for CliError {
    fn from(e: star_core::net::CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<star_core::net::NetError> for CliError {
    fn from(e: star_core::net::NetError) -> Self {
        match e {
            star_core::net::NetError::InvalidConfig { .. } => CliError::Usage(e.to_string()),
            star_core::net::NetError::InputShape(_) | star_core::net::NetError::WindowLength { .. } => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<star_core::train::TrainError> for CliError {
    fn from(e: star_core::train::TrainError) -> Self {
        use star_core::train::TrainError as E;
        match e {
            E::Config(_) => CliError::Usage(e.to_string()),
            E::EmptyDataset | E::Label { .. } | E::Shape(_) | E::Pipeline(_) => CliError::Data(e.to_string()),
            E::Net(n) => n.into(),
            E::Tensor(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<star_core::eval::EvalError> for CliError {
    fn from(e: star_core::eval::EvalError) -> Self {
        use star_core::eval::EvalError as E;
        match e {
            E::Empty | E::Label { .. } => CliError::Data(e.to_string()),
            E::Invalid(_) => CliError::Usage(e.to_string()),
            E::Net(n) => n.into(),
        }
    }
}

impl From<star_core::synth::SynthError> for CliError {
    fn from(e: star_core::synth::SynthError) -> Self {
        CliError::Usage(e.to_string())
    }
}
