//! Molecule Attention Transformer: molecule parsing, featurization, a small
//! autodiff engine, the model itself, training and attention analysis.

pub mod chem;
pub mod tensor;
pub mod featurize;
pub mod toy;
pub mod model;
pub mod train;
pub mod analyze;

/// Coarse failure category; the command-line tool maps it to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed input, configuration or file contents.
    Input,
    /// NaN or infinity during computation.
    Numeric,
    Io,
}

pub trait Classify {
    fn kind(&self) -> ErrorKind;
}

impl Classify for tensor::TensorError {
    fn kind(&self) -> ErrorKind {
        match self {
            tensor::TensorError::NonFinite(_) => ErrorKind::Numeric,
            _ => ErrorKind::Input,
        }
    }
}

impl Classify for model::ModelError {
    fn kind(&self) -> ErrorKind {
        match self {
            model::ModelError::NonFiniteAttention { .. } => ErrorKind::Numeric,
            model::ModelError::Tensor(e) => e.kind(),
            _ => ErrorKind::Input,
        }
    }
}

impl Classify for model::CheckpointError {
    fn kind(&self) -> ErrorKind {
        match self {
            model::CheckpointError::Io(_) => ErrorKind::Io,
            model::CheckpointError::Model(e) => e.kind(),
            _ => ErrorKind::Input,
        }
    }
}

impl Classify for analyze::AnalyzeError {
    fn kind(&self) -> ErrorKind {
        match self {
            analyze::AnalyzeError::NonFinite => ErrorKind::Numeric,
            _ => ErrorKind::Input,
        }
    }
}

impl Classify for toy::ToyError {
    fn kind(&self) -> ErrorKind {
        match self {
            toy::ToyError::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Input,
        }
    }
}

impl Classify for train::TrainError {
    fn kind(&self) -> ErrorKind {
        use train::TrainError as E;
        match self {
            E::NonFiniteLoss { .. } => ErrorKind::Numeric,
            E::Io { .. } => ErrorKind::Io,
            E::Model(e) => e.kind(),
            E::Tensor(e) => e.kind(),
            E::Checkpoint(e) => e.kind(),
            E::Metric(e) => e.kind(),
            _ => ErrorKind::Input,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_errors_keep_their_kind() {
        let e = train::TrainError::Model(model::ModelError::Tensor(tensor::TensorError::NonFinite("x".into())));
        assert_eq!(e.kind(), ErrorKind::Numeric);
        let e = train::TrainError::Checkpoint(model::CheckpointError::Io(std::io::Error::other("gone")));
        assert_eq!(e.kind(), ErrorKind::Io);
        assert_eq!(train::TrainError::EmptyTrain.kind(), ErrorKind::Input);
    }
}
