use strokerig_core::{GraphError, ValidationReport};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("input failed validation: {}", codes(.0))]
    Invalid(ValidationReport),
    #[error("loss became non-finite at step {0}")]
    Diverged(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn codes(r: &ValidationReport) -> String {
    r.codes().iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", ")
}
