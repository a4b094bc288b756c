use std::fmt;

use crate::validate::ViolationCode;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("graph has no joints")]
    Empty,
    #[error("joint {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("edge ({0}, {1}) references a joint outside 0..{2}")]
    BadIndex(usize, usize, usize),
    #[error("self-loop on joint {0}")]
    SelfLoop(usize),
    #[error("rotation is not orthonormal (max |R·Rᵀ − I| = {0:e})")]
    NotOrthonormal(f64),
    #[error("cannot drop {k} joints from a graph with {n}")]
    TooManyDropped { k: usize, n: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl GraphError {
    pub fn code(&self) -> Option<ViolationCode> {
        match self {
            GraphError::Empty => Some(ViolationCode::NodeCount),
            GraphError::NonFinite(_) => Some(ViolationCode::NonFinite),
            GraphError::BadIndex(..) | GraphError::SelfLoop(_) => Some(ViolationCode::BadIndex),
            _ => None,
        }
    }
}

/// Schema violation while reading skeleton or stroke JSON.
///
/// `pointer` is an RFC 6901 JSON pointer to the offending value ("" for the
/// document root).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ParseError {
    pub pointer: String,
    pub code: Option<ViolationCode>,
    pub message: String,
}

impl ParseError {
    pub(crate) fn at(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self { pointer: pointer.into(), code: None, message: message.into() }
    }

    pub(crate) fn with_code(mut self, code: ViolationCode) -> Self {
        self.code = Some(code);
        self
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = if self.pointer.is_empty() { "<root>" } else { &self.pointer };
        match self.code {
            Some(code) => write!(f, "{at}: {} ({})", self.message, code.as_str()),
            None => write!(f, "{at}: {}", self.message),
        }
    }
}
