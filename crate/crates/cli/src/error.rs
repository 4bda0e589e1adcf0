use serde::Serialize;
use thiserror::Error;

use unikw_core::codec::CodecError;
use unikw_core::corpus::CorpusError;
use unikw_core::decoder::DecodeError;
use unikw_core::dense_index::IndexError;
use unikw_core::encoder::{EncoderError, TrainError};
use unikw_core::eval::EvalError;
use unikw_core::retriever::RetrieveError;
use unikw_core::trie::TrieError;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Validation,
    Io,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 2,
            ErrorKind::Io => 3,
            ErrorKind::Internal => 4,
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Io,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Internal,
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": {
                "kind": self.kind,
                "exit_code": self.kind.exit_code(),
                "message": self.message,
            }
        })
        .to_string()
    }
}

fn make(kind: ErrorKind, e: &dyn std::fmt::Display) -> CliError {
    CliError {
        kind,
        message: e.to_string(),
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        make(ErrorKind::Io, &e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        make(ErrorKind::Validation, &e)
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        make(ErrorKind::Validation, &e)
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let kind = match e {
            CorpusError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        };
        make(kind, &e)
    }
}

impl From<TrieError> for CliError {
    fn from(e: TrieError) -> Self {
        let kind = match e {
            TrieError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        };
        make(kind, &e)
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        let kind = match e {
            EncoderError::Io { .. } => ErrorKind::Io,
            EncoderError::DegenerateEmbedding => ErrorKind::Internal,
            _ => ErrorKind::Validation,
        };
        make(kind, &e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Encoder(inner) => inner.into(),
            TrainError::Diverged { .. } => make(ErrorKind::Internal, &e),
            _ => make(ErrorKind::Validation, &e),
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        let kind = match e {
            IndexError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        };
        make(kind, &e)
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        let kind = match e {
            DecodeError::OrderDisagreement { .. } => ErrorKind::Internal,
            _ => ErrorKind::Validation,
        };
        make(kind, &e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        make(ErrorKind::Validation, &e)
    }
}

impl From<RetrieveError> for CliError {
    fn from(e: RetrieveError) -> Self {
        match e {
            RetrieveError::Corpus(inner) => inner.into(),
            RetrieveError::Trie(inner) => inner.into(),
            RetrieveError::Encoder(inner) => inner.into(),
            RetrieveError::Index(inner) => inner.into(),
            RetrieveError::Decode(inner) => inner.into(),
            RetrieveError::Io { .. } => make(ErrorKind::Io, &e),
            _ => make(ErrorKind::Validation, &e),
        }
    }
}
