//! Structured errors for the idiomatic surface.
//!
//! Every failing operation returns an [`MpError`] carrying an [`ErrorClass`].
//! Integer codes only exist in the [`legacy`](crate::legacy) surface, which
//! converts classes to codes at its boundary.

use std::fmt;

use crate::request::RequestRef;

/// The closed set of error classes shared by both API surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ErrorClass {
    Success,
    /// A user buffer is too small for the requested element count.
    Buffer,
    /// A count is negative, or a contribution exceeds its declared count.
    Count,
    /// Datatype mismatch, or an unsupported datatype / reduction pairing.
    Type,
    /// Tag outside `[0, TAG_UB]`, or a wildcard where one is not allowed.
    Tag,
    /// Unknown, freed or finalized communicator.
    Comm,
    /// Rank outside the communicator.
    Rank,
    /// Unknown or already-consumed request.
    Request,
    /// A message was larger than the posted receive.
    Truncate,
    Other,
}

impl ErrorClass {
    /// All non-success classes, in published-code order.
    pub const ERRORS: [ErrorClass; 9] = [
        ErrorClass::Buffer,
        ErrorClass::Count,
        ErrorClass::Type,
        ErrorClass::Tag,
        ErrorClass::Comm,
        ErrorClass::Rank,
        ErrorClass::Request,
        ErrorClass::Truncate,
        ErrorClass::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Success => "SUCCESS",
            ErrorClass::Buffer => "ERR_BUFFER",
            ErrorClass::Count => "ERR_COUNT",
            ErrorClass::Type => "ERR_TYPE",
            ErrorClass::Tag => "ERR_TAG",
            ErrorClass::Comm => "ERR_COMM",
            ErrorClass::Rank => "ERR_RANK",
            ErrorClass::Request => "ERR_REQUEST",
            ErrorClass::Truncate => "ERR_TRUNCATE",
            ErrorClass::Other => "ERR_OTHER",
        }
    }

    pub fn is_success(self) -> bool {
        self == ErrorClass::Success
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A failed operation.
///
/// `failed_request` is populated only when a nonblocking operation (or a wait
/// over one) failed; it identifies the request that reached the failed state.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{class}: {message}")]
pub struct MpError {
    pub class: ErrorClass,
    pub message: String,
    pub failed_request: Option<RequestRef>,
}

impl MpError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        // SUCCESS is not an error; degrade to OTHER rather than build an invalid value.
        let class = if class.is_success() { ErrorClass::Other } else { class };
        MpError {
            class,
            message: message.into(),
            failed_request: None,
        }
    }

    pub fn with_request(mut self, request: RequestRef) -> Self {
        self.failed_request = Some(request);
        self
    }

    pub(crate) fn comm(message: impl Into<String>) -> Self {
        MpError::new(ErrorClass::Comm, message)
    }

    pub(crate) fn other(message: impl Into<String>) -> Self {
        MpError::new(ErrorClass::Other, message)
    }
}

pub type Result<T, E = MpError> = std::result::Result<T, E>;
