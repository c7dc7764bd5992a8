//! Published integer constants of the legacy surface.

use crate::error::ErrorClass;

pub const SUCCESS: i32 = 0;
pub const ERR_BUFFER: i32 = 1;
pub const ERR_COUNT: i32 = 2;
pub const ERR_TYPE: i32 = 3;
pub const ERR_TAG: i32 = 4;
pub const ERR_COMM: i32 = 5;
pub const ERR_RANK: i32 = 6;
pub const ERR_REQUEST: i32 = 7;
pub const ERR_TRUNCATE: i32 = 8;
pub const ERR_OTHER: i32 = 9;

pub const ANY_SOURCE: i32 = -1;
pub const ANY_TAG: i32 = -1;

pub const BYTE: i32 = 0;
pub const INT32: i32 = 1;
pub const INT64: i32 = 2;
pub const FLOAT32: i32 = 3;
pub const FLOAT64: i32 = 4;

pub const SUM: i32 = 0;
pub const PROD: i32 = 1;
pub const MIN: i32 = 2;
pub const MAX: i32 = 3;

/// Class → code. Total over every class, including `Success`.
pub const fn error_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Success => SUCCESS,
        ErrorClass::Buffer => ERR_BUFFER,
        ErrorClass::Count => ERR_COUNT,
        ErrorClass::Type => ERR_TYPE,
        ErrorClass::Tag => ERR_TAG,
        ErrorClass::Comm => ERR_COMM,
        ErrorClass::Rank => ERR_RANK,
        ErrorClass::Request => ERR_REQUEST,
        ErrorClass::Truncate => ERR_TRUNCATE,
        ErrorClass::Other => ERR_OTHER,
    }
}

/// Code → class; `None` for unpublished codes.
pub const fn error_class(code: i32) -> Option<ErrorClass> {
    Some(match code {
        SUCCESS => ErrorClass::Success,
        ERR_BUFFER => ErrorClass::Buffer,
        ERR_COUNT => ErrorClass::Count,
        ERR_TYPE => ErrorClass::Type,
        ERR_TAG => ErrorClass::Tag,
        ERR_COMM => ErrorClass::Comm,
        ERR_RANK => ErrorClass::Rank,
        ERR_REQUEST => ErrorClass::Request,
        ERR_TRUNCATE => ErrorClass::Truncate,
        ERR_OTHER => ErrorClass::Other,
        _ => return None,
    })
}

pub fn legacy_error_string(code: i32) -> &'static str {
    match error_class(code) {
        Some(ErrorClass::Success) => "no error",
        Some(ErrorClass::Buffer) => "invalid buffer: too small for the requested count",
        Some(ErrorClass::Count) => "invalid count argument",
        Some(ErrorClass::Type) => "invalid or mismatched datatype",
        Some(ErrorClass::Tag) => "invalid tag argument",
        Some(ErrorClass::Comm) => "invalid communicator",
        Some(ErrorClass::Rank) => "invalid rank",
        Some(ErrorClass::Request) => "invalid request handle",
        Some(ErrorClass::Truncate) => "message truncated on receive",
        Some(ErrorClass::Other) => "other error",
        None => "unknown error code",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strings() {
        assert_eq!(legacy_error_string(SUCCESS), "no error");
        assert!(legacy_error_string(ERR_TRUNCATE).contains("truncat"));
        assert!(legacy_error_string(999).contains("unknown"));
        assert!(legacy_error_string(-1).contains("unknown"));
    }

    #[test]
    fn bijection_over_published_codes() {
        for code in SUCCESS..=ERR_OTHER {
            let class = error_class(code).unwrap();
            assert_eq!(error_code(class), code);
        }
        for class in ErrorClass::ERRORS {
            assert_eq!(error_class(error_code(class)), Some(class));
            assert_ne!(error_code(class), SUCCESS);
        }
        assert_eq!(error_class(10), None);
    }
}
