use alloc::string::{String, ToString};

use thiserror::Error;

use crate::grade::Grade;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("grade {0} has no referral category (enucleated eyes must be filtered upstream)")]
    UnsupportedGrade(Grade),
}

/// A text field that does not hold a valid canonical code.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {kind}: {value:?}")]
pub struct ParseError {
    pub kind: &'static str,
    pub value: String,
}

impl ParseError {
    pub fn new(kind: &'static str, value: &str) -> Self {
        ParseError {
            kind,
            value: value.to_string(),
        }
    }
}
