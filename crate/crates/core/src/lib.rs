//! Diabetic-retinopathy referral screening: grading domain, image
//! standardisation, the per-image decision flow, cohort aggregation,
//! classification metrics and group-fairness measures.
//!
//! The crate is `no_std` with `alloc`; file formats, HTTP and the command
//! line live in the `drscreen` crate.

#![no_std]

extern crate alloc;

pub mod aggregation;
pub mod cohort;
pub mod error;
pub mod evaluation;
pub mod fairness;
pub mod grade;
pub mod inference;
pub mod metrics;
pub mod preprocess;
pub mod reference;
pub mod simulation;
pub mod workflow;

pub use error::{DomainError, ParseError};
pub use grade::{
    referral_category, Disposition, Grade, Laterality, Projection, ReferralCategory, ReferralScheme, Sex,
};
