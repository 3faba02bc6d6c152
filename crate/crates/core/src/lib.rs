//! Core library for `nsad`: a trainable symbolic rule engine that refines
//! binary classifier logits using structured patient data.
//!
//! The pipeline has three moving parts:
//!
//! 1. A small neural perception model maps imaging-derived feature vectors to
//!    (CN, AD) logits ([`perception`]).
//! 2. A symbolic reasoner selects the rules that apply to a patient record,
//!    evaluates their differentiable effect expressions, and shifts the logits
//!    by the aggregate evidence `delta` ([`dsl`], [`autodiff`], [`reasoner`]).
//! 3. A two-stage trainer first pretrains perception alone, then fine-tunes
//!    the whole system end to end so both network weights and rule parameters
//!    adapt to data ([`optim`], [`trainer`]).
//!
//! Supporting modules provide cohort ingestion and a synthetic-cohort
//! simulator with known ground truth ([`data`]), classification metrics with
//! seed aggregation and a paired t-test ([`stats`]), and per-patient
//! explanatory reports ([`report`]).

pub mod assets;
pub mod autodiff;
pub mod data;
pub mod dsl;
pub mod optim;
pub mod perception;
pub mod reasoner;
pub mod report;
pub mod stats;
pub mod trainer;

pub use autodiff::ParameterStore;
pub use dsl::{FeatureKind, FeatureSchema, RuleSet};
pub use perception::{LogitPair, PatientSample};
pub use reasoner::{Adjustment, PatientRecord};
pub use report::DiagnosisReport;
