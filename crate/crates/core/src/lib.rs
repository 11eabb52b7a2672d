//! A desk-scale laboratory for zero-shot cross-lingual transfer between a
//! language and systematically derived counterparts.
//!
//! The pipeline runs: [`corpus`] loading, [`transform`] into a derived
//! language, a shared [`tokenizer`] and bilingual dictionary, [`instances`]
//! for each pre-training objective, a small transformer [`model`] trained on
//! the [`objectives`], and evaluation with [`metrics`] over synthetic
//! [`tasks`]. [`harness`] ties the stages into experiment grids and reports.

pub mod corpus;
pub mod harness;
pub mod error;
pub mod instances;
pub mod model;
pub mod metrics;
pub mod objectives;
pub mod rng;
pub mod tasks;
pub mod tokenizer;
pub mod transform;

pub use error::{Error, Result};
