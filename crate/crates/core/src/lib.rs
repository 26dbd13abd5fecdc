//! Driving-style-aware discretionary lane-change decision model.
//!
//! The pipeline runs from trajectory recordings to a trained classifier:
//! [`ingest`] reads recordings, [`features`] turns 2 s trajectory windows
//! into driving operational pictures and traffic factors, [`labeling`]
//! extracts lane-change and lane-keep cases, [`model`] trains the
//! convolutional classifier built on [`nn`], and [`eval`] reports accuracy
//! and lane-change impact. [`synthgen`] produces style-parameterized
//! synthetic recordings for desk-scale runs.

pub mod eval;
pub mod experiment;
pub mod features;
pub mod ingest;
pub mod labeling;
pub mod model;
pub mod nn;
pub mod synthgen;
pub mod trajectory;
