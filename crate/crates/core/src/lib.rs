//! Gradient-matching graph condensation, an adaptive trigger backdoor attack
//! against it, and the evaluation/defense toolkit around both.
//!
//! Pipeline: a host graph is condensed into a small synthetic graph whose
//! per-class model gradients match the host's. The attack co-optimizes a
//! trigger generator during condensation so that models trained on the
//! condensed graph misclassify trigger-bearing nodes into a target class,
//! while clean accuracy is preserved. Metrics (ASR/CTA) and two defenses
//! (edge pruning, randomized-subsampling smoothing) close the loop.

pub mod analytic;
pub mod autodiff;
pub mod backdoor;
pub mod condense;
pub mod defense;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kmeans;
pub mod localview;
pub mod models;
pub mod optim;
pub mod rng;
pub mod sparse;

pub use error::{Error, Result};
