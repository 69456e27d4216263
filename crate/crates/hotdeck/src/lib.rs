//! Constraint-aware random hot deck multiple imputation for longitudinal
//! activity panels.
//!
//! The library imputes weekly activity frequency, the set of activities
//! performed, and per-activity session counts under the hard constraints
//! that tie them together (number of activities ≤ frequency, counts ≥ 1 for
//! every played activity, counts sum to the frequency). Donors are matched
//! within individuals through an ordered fallback ladder of predicates and
//! time-window radii, imputed values are drawn at random, and the whole
//! pipeline is repeated M times so results can be pooled with the standard
//! multiple-imputation combining rules.
//!
//! Module map:
//! - [`panel`]: the longitudinal data model and its constraint validation
//! - [`donor`]: match predicates, fallback ladders, donor pools, ABB resampling
//! - [`frequency`]: frequency imputation via the residual-from-peer-median method
//! - [`sport`]: activity-set imputation under the size-vs-frequency constraint
//! - [`counts`]: distributing a frequency over an activity set
//! - [`engine`]: replicate orchestration (frequency → sports → counts)
//! - [`pooling`]: built-in analyses and Rubin-style pooling
//! - [`sim`]: synthetic panel generation, amputation, and method evaluation
//! - [`io`]: file formats, run configuration, scenario files

pub mod counts;
pub mod donor;
pub mod engine;
pub mod frequency;
pub mod io;
pub mod panel;
pub mod pooling;
pub mod rng;
pub mod sim;
pub mod sport;
pub mod stats;
