//! Structured sparse fine-tuning engine: coupled-structure discovery over
//! weight–activation dependency graphs, head/channel selection, output-
//! preserving co-permutation, partial back-propagation over contiguous
//! trainable regions, the unmerged-adapter serving lifecycle, analytic cost
//! accounting, and a theory lab for minimum-norm adaptations of deep linear
//! networks.

pub mod account;
pub mod adapter;
pub mod depgraph;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod permute;
pub mod rng;
pub mod select;
pub mod theory;
pub mod train;
