//! Numerical laboratory for the Fisher-information formulation of quantum
//! mechanics: Madelung hydrodynamics, the minimum-Fisher-information
//! variational principle, and the Kähler structure built from the symplectic
//! form and the Fisher metric.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod fields;
pub mod format;
pub mod grid;
pub mod cli;
pub mod info;
pub mod kahler;
pub mod potential;
pub mod variation;
