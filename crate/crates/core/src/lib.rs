//! Continuous relaxations of the `argsort` operator.
//!
//! The central object is [`soft_sort`]: row `i` of its output is the softmax of
//! the negative distances between every score and the `i`-th largest score.
//! The crate also carries the [`neural_sort`] baseline, closed-form backward
//! passes for both operators ([`grad`]), Gumbel-perturbed stochastic variants
//! ([`stochastic`]), a differentiable k-nearest-neighbour head ([`dknn`]) and
//! the losses, metrics, optimizers and training tasks used to exercise them.
//!
//! Everything here is a pure function of its inputs and builds without the
//! standard library (an allocator is required). Disable the default `std`
//! feature to route float intrinsics through `libm`.
//!
//! Indices are 0-based throughout the API. Helpers such as
//! [`Permutation::to_one_based`] exist for display.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod dknn;
mod error;
pub mod grad;
pub mod loss;
mod math;
mod matrix;
pub mod metrics;
mod ops;
pub mod optim;
mod rng;
pub mod stochastic;
pub mod tasks;

pub use error::{Error, Result};
pub use grad::{GradResult, Operator};
pub use matrix::Matrix;
pub use ops::{
    argsort_desc, hard_project, neural_sort, neural_sort_batch, neural_sort_logits, perm_matrix,
    row_softmax, soft_sort, soft_sort_batch, sort_desc, Permutation, PermutationMatrix,
    RelaxedPermMatrix, ScoreBatch, SemiMetric, Temperature, UrsViolation,
};
pub use rng::RngSeed;
