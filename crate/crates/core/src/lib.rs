#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod benchmark;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod numeric;
pub mod observation;
pub mod optim;
pub mod outcome;
pub mod simulate;
pub mod step;
pub mod visiting;
