//! Minimal deterministic numeric kernel: dense matrices, seeded random
//! streams, stable reductions, and the finite-difference oracle that backs
//! every gradient test in the crate. 64-bit floats throughout; the margin
//! geometry cancels badly near theta = 0 in 32-bit.

mod matrix;
mod ops;
mod rng;

pub use matrix::{axpy, dot, norm, Matrix};
pub use ops::{finite_difference_grad, log_sum_exp, rel_err, stable_softmax};
pub use rng::{
    stream_id, RngStream, STREAM_INIT, STREAM_SAMPLER, STREAM_SPEAKER, STREAM_TRIALS,
    STREAM_UTTERANCE,
};
