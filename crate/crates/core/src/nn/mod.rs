//! Minimal reverse-mode differentiable layers.
//!
//! Networks are static ordered layer lists ([`Sequential`]). Parameters live
//! in the layers and are read-only during a pass; each forward pass returns a
//! [`Trace`] holding the activations its backward pass needs, and gradients
//! accumulate into a separate [`Gradients`] buffer. This keeps concurrent
//! passes over distinct inputs possible and makes the single-writer
//! optimizer step explicit.

mod gradcheck;
mod layers;
mod loss;
mod optim;
mod records;
mod sequential;
mod tensor;

pub use gradcheck::{finite_difference_check, Differentiable, FdEntry, FdOptions, FdReport, SequentialProbe};
pub use layers::{
    Conv1d, Dense, Layer, LayerKind, LayerNorm, LeakyRelu, MaxPool1d, NormAxis, SincConv, StatsPool, TdnnSplice,
};
pub use layers::stats_pooling;
pub use loss::{softmax_cross_entropy, softmax_rows};
pub use optim::Adam;
pub use records::{read_records, write_records, ParamRecord};
pub use sequential::{Gradients, Sequential, Trace};
pub use tensor::Tensor;

use crate::Scalar;

/// Sum of `values` that depends only on their multiset: sort, then pairwise tree reduction.
pub fn stable_sum<T: Scalar>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pairwise_sum(values)
}

fn pairwise_sum<T: Scalar>(values: &[T]) -> T {
    match values.len() {
        0 => T::zero(),
        1 => values[0],
        2 => values[0] + values[1],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}
