//! Dense `f64` tensors, a reverse-mode gradient tape and reproducible random
//! streams. Just enough machinery for small MLP classifiers.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use rng::{stream_id, RngStream};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Lower clamp applied to every logarithm argument.
pub const LOG_CLAMP: f64 = 1e-12;

/// Natural log with its argument clamped at [`LOG_CLAMP`].
#[inline]
pub fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_CLAMP).ln()
}

/// Numerically stable softmax of a single row, written into `out`.
pub fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
