//! Tensor engine: dense values, reverse-mode autodiff, seeded randomness and
//! a finite-difference gradient checker.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport, REL_FLOOR};
pub use rng::{gaussian_sample, Rng};
pub use tape::{Gradients, Tape, Var, MASKED};
pub use tensor::Tensor;

/// Softmax with an additive mask, as a free function over tape values.
pub fn masked_softmax<'t>(logits: Var<'t>, mask: &Tensor) -> crate::Result<Var<'t>> {
    logits.masked_softmax(mask)
}

/// Writes a tensor as `{"shape": [...], "data": [...]}` for debugging.
pub fn dump_json(t: &Tensor) -> String {
    serde_json::to_string(t).expect("tensor serializes")
}
