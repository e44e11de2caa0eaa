//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Besides the usual arithmetic the tape provides the two operators adversarial
//! representation learning relies on: a gradient reversal node and spectral
//! normalization by persistent power iteration. [`input_gradient`] records the
//! gradient of a critic with respect to its input on the tape itself, so a
//! gradient penalty built from it is exact under a second backward pass.

mod error;
mod spectral;
mod tape;
mod tensor;

pub use error::{Result, TapeError};
pub use spectral::{spectral_normalize, Normalized, SpectralState};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

/// `d critic(x) / dx` for a critic producing one scalar per row of `x`.
///
/// Rows are independent, so the gradient of the summed output gives every
/// row's own input gradient.
pub fn input_gradient<F>(tape: &mut Tape, x: Var, critic: F) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let out = critic(tape, x)?;
    let rows = tape.shape(x)[0];
    if tape.shape(out) != [rows, 1] {
        return Err(TapeError::Contract(format!(
            "critic must emit one scalar per row: input {:?}, output {:?}",
            tape.shape(x),
            tape.shape(out)
        )));
    }
    tape.grad(out, x)
}

/// WGAN-GP style penalty `mean_i (||grad_i|| - 1)^2` over rows of an input gradient.
pub fn gradient_penalty(tape: &mut Tape, input_grad: Var) -> Result<Var> {
    let norms = tape.row_l2norm(input_grad)?;
    let centered = tape.add_scalar(norms, -1.0)?;
    let sq = tape.square(centered)?;
    tape.mean(sq)
}
