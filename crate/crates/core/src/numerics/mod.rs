//! Dense f64 tensors with a reverse-mode tape, finite-difference checking and
//! the named-tensor binary format.

pub mod checkpoint;
pub mod grad_check;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use checkpoint::{read_tensors, write_tensors, NamedTensor};
pub use grad_check::{compare_with_finite_differences, grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{Gradients, Segment, Tape, Var};
pub use tensor::Tensor;

/// `a · b` without a tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> crate::Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

/// Softmax along the trailing axis without a tape.
pub fn softmax(x: &Tensor) -> Tensor {
    let data = kernels::softmax_rows(x.data(), x.last_dim());
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64]) -> Tensor {
    let (y, _, _) = kernels::layer_norm(x.data(), gain, bias);
    Tensor::new(x.shape().to_vec(), y).expect("same shape")
}

pub fn rms_norm(x: &Tensor, gain: &[f64]) -> Tensor {
    let (y, _) = kernels::rms_norm(x.data(), gain);
    Tensor::new(x.shape().to_vec(), y).expect("same shape")
}
