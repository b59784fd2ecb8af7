//! Dense matrix math, reverse-mode differentiation and Adam.

pub mod adam;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState, Direction};
pub use params::{NamedAdam, ParamRegistry};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{NormalizedRows, Tensor};

use crate::error::Result;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.sigmoid()
}

pub fn row_softmax(a: &Tensor) -> Tensor {
    a.row_softmax()
}

pub fn l2_normalize_rows(a: &Tensor) -> NormalizedRows {
    a.l2_normalize_rows()
}
