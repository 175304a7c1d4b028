//! Dense numeric core: tensors, a reverse-mode tape, Adam, a finite
//! difference checker and the checkpoint container.

mod adam;
pub mod checkpoint;
mod float;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use float::{Float, FloatWidth};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

/// Numerically stable softmax of a slice.
pub fn softmax<T: Float>(x: &[T]) -> Result<Vec<T>> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax input"));
    }
    Ok(kernels::softmax(x))
}

pub(crate) use float::cast;
