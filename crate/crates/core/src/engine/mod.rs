//! Minimal tensor + reverse-mode autodiff engine, sized for desk-scale supernets.
//!
//! Tensors are dense NCHW buffers. A [`Tape`] records every primitive applied
//! during one forward pass and supports exactly one backward sweep.

mod optim;
mod tape;
mod tensor;

pub use optim::{cosine_lr, sgd_step, SgdConfig};
pub use tape::{Grads, ParamId, Tape, Var};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar type of the engine: `f32` for training, `f64` for gradient checks.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Variance floor used by batch normalization.
    const BN_EPS: Self;
    const NAME: &'static str;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64")
    }
}

impl Real for f32 {
    const BN_EPS: f32 = 1e-5;
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const BN_EPS: f64 = 1e-10;
    const NAME: &'static str = "f64";
}
