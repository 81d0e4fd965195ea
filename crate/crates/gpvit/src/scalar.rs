//! Element types for tensors: `f32` for ordinary forward passes, `f64` for
//! gradient checking.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + Copy + 'static
{
    const NAME: &'static str;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Shorthand for lowering an `f64` constant into the element type.
#[inline]
pub fn s<E: Scalar>(x: f64) -> E {
    E::from_f64(x).expect("constant out of range for element type")
}
