//! Floating-point abstraction shared by every numerical module.
//!
//! All solvers are written against [`Scalar`] so the same code runs in `f64`
//! (the default everywhere in the CLI) and `f32`.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    'static
    + Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Relative tolerance used when snapping times onto the grid.
    #[inline]
    fn snap_tol() -> Self {
        Self::epsilon() * Self::lit(1024.0)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
