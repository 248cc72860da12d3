//! Scalar abstraction for the numeric core.
//!
//! Similarity, mining, the multi-similarity loss and its gradient, the
//! projection head and its optimizer are written once over [`Scalar`] and
//! instantiated at `f32` (storage, inference) and `f64` (gradient checks,
//! training accumulation).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 converts to every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product with 64-bit accumulation regardless of storage type.
pub fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        for (l, lane) in lanes.iter_mut().enumerate() {
            *lane += a[i + l].to_f64_lossy() * b[i + l].to_f64_lossy();
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i].to_f64_lossy() * b[i].to_f64_lossy();
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Euclidean norm with 64-bit accumulation.
pub fn norm_f64<T: Scalar>(a: &[T]) -> f64 {
    dot_f64(a, a).sqrt()
}
