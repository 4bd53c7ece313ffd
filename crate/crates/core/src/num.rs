//! Scalar abstraction over the floating-point types the engine runs on.

use std::fmt::{Debug, Display};

/// Floating-point scalar the tensor engine is generic over.
///
/// `f64` is the precision used by tests and gradient checks; `f32` is
/// available for training runs that select it in configuration.
pub trait Scalar: num_traits::Float + Debug + Display + Send + Sync + 'static {
    /// Conversion from `f64` for constants and config values.
    fn of_f64(x: f64) -> Self {
        num_traits::cast(x).expect("finite f64 converts to scalar")
    }

    /// Widening conversion used by metrics, reports, and file formats.
    fn as_f64(self) -> f64 {
        num_traits::cast(self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
