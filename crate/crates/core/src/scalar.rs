//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type the simulator and the sensitivity machinery run on.
///
/// Implemented for `f32` and `f64`. Tolerances in the default configurations
/// are tuned for `f64`; `f32` works for coarse runs.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Converts an `f64` literal. Never fails for the implemented types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Base relative step for central differences.
    ///
    /// `1e-6` for double precision, `eps^(1/3)` otherwise.
    fn fd_base() -> Self {
        let eps = Self::default_epsilon();
        if eps < Self::lit(1e-10) {
            Self::lit(1e-6)
        } else {
            eps.cbrt()
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}
