use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the statistics and indicators are computed in.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only for values the type cannot hold.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Sums a slice left to right.
pub(crate) fn sum<T: Real>(xs: impl IntoIterator<Item = T>) -> T {
    xs.into_iter().fold(T::zero(), |acc, x| acc + x)
}

/// Mean and population variance (divide by `n`) of a non-empty sequence.
/// A constant sequence has exactly zero variance.
pub(crate) fn mean_pop_var<T: Real>(xs: &[T]) -> (T, T) {
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], T::zero());
    }
    let n = T::from_count(xs.len());
    let mean = sum(xs.iter().copied()) / n;
    let var = sum(xs.iter().map(|&x| (x - mean) * (x - mean))) / n;
    (mean, var)
}
