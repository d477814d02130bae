//! Scalar abstraction shared by the numeric modules.
//!
//! Everything that does arithmetic on descriptors (clustering, encoding,
//! pooling, whitening, ranking) is written against [`Scalar`] so the same code
//! runs in `f32` for bulk work and `f64` where gradient checks and oracles need
//! the extra precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Scales `v` to unit l2 norm in place. Returns `false` (leaving `v` untouched)
/// when the norm is zero or not finite.
pub fn normalize_in_place<T: Scalar>(v: &mut [T]) -> bool {
    let n = l2_norm(v);
    if n == T::zero() || !n.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    true
}

/// `acc += v`
pub fn add_assign<T: Scalar>(acc: &mut [T], v: &[T]) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

pub fn cast_vec<A: Scalar, B: Scalar>(v: &[A]) -> Vec<B> {
    v.iter()
        .map(|x| B::from(*x).expect("finite scalar conversion"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_rejects_zero() {
        let mut v = [0.0f64; 3];
        assert!(!normalize_in_place(&mut v));
        let mut w = [3.0f32, 4.0];
        assert!(normalize_in_place(&mut w));
        assert!((w[0] - 0.6).abs() < 1e-6 && (w[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn distance_matches_norm_of_difference() {
        let a = [1.0f64, 2.0, 2.0];
        let b = [0.0f64, 0.0, 0.0];
        assert_eq!(squared_distance(&a, &b), 9.0);
        assert_eq!(l2_norm(&a), 3.0);
    }
}
