//! Scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the solvers are generic over.
///
/// Implemented for `f32` and `f64`. Tolerances quoted in tests assume `f64`;
/// `f32` builds are useful for quick exploratory tables.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// Converts a count.
    #[inline]
    fn of(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }

    #[inline]
    fn two() -> Self {
        Self::lit(2.0)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Fractional part in `[0, 1)`, robust to values a hair below an integer.
    #[inline]
    fn frac01(self) -> Self {
        let f = self - self.floor();
        if f >= Self::one() {
            Self::zero()
        } else {
            f
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Checks that `xs` is strictly increasing, returning the first offending index.
pub(crate) fn first_non_increasing<T: Real>(xs: &[T]) -> Option<usize> {
    xs.windows(2).position(|w| !(w[1] > w[0])).map(|i| i + 1)
}

/// `n + 1` equispaced points on `[lo, hi]`.
pub fn linspace<T: Real>(lo: T, hi: T, n: usize) -> Vec<T> {
    assert!(n >= 1, "linspace needs at least one interval");
    let step = (hi - lo) / T::of(n);
    (0..=n)
        .map(|i| if i == n { hi } else { lo + step * T::of(i) })
        .collect()
}

/// Symmetric grid `[-r, r]` with `n` intervals.
pub fn symmetric_grid<T: Real>(r: T, n: usize) -> Vec<T> {
    linspace(-r, r, n)
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub(crate) fn gauss_legendre_unit<T: Real>(order: usize) -> Vec<(T, T)> {
    let table: &[(f64, f64)] = match order {
        1 => &[(0.0, 2.0)],
        2 => &[(-0.577_350_269_189_625_8, 1.0), (0.577_350_269_189_625_8, 1.0)],
        3 => &[
            (-0.774_596_669_241_483_4, 0.555_555_555_555_555_6),
            (0.0, 0.888_888_888_888_889),
            (0.774_596_669_241_483_4, 0.555_555_555_555_555_6),
        ],
        _ => &[
            (-0.861_136_311_594_052_6, 0.347_854_845_137_453_85),
            (-0.339_981_043_584_856_25, 0.652_145_154_862_546_1),
            (0.339_981_043_584_856_25, 0.652_145_154_862_546_1),
            (0.861_136_311_594_052_6, 0.347_854_845_137_453_85),
        ],
    };
    table
        .iter()
        .map(|&(x, w)| (T::lit(0.5 * (x + 1.0)), T::lit(0.5 * w)))
        .collect()
}

/// Solves a tridiagonal system in place (Thomas algorithm). `lower[0]` and
/// `upper[n-1]` are ignored. Returns `None` on a zero pivot.
pub(crate) fn solve_tridiagonal<T: Real>(
    lower: &[T],
    diag: &[T],
    upper: &[T],
    rhs: &[T],
) -> Option<Vec<T>> {
    let n = diag.len();
    if n == 0 {
        return Some(Vec::new());
    }
    let mut c = vec![T::zero(); n];
    let mut d = vec![T::zero(); n];
    let mut piv = diag[0];
    if piv == T::zero() || !piv.is_finite() {
        return None;
    }
    c[0] = upper[0] / piv;
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - lower[i] * c[i - 1];
        if piv == T::zero() || !piv.is_finite() {
            return None;
        }
        c[i] = if i + 1 < n { upper[i] / piv } else { T::zero() };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / piv;
    }
    for i in (0..n - 1).rev() {
        let next = d[i + 1];
        d[i] -= c[i] * next;
    }
    Some(d)
}
