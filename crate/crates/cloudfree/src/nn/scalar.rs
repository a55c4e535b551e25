//! The floating-point abstraction layers are generic over.
//!
//! Production code trains and stores checkpoints in `f32`; tests instantiate
//! the same layers in `f64` so central finite differences have enough mantissa
//! to judge analytic gradients. Keeping one code path for both rules out the
//! classic failure where the checked implementation is not the shipped one.

/// Floating-point element type usable in every layer, loss and reduction.
pub trait Scalar:
    num_traits::Float
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (rounds to nearest for `f32`).
    fn from_f64(x: f64) -> Self;
    /// Exact widening to `f64`.
    fn to_f64(self) -> f64;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }

    /// Numerically stable `ln(1 + e^x)`.
    fn softplus(self) -> Self {
        // For large x, ln(1+e^x) = x + ln(1+e^-x); evaluating the naive form
        // would overflow e^x long before the result does.
        if self > Self::zero() {
            self + self.neg().exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }

    /// Logistic sigmoid, stable for large |x|.
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            (Self::one() + self.neg().exp()).recip()
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}
