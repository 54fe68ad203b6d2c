use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Arithmetic shared by plain floats and forward-mode duals.
///
/// Loss code written against this trait gives exact gradients when run on
/// `f64` and, run on [`Dual`], the directional derivative of those gradients.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn cst(v: f64) -> Self;
    /// Primal value.
    fn re(self) -> f64;
    fn scale(self, k: f64) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    /// `ln(1 + e^x)` without overflow.
    fn softplus(self) -> Self {
        if self.re() > 0.0 {
            self + ((-self).exp() + Self::cst(1.0)).ln()
        } else {
            (self.exp() + Self::cst(1.0)).ln()
        }
    }

    fn sigmoid(self) -> Self {
        // sigmoid(x) = (1 + tanh(x/2)) / 2
        (self.scale(0.5).tanh() + Self::cst(1.0)).scale(0.5)
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        self * k
    }
    #[inline]
    fn tanh(self) -> Self {
        libm::tanh(self)
    }
    #[inline]
    fn exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        libm::log(self)
    }
}

/// First-order forward-mode number `re + du·ε`, `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub const fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.du - q * o.du) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.du += o.du;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        self.re -= o.re;
        self.du -= o.du;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Scalar for Dual {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        Dual::new(self.re * k, self.du * k)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = libm::tanh(self.re);
        Dual::new(t, self.du * (1.0 - t * t))
    }
    #[inline]
    fn exp(self) -> Self {
        let e = libm::exp(self.re);
        Dual::new(e, self.du * e)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(libm::log(self.re), self.du / self.re)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn derivative(f: impl Fn(Dual) -> Dual, x: f64) -> f64 {
        f(Dual::new(x, 1.0)).du
    }

    #[test]
    fn elementary_derivatives() {
        let x = 0.37;
        assert!((derivative(|d| d.tanh(), x) - (1.0 - libm::tanh(x).powi(2))).abs() < 1e-15);
        assert!((derivative(|d| d.exp(), x) - libm::exp(x)).abs() < 1e-15);
        assert!((derivative(|d| d.ln(), x) - 1.0 / x).abs() < 1e-15);
        assert!((derivative(|d| d / (d * d + Dual::cst(1.0)), x)
            - (1.0 - x * x) / (x * x + 1.0).powi(2))
        .abs()
            < 1e-15);
    }

    #[test]
    fn softplus_is_stable_and_differentiable() {
        assert!((800.0f64.softplus() - 800.0).abs() < 1e-12);
        assert!((-800.0f64).softplus() >= 0.0);
        for x in [-3.0, -0.2, 0.0, 0.4, 5.0] {
            let sig = 1.0 / (1.0 + libm::exp(-x));
            assert!((derivative(|d| d.softplus(), x) - sig).abs() < 1e-14);
            assert!((x.sigmoid() - sig).abs() < 1e-15);
        }
    }
}
