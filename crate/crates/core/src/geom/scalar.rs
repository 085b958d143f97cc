//! Scalar abstraction so the geometry kernels can run on plain `f64` or on
//! forward-mode dual numbers that carry exact first derivatives.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;

    fn abs(self) -> Self {
        if self.value() < 0.0 {
            -self
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// Dual number with `N` tangent directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub val: f64,
    pub der: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(val: f64) -> Self {
        Dual { val, der: [0.0; N] }
    }

    /// Independent variable number `i`.
    pub fn variable(val: f64, i: usize) -> Self {
        let mut der = [0.0; N];
        der[i] = 1.0;
        Dual { val, der }
    }

    #[inline]
    fn map_der(self, f: impl Fn(f64) -> f64) -> [f64; N] {
        let mut der = self.der;
        for d in der.iter_mut() {
            *d = f(*d);
        }
        der
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut der = self.der;
        for (d, r) in der.iter_mut().zip(rhs.der) {
            *d += r;
        }
        Dual { val: self.val + rhs.val, der }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut der = self.der;
        for (d, r) in der.iter_mut().zip(rhs.der) {
            *d -= r;
        }
        Dual { val: self.val - rhs.val, der }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut der = [0.0; N];
        for i in 0..N {
            der[i] = self.der[i] * rhs.val + self.val * rhs.der[i];
        }
        Dual { val: self.val * rhs.val, der }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.val;
        let q = self.val * inv;
        let mut der = [0.0; N];
        for i in 0..N {
            der[i] = (self.der[i] - q * rhs.der[i]) * inv;
        }
        Dual { val: q, der }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual {
            val: -self.val,
            der: self.map_der(|d| -d),
        }
    }
}

impl<const N: usize> Scalar for Dual<N> {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(self) -> f64 {
        self.val
    }
    fn sin(self) -> Self {
        let c = self.val.cos();
        Dual {
            val: self.val.sin(),
            der: self.map_der(|d| d * c),
        }
    }
    fn cos(self) -> Self {
        let s = self.val.sin();
        Dual {
            val: self.val.cos(),
            der: self.map_der(|d| -d * s),
        }
    }
}
