//! Double-double arithmetic: an unevaluated sum `hi + lo` with about 106
//! significant bits, and a small [`Real`] trait shared with `f64`.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar operations needed by the reference forward pass.
pub trait Real:
    Copy
    + PartialOrd
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;

    fn abs(self) -> Self {
        if self < Self::from_f64(0.0) {
            -self
        } else {
            self
        }
    }

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    fn scale_pow2(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    fn recip(self) -> Self {
        Dd::ONE / self
    }

    fn square(self) -> Self {
        self * self
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::new(x)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        Dd::norm(s1, s2 + t2)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p1, p2) = two_prod(self.hi, b.hi);
        Dd::norm(p1, p2 + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::new(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Dd { hi: q1, lo: q2 } + Dd::new(q3)
    }
}

impl Real for Dd {
    fn from_f64(x: f64) -> Self {
        Dd::new(x)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        if self.hi == 0.0 {
            return Dd::ONE;
        }
        // x = k·ln2 + r, then exp(r) = (1 + expm1(r/512))^512.
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::new(k)).scale_pow2(-9);
        let mut s = r;
        let mut term = r;
        for i in 2..=16 {
            term = term * r / Dd::new(i as f64);
            s = s + term;
            if term.hi.abs() < 1e-40 {
                break;
            }
        }
        for _ in 0..9 {
            s = s * Dd::new(2.0) + s.square();
        }
        (s + Dd::ONE).scale_pow2(k as i32)
    }

    fn ln(self) -> Self {
        if !(self.hi > 0.0) {
            return Dd::new(f64::NAN);
        }
        let mut x = Dd::new(self.hi.ln());
        for _ in 0..2 {
            x = x + self * (-x).exp() - Dd::ONE;
        }
        x
    }

    fn sqrt(self) -> Self {
        if self.hi == 0.0 {
            return Dd::ZERO;
        }
        if self.hi < 0.0 {
            return Dd::new(f64::NAN);
        }
        let x = 1.0 / self.hi.sqrt();
        let ax = Dd::new(self.hi * x);
        ax + Dd::new((self - ax.square()).hi * x * 0.5)
    }

    fn tanh(self) -> Self {
        let a = Real::abs(self);
        if a.hi > 40.0 {
            return Dd::new(self.hi.signum());
        }
        // 1 − 2/(e^{2|x|} + 1), with the sign restored.
        let e = (a * Dd::new(2.0)).exp();
        let t = Dd::ONE - Dd::new(2.0) * (e + Dd::ONE).recip();
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:e} + {:e}", self.hi, self.lo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, b: Dd, tol: f64) -> bool {
        let d = (a - b).to_f64().abs();
        d <= tol * b.to_f64().abs().max(1e-300)
    }

    #[test]
    fn arithmetic_keeps_the_low_word() {
        let third = Dd::ONE / Dd::new(3.0);
        assert!(close(third * Dd::new(3.0), Dd::ONE, 1e-31));
        let x = Dd::new(1.0) + Dd::new(1e-20);
        assert_eq!(x.hi, 1.0);
        assert_eq!(x.lo, 1e-20);
        assert_eq!((x - Dd::ONE).to_f64(), 1e-20);
        let r = Dd::new(2.0).sqrt();
        assert!(close(r * r, Dd::new(2.0), 1e-31));
    }

    #[test]
    fn exp_and_ln_are_inverse() {
        for x in [-30.0, -2.5, -1e-3, 1e-7, 0.3, 1.0, 7.25, 40.0] {
            let v = Dd::new(x);
            assert!(close(v.exp().ln(), v, 1e-29), "{x}");
            assert!((Real::exp(v).to_f64() - x.exp()).abs() <= 4e-16 * x.exp(), "{x}");
        }
        // e·e⁻¹ = 1 and exp(a)·exp(b) = exp(a + b).
        assert!(close(Dd::ONE.exp() * (-Dd::ONE).exp(), Dd::ONE, 1e-30));
        let (a, b) = (Dd::new(0.7), Dd::new(-2.2));
        assert!(close(a.exp() * b.exp(), (a + b).exp(), 1e-30));
        // ln 2 against the stored constant.
        assert!(close(Dd::new(2.0).ln(), LN2, 1e-31));
    }

    #[test]
    fn tanh_matches_f64_and_is_odd() {
        for x in [-50.0, -3.0, -0.4, 1e-9, 0.2, 1.5, 12.0] {
            let v = Dd::new(x);
            assert!((Real::tanh(v).to_f64() - x.tanh()).abs() <= 1e-15, "{x}");
            assert_eq!(Real::tanh(-v), -Real::tanh(v));
        }
        // tanh(x) = (e^{2x} − 1)/(e^{2x} + 1) at a point with no cancellation.
        let v = Dd::new(0.8);
        let e = (v * Dd::new(2.0)).exp();
        assert!(close(Real::tanh(v), (e - Dd::ONE) / (e + Dd::ONE), 1e-30));
    }

    #[test]
    fn ordering_uses_both_words() {
        let a = Dd::new(1.0);
        let b = a + Dd::new(1e-25);
        assert!(b > a);
        assert_eq!(Real::max(a, b), b);
    }
}
