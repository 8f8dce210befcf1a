//! Scalar types the graph can run on.
//!
//! `f64` is the normal path. [`Dual`] carries a tangent alongside every
//! value; running the reverse pass in dual numbers differentiates the
//! gradient itself along the seeded direction, which yields exact
//! Hessian-vector products (forward-over-reverse).

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(v: f64) -> Self;

    /// Value with a tangent; plain scalars drop the tangent.
    fn with_tangent(v: f64, t: f64) -> Self;

    /// Primal part.
    fn re(self) -> f64;

    /// Tangent part (zero for plain scalars).
    fn tangent(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    /// `c += a · b` for an `m×k` by `k×n` product with explicit
    /// (row, column) strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn with_tangent(v: f64, _t: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn tangent(self) -> f64 {
        0.0
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }

    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        c: &mut [f64],
        (rsc, csc): (isize, isize),
    ) {
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        check_extent(a.len(), m, k, (rsa, csa));
        check_extent(b.len(), k, n, (rsb, csb));
        check_extent(c.len(), m, n, (rsc, csc));
        // SAFETY: extents checked above; c does not alias a or b.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                1.0,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// First-order dual number `re + eps·ε`, `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub const fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.eps += o.eps;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        self.re -= o.re;
        self.eps -= o.eps;
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
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn with_tangent(v: f64, t: f64) -> Self {
        Dual::new(v, t)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn tangent(self) -> f64 {
        self.eps
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.eps)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.eps / (2.0 * s))
    }

    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Dual],
        sa: (isize, isize),
        b: &[Dual],
        sb: (isize, isize),
        c: &mut [Dual],
        sc: (isize, isize),
    ) {
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        let (ar, ae): (Vec<f64>, Vec<f64>) = a.iter().map(|d| (d.re, d.eps)).unzip();
        let (br, be): (Vec<f64>, Vec<f64>) = b.iter().map(|d| (d.re, d.eps)).unzip();
        let (mut cr, mut ce): (Vec<f64>, Vec<f64>) = c.iter().map(|d| (d.re, d.eps)).unzip();
        f64::gemm_acc(m, k, n, &ar, sa, &br, sb, &mut cr, sc);
        f64::gemm_acc(m, k, n, &ar, sa, &be, sb, &mut ce, sc);
        f64::gemm_acc(m, k, n, &ae, sa, &br, sb, &mut ce, sc);
        for (d, (r, e)) in c.iter_mut().zip(cr.into_iter().zip(ce)) {
            *d = Dual::new(r, e);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn f64_gemm_matches_naive_with_transposed_operand() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm_acc(m, k, n, &a, (k as isize, 1), &b, (n as isize, 1), &mut c, (n as isize, 1));
        let want = naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // bᵀ stored column-major is b read with swapped strides
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![0.0; m * n];
        f64::gemm_acc(m, k, n, &a, (k as isize, 1), &bt, (1, k as isize), &mut c2, (n as isize, 1));
        assert_eq!(c, c2);
    }

    #[test]
    fn dual_gemm_is_product_rule() {
        let (m, k, n) = (2, 3, 2);
        let a: Vec<Dual> = (0..m * k).map(|i| Dual::new(i as f64, 1.0)).collect();
        let b: Vec<Dual> = (0..k * n).map(|i| Dual::new(1.0 + i as f64, -(i as f64))).collect();
        let mut c = vec![Dual::default(); m * n];
        Dual::gemm_acc(m, k, n, &a, (k as isize, 1), &b, (n as isize, 1), &mut c, (n as isize, 1));
        for i in 0..m {
            for j in 0..n {
                let mut want = Dual::default();
                for p in 0..k {
                    want += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j].re - want.re).abs() < 1e-12);
                assert!((c[i * n + j].eps - want.eps).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dual_elementary_derivatives() {
        let x = Dual::new(0.7, 1.0);
        assert!((x.exp().eps - 0.7f64.exp()).abs() < 1e-15);
        assert!((x.ln().eps - 1.0 / 0.7).abs() < 1e-15);
        assert!((x.sqrt().eps - 0.5 / 0.7f64.sqrt()).abs() < 1e-15);
        assert!(((x / Dual::new(2.0, 0.0)).eps - 0.5).abs() < 1e-15);
    }
}
