//! Forward-mode dual numbers, used to get exact Jacobians of the small
//! rotation-head maps without hand-deriving them.

use core::ops::{Add, Div, Mul, Neg, Sub};

/// The arithmetic the rotation maps are written against.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        libm::sin(self)
    }
    fn cos(self) -> Self {
        libm::cos(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const K: usize> {
    pub v: f64,
    pub d: [f64; K],
}

impl<const K: usize> Dual<K> {
    pub fn seed(v: f64, slot: usize) -> Self {
        let mut d = [0.0; K];
        d[slot] = 1.0;
        Dual { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x *= dv);
        Dual { v, d }
    }
}

impl<const K: usize> Add for Dual<K> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a += b);
        Dual { v: self.v + o.v, d }
    }
}

impl<const K: usize> Sub for Dual<K> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a -= b);
        Dual { v: self.v - o.v, d }
    }
}

impl<const K: usize> Mul for Dual<K> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; K];
        for i in 0..K {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl<const K: usize> Div for Dual<K> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; K];
        for i in 0..K {
            d[i] = (self.d[i] - v * o.d[i]) * inv;
        }
        Dual { v, d }
    }
}

impl<const K: usize> Neg for Dual<K> {
    type Output = Self;
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

impl<const K: usize> Scalar for Dual<K> {
    fn cst(v: f64) -> Self {
        Dual { v, d: [0.0; K] }
    }
    fn val(&self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        self.chain(libm::sin(self.v), libm::cos(self.v))
    }
    fn cos(self) -> Self {
        self.chain(libm::cos(self.v), -libm::sin(self.v))
    }
    fn sqrt(self) -> Self {
        let s = libm::sqrt(self.v);
        self.chain(s, 0.5 / s)
    }
}

/// Jacobian `J[i][k] = d out_i / d in_k` of a map from `K` inputs to a 3x3
/// matrix (flattened row-major into 9 outputs).
pub fn matrix_jacobian<const K: usize, F>(f: F, x: [f64; K]) -> [[f64; K]; 9]
where
    F: Fn([Dual<K>; K]) -> [[Dual<K>; 3]; 3],
{
    let mut input = [Dual::<K>::cst(0.0); K];
    for k in 0..K {
        input[k] = Dual::seed(x[k], k);
    }
    let m = f(input);
    let mut j = [[0.0; K]; 9];
    for r in 0..3 {
        for c in 0..3 {
            j[3 * r + c] = m[r][c].d;
        }
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_quotient_rules() {
        let x = Dual::<2>::seed(3.0, 0);
        let y = Dual::<2>::seed(2.0, 1);
        let q = (x * y) / (x + y);
        // d/dx xy/(x+y) = y^2/(x+y)^2
        assert!((q.d[0] - 4.0 / 25.0).abs() < 1e-15);
        assert!((q.d[1] - 9.0 / 25.0).abs() < 1e-15);
    }

    #[test]
    fn transcendental_derivatives() {
        let x = Dual::<1>::seed(0.3, 0);
        assert!((x.sin().d[0] - libm::cos(0.3)).abs() < 1e-15);
        assert!((x.cos().d[0] + libm::sin(0.3)).abs() < 1e-15);
        assert!((x.sqrt().d[0] - 0.5 / libm::sqrt(0.3)).abs() < 1e-15);
    }
}
