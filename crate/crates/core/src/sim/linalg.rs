use std::ops::{Add, Div, Mul, Neg, Sub};

use num_complex::Complex64;

pub(crate) trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn zero() -> Self;
    fn modulus(self) -> f64;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
}

/// Dense square matrix, row-major.
#[derive(Debug, Clone)]
pub(crate) struct Matrix<T> {
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![T::zero(); n * n],
        }
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: T) {
        let i = r * self.n + c;
        self.data[i] = self.data[i] + v;
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.n + c]
    }
}

/// Column at which elimination found no usable pivot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Singular(pub usize);

/// Solve `a x = b` in place by LU with partial pivoting; `b` becomes `x`.
/// A pivot smaller than 1e-14 of the largest original entry in its column
/// counts as singular.
pub(crate) fn solve<T: Scalar>(mut a: Matrix<T>, b: &mut [T]) -> Result<(), Singular> {
    let n = a.n;
    let col_scale: Vec<f64> = (0..n)
        .map(|c| (0..n).map(|r| a.get(r, c).modulus()).fold(0.0, f64::max))
        .collect();
    for k in 0..n {
        let (mut p, mut best) = (k, a.get(k, k).modulus());
        for r in k + 1..n {
            let m = a.get(r, k).modulus();
            if m > best {
                p = r;
                best = m;
            }
        }
        if !(best > 1e-14 * col_scale[k]) || !best.is_finite() {
            return Err(Singular(k));
        }
        if p != k {
            for c in 0..n {
                a.data.swap(k * n + c, p * n + c);
            }
            b.swap(k, p);
        }
        let pivot = a.get(k, k);
        for r in k + 1..n {
            let f = a.get(r, k) / pivot;
            if f.modulus() == 0.0 {
                continue;
            }
            for c in k + 1..n {
                let v = a.get(k, c);
                a.data[r * n + c] = a.data[r * n + c] - f * v;
            }
            b[r] = b[r] - f * b[k];
        }
    }
    for k in (0..n).rev() {
        let mut s = b[k];
        for c in k + 1..n {
            s = s - a.get(k, c) * b[c];
        }
        b[k] = s / a.get(k, k);
    }
    Ok(())
}
