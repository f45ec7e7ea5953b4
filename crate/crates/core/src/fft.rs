//! Radix-2 FFTs over the trailing axes of a row-major array.
//!
//! Normalization: forward transforms are unnormalized, inverse transforms are
//! scaled by `1 / (product of transformed extents)`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

/// Precomputed twiddles and bit-reversal table for one power-of-two length.
pub struct Plan {
    n: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl Plan {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT length {n} is not a power of two");
        let twiddles = (0..n / 2)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                Complex64::new(libm::cos(a), libm::sin(a))
            })
            .collect();
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        Plan { n, twiddles, bitrev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place unnormalized transform. `inverse` flips the exponent sign only.
    pub fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n);
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * stride];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

/// Transforms the last `ndims` axes of `data` (shape `shape`) in place.
pub fn fft_last_axes(data: &mut [Complex64], shape: &[usize], ndims: usize, inverse: bool) {
    assert!(ndims <= shape.len(), "cannot transform {ndims} axes of a rank-{} array", shape.len());
    let rank = shape.len();
    let mut scratch = Vec::new();
    for axis in rank - ndims..rank {
        let n = shape[axis];
        let plan = Plan::new(n);
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        scratch.clear();
        scratch.resize(n, Complex64::new(0.0, 0.0));
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for k in 0..n {
                    scratch[k] = data[base + k * inner];
                }
                plan.run(&mut scratch, inverse);
                for k in 0..n {
                    data[base + k * inner] = scratch[k];
                }
            }
        }
    }
    if inverse {
        let count: usize = shape[rank - ndims..].iter().product();
        let s = 1.0 / count as f64;
        data.iter_mut().for_each(|z| *z *= s);
    }
}

/// Rolls each of the last `ndims` axes by half its extent (`fftshift` for
/// even extents, which is its own inverse).
pub fn roll_half<T: Copy>(data: &[T], shape: &[usize], ndims: usize) -> Vec<T> {
    let rank = shape.len();
    let mut out = data.to_vec();
    let mut src = Vec::new();
    for axis in rank - ndims..rank {
        let n = shape[axis];
        let h = n / 2;
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        src.clear();
        src.extend_from_slice(&out);
        for o in 0..outer {
            for k in 0..n {
                let dst = (k + h) % n;
                let s = o * n * inner + k * inner;
                let d = o * n * inner + dst * inner;
                out[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
    }
    out
}

/// Signed frequency of FFT bin `index` for length `n` (range `-n/2..n/2`).
pub fn signed_freq(index: usize, n: usize) -> i64 {
    if index < n / 2 {
        index as i64
    } else {
        index as i64 - n as i64
    }
}

/// Naive O(n^2) DFT, used as an independent check.
pub fn dft_naive(input: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = input.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (k, o) in out.iter_mut().enumerate() {
        for (j, x) in input.iter().enumerate() {
            let a = sign * 2.0 * PI * ((k * j) % n) as f64 / n as f64;
            *o += x * Complex64::new(libm::cos(a), libm::sin(a));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|i| Complex64::new(libm::sin(i as f64 * 0.7) + 0.1 * i as f64, libm::cos(i as f64 * 1.3)))
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        for n in [1, 2, 4, 8, 32] {
            let x = ramp(n);
            let mut y = x.clone();
            Plan::new(n).run(&mut y, false);
            let r = dft_naive(&x, false);
            for (a, b) in y.iter().zip(&r) {
                assert!((a - b).norm() < 1e-10, "n={n}");
            }
        }
    }

    #[test]
    fn inverse_roundtrip_2d() {
        let shape = [16, 16];
        let x = ramp(256);
        let mut y = x.clone();
        fft_last_axes(&mut y, &shape, 2, false);
        fft_last_axes(&mut y, &shape, 2, true);
        let err: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).norm_sqr()).sum();
        let norm: f64 = x.iter().map(|a| a.norm_sqr()).sum();
        assert!((err / norm).sqrt() < 1e-12);
    }

    #[test]
    fn roll_half_is_involution() {
        let shape = [4, 8];
        let x: Vec<usize> = (0..32).collect();
        let y = roll_half(&x, &shape, 2);
        assert_eq!(y[(2 * 8) + 4], 0);
        assert_eq!(roll_half(&y, &shape, 2), x);
    }

    #[test]
    #[should_panic(expected = "power of two")]
    fn rejects_non_power_of_two() {
        let _ = Plan::new(12);
    }
}
