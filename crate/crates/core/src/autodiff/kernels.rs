//! Raw numeric kernels behind the differentiable primitives.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

/// `c (+)= op(a) * op(b)` for row-major `op(a): m x k`, `op(b): k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices above hold exactly the extents the strides address.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[c, h, w]` image into `[c * 9, h * w]` patches for a 3x3
/// kernel with zero "same" padding.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let img = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &img[iy as usize * w..(iy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let ix = x as isize + kx as isize - 1;
                        *o = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into the image.
pub fn col2im(col: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let img = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for x in 0..w {
                        let ix = x as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub fn conv2d_forward(x: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let hw = d.h * d.w;
    let mut out = vec![0.0; d.batch * d.cout * hw];
    let mut col = vec![0.0; d.cin * 9 * hw];
    for b in 0..d.batch {
        im2col(&x[b * d.cin * hw..(b + 1) * d.cin * hw], d.cin, d.h, d.w, &mut col);
        let o = &mut out[b * d.cout * hw..(b + 1) * d.cout * hw];
        gemm(d.cout, d.cin * 9, hw, kernel, false, &col, false, o, false);
    }
    out
}

/// Returns `(d input, d kernel)`; either may be skipped.
pub fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    grad: &[f64],
    d: &ConvDims,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = d.h * d.w;
    let mut dx = want_input.then(|| vec![0.0; x.len()]);
    let mut dk = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut col = vec![0.0; d.cin * 9 * hw];
    let mut dcol = vec![0.0; d.cin * 9 * hw];
    for b in 0..d.batch {
        let g = &grad[b * d.cout * hw..(b + 1) * d.cout * hw];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[b * d.cin * hw..(b + 1) * d.cin * hw], d.cin, d.h, d.w, &mut col);
            gemm(d.cout, hw, d.cin * 9, g, false, &col, true, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(d.cin * 9, d.cout, hw, kernel, true, g, false, &mut dcol, false);
            col2im(&dcol, d.cin, d.h, d.w, &mut dx[b * d.cin * hw..(b + 1) * d.cin * hw]);
        }
    }
    (dx, dk)
}

/// 2x2 max pooling over the last two axes; returns values and the flat
/// input index each output came from.
pub fn maxpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[inline]
fn wrap_index(k: i64, n: usize) -> Option<usize> {
    let half = (n / 2) as i64;
    if k < -half || k >= half {
        None
    } else {
        Some(k.rem_euclid(n as i64) as usize)
    }
}

struct Corners {
    idx: [Option<usize>; 8],
    frac: [f64; 3],
}

#[inline]
fn corners(p: &[f64], n: usize) -> Corners {
    let f = [libm::floor(p[0]), libm::floor(p[1]), libm::floor(p[2])];
    let base = [f[0] as i64, f[1] as i64, f[2] as i64];
    let mut idx = [None; 8];
    for (c, slot) in idx.iter_mut().enumerate() {
        let (dx, dy, dz) = ((c & 1) as i64, ((c >> 1) & 1) as i64, ((c >> 2) & 1) as i64);
        *slot = match (wrap_index(base[0] + dx, n), wrap_index(base[1] + dy, n), wrap_index(base[2] + dz, n)) {
            (Some(x), Some(y), Some(z)) => Some((z * n + y) * n + x),
            _ => None,
        };
    }
    Corners { idx, frac: [p[0] - f[0], p[1] - f[1], p[2] - f[2]] }
}

#[inline]
fn corner_weights(fr: &[f64; 3]) -> [f64; 8] {
    let wx = [1.0 - fr[0], fr[0]];
    let wy = [1.0 - fr[1], fr[1]];
    let wz = [1.0 - fr[2], fr[2]];
    core::array::from_fn(|c| wx[c & 1] * wy[(c >> 1) & 1] * wz[(c >> 2) & 1])
}

/// Trilinear interpolation of an unshifted-FFT-layout cube of side `n`
/// (`[z][y][x]`, frequency `k` stored at `k mod n`) at `(kx, ky, kz)`
/// triples. Neighbours outside `[-n/2, n/2)` contribute zero.
pub fn gather_forward(vol: &[Complex64], n: usize, coords: &[f64]) -> Vec<Complex64> {
    coords
        .chunks_exact(3)
        .map(|p| {
            let c = corners(p, n);
            let w = corner_weights(&c.frac);
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..8 {
                if let Some(i) = c.idx[k] {
                    acc += vol[i] * w[k];
                }
            }
            acc
        })
        .collect()
}

/// Gradients of [`gather_forward`]. With `G = dL/dRe + i dL/dIm` for each
/// output, the volume receives `w * G` and each coordinate receives
/// `Re(conj(G) * d out / d coord)`.
pub fn gather_backward(
    vol: &[Complex64],
    n: usize,
    coords: &[f64],
    grad: &[Complex64],
    mut dvol: Option<&mut [Complex64]>,
    mut dcoords: Option<&mut [f64]>,
) {
    for (j, (p, g)) in coords.chunks_exact(3).zip(grad).enumerate() {
        let c = corners(p, n);
        let fr = c.frac;
        let wx = [1.0 - fr[0], fr[0]];
        let wy = [1.0 - fr[1], fr[1]];
        let wz = [1.0 - fr[2], fr[2]];
        let sgn = [-1.0, 1.0];
        let mut dp = [0.0; 3];
        for k in 0..8 {
            let Some(i) = c.idx[k] else { continue };
            let (bx, by, bz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            if let Some(dv) = dvol.as_deref_mut() {
                dv[i] += g * (wx[bx] * wy[by] * wz[bz]);
            }
            if dcoords.is_some() {
                let v = vol[i];
                let proj = g.re * v.re + g.im * v.im;
                dp[0] += proj * sgn[bx] * wy[by] * wz[bz];
                dp[1] += proj * wx[bx] * sgn[by] * wz[bz];
                dp[2] += proj * wx[bx] * wy[by] * sgn[bz];
            }
        }
        if let Some(dc) = dcoords.as_deref_mut() {
            dc[3 * j] += dp[0];
            dc[3 * j + 1] += dp[1];
            dc[3 * j + 2] += dp[2];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn gather_on_grid_points_is_exact() {
        let n = 4;
        let vol: Vec<Complex64> = (0..64).map(|i| Complex64::new(i as f64, -(i as f64))).collect();
        // (kx, ky, kz) = (-2, 1, -1) -> indices x=2, y=1, z=3
        let out = gather_forward(&vol, n, &[-2.0, 1.0, -1.0]);
        assert_eq!(out[0], vol[(3 * 4 + 1) * 4 + 2]);
        // kx = 2 is outside [-2, 2)
        assert_eq!(gather_forward(&vol, n, &[2.0, 0.0, 0.0])[0], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn gather_midpoint_averages() {
        let n = 4;
        let mut vol = vec![Complex64::new(0.0, 0.0); 64];
        vol[0] = Complex64::new(2.0, 0.0);
        vol[1] = Complex64::new(4.0, 0.0);
        let out = gather_forward(&vol, n, &[0.5, 0.0, 0.0]);
        assert!((out[0].re - 3.0).abs() < 1e-15);
    }
}
