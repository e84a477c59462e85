//! Dense numeric kernels shared by the graph ops. All loops have a fixed
//! iteration order so results are bit-reproducible; rayon is only used to
//! parallelize over independent output rows.

use rayon::prelude::*;

/// Row threshold below which matmul stays single-threaded. Spawning rayon
/// tasks for tiny matrices costs more than the work itself.
const PAR_ROWS: usize = 16;
const PAR_WORK: usize = 1 << 14;

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [f64], i: usize| {
        ci.fill(0.0);
        let ai = &a[i * k..(i + 1) * k];
        for (p, &av) in ai.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cj, &bv) in ci.iter_mut().zip(bp.iter()) {
                *cj += av * bv;
            }
        }
    };
    if m >= PAR_ROWS && m * k * n >= PAR_WORK {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}

/// c[m,n] = a[m,k] * b[n,k]^T
pub fn matmul_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [f64], i: usize| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, cj) in ci.iter_mut().enumerate() {
            let bj = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in ai.iter().zip(bj.iter()) {
                acc += av * bv;
            }
            *cj = acc;
        }
    };
    if m >= PAR_ROWS && m * k * n >= PAR_WORK {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
pub fn matmul_ta_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let ap = &a[p * m..(p + 1) * m];
        let bp = &b[p * n..(p + 1) * n];
        for (i, &av) in ap.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let ci = &mut c[i * n..(i + 1) * n];
            for (cj, &bv) in ci.iter_mut().zip(bp.iter()) {
                *cj += av * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// im2col for a single [c,h,w] image: columns[(c*kh*kw), (ho*wo)], row-major.
/// Out-of-bounds taps read zero.
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    let mut r = 0usize;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[r * ho * wo..(r + 1) * ho * wo];
                r += 1;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { xrow[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: accumulates column gradients back into image layout.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    debug_assert_eq!(dx.len(), c * h * w);
    let mut r = 0usize;
    for ci in 0..c {
        let xc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[r * ho * wo..(r + 1) * ho * wo];
                r += 1;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xrow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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
    fn matmul_matches_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.61).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut c);
        let expect = naive_matmul(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_tb_matches_naive() {
        let (m, k, n) = (4, 6, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.21).sin()).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.43).cos()).collect();
        let mut b = vec![0.0; k * n];
        transpose(&bt, n, k, &mut b);
        let mut c = vec![0.0; m * n];
        matmul_tb(&a, &bt, m, k, n, &mut c);
        let expect = naive_matmul(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (c, h, w, kh, kw, s, p) = (2, 5, 6, 3, 3, 2, 1);
        let ho = conv_out(h, kh, s, p);
        let wo = conv_out(w, kw, s, p);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.17).sin()).collect();
        let y: Vec<f64> = (0..c * kh * kw * ho * wo).map(|i| (i as f64 * 0.29).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, kh, kw, s, p, &mut cols);
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im_acc(&y, c, h, w, kh, kw, s, p, &mut dx);
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
