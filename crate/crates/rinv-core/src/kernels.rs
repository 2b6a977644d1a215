//! Raw numeric kernels shared by the autodiff graph operations.
//!
//! All kernels write each output element from a single task with a fixed
//! inner accumulation order, so outputs are bitwise reproducible for any
//! thread count (see [`crate::parallel`]).

use crate::parallel::for_each_chunk_mut;
use crate::scalar::Scalar;

/// `out[m,n] = a[m,k] @ b[k,n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_chunk_mut(out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        row.fill(T::zero());
        for (p, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
}

/// `out[m,n] = a[m,k] @ b[n,k]^T`.
pub fn matmul_transb<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for_each_chunk_mut(out, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in ar.iter().zip(br) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
}

/// `out[k,n] = a[m,k]^T @ b[m,n]`.
pub fn matmul_transa<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for_each_chunk_mut(out, n, |p, row| {
        for (j, o) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for i in 0..m {
                acc += a[i * k + p] * b[i * n + j];
            }
            *o = acc;
        }
    });
}

/// Spatial size after a stride/pad convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Cross-correlation of `x[n, ci, h, w]` with `w[co, ci, kh, kw]`,
/// zero padding `pad`, stride `stride`; `out[n, co, ho, wo]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    n: usize,
    ci: usize,
    h: usize,
    wdt: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wdt, kw, stride, pad);
    debug_assert_eq!(out.len(), n * co * ho * wo);
    // One task per (sample, output channel) plane.
    for_each_chunk_mut(out, ho * wo, |idx, plane| {
        let b = idx / co;
        let oc = idx % co;
        for u in 0..ho {
            for v in 0..wo {
                let mut acc = T::zero();
                for ic in 0..ci {
                    let xp = &x[(b * ci + ic) * h * wdt..(b * ci + ic + 1) * h * wdt];
                    let wp = &w[(oc * ci + ic) * kh * kw..(oc * ci + ic + 1) * kh * kw];
                    for a in 0..kh {
                        let r = (u * stride + a) as i64 - pad as i64;
                        if r < 0 || r >= h as i64 {
                            continue;
                        }
                        for bk in 0..kw {
                            let c = (v * stride + bk) as i64 - pad as i64;
                            if c < 0 || c >= wdt as i64 {
                                continue;
                            }
                            acc += xp[r as usize * wdt + c as usize] * wp[a * kw + bk];
                        }
                    }
                }
                plane[u * wo + v] = acc;
            }
        }
    });
}

/// Gradient of [`conv2d_forward`] w.r.t. the input. Accumulates into
/// `gx` (caller provides zeros).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_x<T: Scalar>(
    go: &[T],
    w: &[T],
    n: usize,
    ci: usize,
    h: usize,
    wdt: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gx: &mut [T],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wdt, kw, stride, pad);
    debug_assert_eq!(go.len(), n * co * ho * wo);
    debug_assert_eq!(gx.len(), n * ci * h * wdt);
    // One task per (sample, input channel) plane; scatter order fixed.
    for_each_chunk_mut(gx, h * wdt, |idx, plane| {
        let b = idx / ci;
        let ic = idx % ci;
        for oc in 0..co {
            let gp = &go[(b * co + oc) * ho * wo..(b * co + oc + 1) * ho * wo];
            let wp = &w[(oc * ci + ic) * kh * kw..(oc * ci + ic + 1) * kh * kw];
            for u in 0..ho {
                for v in 0..wo {
                    let g = gp[u * wo + v];
                    if g == T::zero() {
                        continue;
                    }
                    for a in 0..kh {
                        let r = (u * stride + a) as i64 - pad as i64;
                        if r < 0 || r >= h as i64 {
                            continue;
                        }
                        for bk in 0..kw {
                            let c = (v * stride + bk) as i64 - pad as i64;
                            if c < 0 || c >= wdt as i64 {
                                continue;
                            }
                            plane[r as usize * wdt + c as usize] += g * wp[a * kw + bk];
                        }
                    }
                }
            }
        }
    });
}

/// Gradient of [`conv2d_forward`] w.r.t. the weights. Accumulates into
/// `gw` (caller provides zeros).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_w<T: Scalar>(
    go: &[T],
    x: &[T],
    n: usize,
    ci: usize,
    h: usize,
    wdt: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gw: &mut [T],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wdt, kw, stride, pad);
    debug_assert_eq!(gw.len(), co * ci * kh * kw);
    // One task per (output channel, input channel) kernel patch; the
    // batch sum runs sequentially inside it.
    for_each_chunk_mut(gw, kh * kw, |idx, patch| {
        let oc = idx / ci;
        let ic = idx % ci;
        for a in 0..kh {
            for bk in 0..kw {
                let mut acc = T::zero();
                for b in 0..n {
                    let gp = &go[(b * co + oc) * ho * wo..(b * co + oc + 1) * ho * wo];
                    let xp = &x[(b * ci + ic) * h * wdt..(b * ci + ic + 1) * h * wdt];
                    for u in 0..ho {
                        let r = (u * stride + a) as i64 - pad as i64;
                        if r < 0 || r >= h as i64 {
                            continue;
                        }
                        for v in 0..wo {
                            let c = (v * stride + bk) as i64 - pad as i64;
                            if c < 0 || c >= wdt as i64 {
                                continue;
                            }
                            acc += gp[u * wo + v] * xp[r as usize * wdt + c as usize];
                        }
                    }
                }
                patch[a * kw + bk] += acc;
            }
        }
    });
}

/// Numerically stable softmax over the last axis of a `[rows, cols]`
/// view; rows sum to one.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for_each_chunk_mut(out, cols, |i, row| {
        let xr = &x[i * cols..(i + 1) * cols];
        let mut mx = xr[0];
        for &v in xr.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in row.iter_mut().zip(xr) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in row.iter_mut() {
            *o = *o / sum;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known_product() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain_matmul() {
        use rand::Rng as _;
        let mut rng = crate::rng::rng_from_seed(5);
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut base = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut base);

        // b laid out transposed, then multiplied via matmul_transb.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut out = vec![0.0; m * n];
        matmul_transb(&a, &bt, m, k, n, &mut out);
        for (x, y) in base.iter().zip(&out) {
            assert!((x - y).abs() < 1e-12);
        }

        // a laid out transposed, then multiplied via matmul_transa.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut out2 = vec![0.0; m * n];
        // matmul_transa computes a^T @ b for a of shape [m2, k2]; here
        // we want (a^T)^T @ b = a @ b with a^T stored, so m2 = k, k2 = m.
        matmul_transa(&at, &b, k, m, n, &mut out2);
        for (x, y) in base.iter().zip(&out2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let x: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64).sin()).collect();
        // 1x1 kernels forming the identity map over 3 channels.
        let mut w = vec![0.0f64; 3 * 3];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let mut out = vec![0.0f64; x.len()];
        conv2d_forward(&x, &w, 2, 3, 4, 4, 3, 1, 1, 1, 0, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_against_scalar_reference() {
        use rand::Rng as _;
        let mut rng = crate::rng::rng_from_seed(9);
        let (n, ci, h, wd, co, k, stride, pad) = (2, 3, 5, 6, 4, 3, 2, 1);
        let x: Vec<f64> = (0..n * ci * h * wd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ho = conv_out_dim(h, k, stride, pad);
        let wo = conv_out_dim(wd, k, stride, pad);
        let mut out = vec![0.0; n * co * ho * wo];
        conv2d_forward(&x, &w, n, ci, h, wd, co, k, k, stride, pad, &mut out);

        for b in 0..n {
            for oc in 0..co {
                for u in 0..ho {
                    for v in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..ci {
                            for a in 0..k {
                                for bb in 0..k {
                                    let r = (u * stride + a) as i64 - pad as i64;
                                    let c = (v * stride + bb) as i64 - pad as i64;
                                    if r < 0 || r >= h as i64 || c < 0 || c >= wd as i64 {
                                        continue;
                                    }
                                    acc += x[((b * ci + ic) * h + r as usize) * wd + c as usize]
                                        * w[((oc * ci + ic) * k + a) * k + bb];
                                }
                            }
                        }
                        let got = out[((b * co + oc) * ho + u) * wo + v];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_uniform_on_equal_logits() {
        let x = [0.0f64, 0.0, 0.0, 5.0, 5.0, 5.0];
        let mut out = [0.0f64; 6];
        softmax_rows(&x, 2, 3, &mut out);
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}
