//! Bilinear interpolation and plane rotation primitives.
//!
//! Conventions (used consistently crate-wide):
//!
//! * A plane is `[H, W]`, indexed `(r, c)` = (row, column), row-major.
//! * Bilinear samples outside `[0, H-1] x [0, W-1]` read zeros
//!   (out-of-bounds lattice neighbors contribute nothing).
//! * Rotation by `angle` maps output pixel `p` to the source coordinate
//!   `ctr + R(-angle) (p - ctr)` with `ctr = ((H-1)/2, (W-1)/2)` and
//!   `R(t) = [[cos t, -sin t], [sin t, cos t]]` acting on `(r, c)`.
//! * Angles that are multiples of `pi/2` use exact index permutations:
//!   half turns for any plane, quarter turns when the plane is square.
//!   Composing such rotations is therefore exact, which downstream code
//!   relies on for bit-exact `C_4` equivariance and invariance checks.

use crate::scalar::Scalar;

/// Sample one bilinear value with zero padding outside the plane.
#[inline]
pub fn bilinear_one<T: Scalar>(plane: &[T], h: usize, w: usize, r: f64, c: f64) -> T {
    debug_assert_eq!(plane.len(), h * w);
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let r0 = r0 as i64;
    let c0 = c0 as i64;
    let mut acc = T::zero();
    for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
        if wr == 0.0 {
            continue;
        }
        let rr = r0 + dr;
        if rr < 0 || rr >= h as i64 {
            continue;
        }
        for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
            if wc == 0.0 {
                continue;
            }
            let cc = c0 + dc;
            if cc < 0 || cc >= w as i64 {
                continue;
            }
            acc += plane[rr as usize * w + cc as usize] * T::fromf(wr * wc);
        }
    }
    acc
}

/// Adjoint of [`bilinear_one`]: scatter `g` back onto the lattice
/// neighbors of `(r, c)` with the same weights.
#[inline]
pub fn bilinear_adjoint<T: Scalar>(grad: &mut [T], h: usize, w: usize, r: f64, c: f64, g: T) {
    debug_assert_eq!(grad.len(), h * w);
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let r0 = r0 as i64;
    let c0 = c0 as i64;
    for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
        if wr == 0.0 {
            continue;
        }
        let rr = r0 + dr;
        if rr < 0 || rr >= h as i64 {
            continue;
        }
        for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
            if wc == 0.0 {
                continue;
            }
            let cc = c0 + dc;
            if cc < 0 || cc >= w as i64 {
                continue;
            }
            grad[rr as usize * w + cc as usize] += g * T::fromf(wr * wc);
        }
    }
}

/// A resolved plane rotation: either an exact lattice permutation
/// (`Quarter(q)` = `q` quarter turns) or generic bilinear resampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlaneRot {
    Quarter(u8),
    Bilinear { cos: f64, sin: f64 },
}

/// Snap tolerance when deciding whether a raw angle is a quarter-turn
/// multiple (covers `FRAC_PI_2`-style constants that are not exact).
const QUARTER_SNAP: f64 = 1e-12;

/// Resolve a raw angle for an `h x w` plane.
pub fn resolve_rotation(angle: f64, h: usize, w: usize) -> PlaneRot {
    let turns = angle / std::f64::consts::FRAC_PI_2;
    let k = turns.round();
    if (turns - k).abs() <= QUARTER_SNAP {
        let q = (((k as i64) % 4 + 4) % 4) as u8;
        if q % 2 == 0 || h == w {
            return PlaneRot::Quarter(q);
        }
    }
    PlaneRot::Bilinear {
        cos: angle.cos(),
        sin: angle.sin(),
    }
}

/// Resolve rotation by element `k` of the cyclic group `C_n` (angle
/// `2 pi k / n`), using integer arithmetic for the exactness decision.
pub fn resolve_group_rotation(k: usize, n: usize, h: usize, w: usize) -> PlaneRot {
    let k = k % n;
    if (4 * k) % n == 0 {
        let q = ((4 * k / n) % 4) as u8;
        if q % 2 == 0 || h == w {
            return PlaneRot::Quarter(q);
        }
    }
    let angle = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
    PlaneRot::Bilinear {
        cos: angle.cos(),
        sin: angle.sin(),
    }
}

/// Source coordinate for output pixel `(r, c)` under a bilinear rotation.
#[inline]
fn source_coord(rot: (f64, f64), h: usize, w: usize, r: usize, c: usize) -> (f64, f64) {
    let (cos, sin) = rot;
    let cr = (h as f64 - 1.0) / 2.0;
    let cc = (w as f64 - 1.0) / 2.0;
    let dr = r as f64 - cr;
    let dc = c as f64 - cc;
    (cr + cos * dr + sin * dc, cc - sin * dr + cos * dc)
}

/// Rotate `src` into `dst` (both `h x w`).
pub fn rotate_plane_raw<T: Scalar>(src: &[T], dst: &mut [T], h: usize, w: usize, rot: PlaneRot) {
    debug_assert_eq!(src.len(), h * w);
    debug_assert_eq!(dst.len(), h * w);
    match rot {
        PlaneRot::Quarter(0) => dst.copy_from_slice(src),
        PlaneRot::Quarter(2) => {
            for r in 0..h {
                for c in 0..w {
                    dst[r * w + c] = src[(h - 1 - r) * w + (w - 1 - c)];
                }
            }
        }
        PlaneRot::Quarter(1) => {
            debug_assert_eq!(h, w);
            let n = h;
            for r in 0..n {
                for c in 0..n {
                    dst[r * n + c] = src[c * n + (n - 1 - r)];
                }
            }
        }
        PlaneRot::Quarter(3) => {
            debug_assert_eq!(h, w);
            let n = h;
            for r in 0..n {
                for c in 0..n {
                    dst[r * n + c] = src[(n - 1 - c) * n + r];
                }
            }
        }
        PlaneRot::Quarter(_) => unreachable!("quarter index is always normalized to 0..4"),
        PlaneRot::Bilinear { cos, sin } => {
            for r in 0..h {
                for c in 0..w {
                    let (sr, sc) = source_coord((cos, sin), h, w, r, c);
                    dst[r * w + c] = bilinear_one(src, h, w, sr, sc);
                }
            }
        }
    }
}

/// Adjoint of [`rotate_plane_raw`]: accumulate into `grad_src` the
/// transpose of the (linear) rotation applied to `grad_dst`.
pub fn rotate_plane_adjoint<T: Scalar>(
    grad_dst: &[T],
    grad_src: &mut [T],
    h: usize,
    w: usize,
    rot: PlaneRot,
) {
    debug_assert_eq!(grad_dst.len(), h * w);
    debug_assert_eq!(grad_src.len(), h * w);
    match rot {
        PlaneRot::Quarter(0) => {
            for (g, o) in grad_src.iter_mut().zip(grad_dst) {
                *g += *o;
            }
        }
        PlaneRot::Quarter(2) => {
            for r in 0..h {
                for c in 0..w {
                    grad_src[(h - 1 - r) * w + (w - 1 - c)] += grad_dst[r * w + c];
                }
            }
        }
        PlaneRot::Quarter(1) => {
            let n = h;
            for r in 0..n {
                for c in 0..n {
                    grad_src[c * n + (n - 1 - r)] += grad_dst[r * n + c];
                }
            }
        }
        PlaneRot::Quarter(3) => {
            let n = h;
            for r in 0..n {
                for c in 0..n {
                    grad_src[(n - 1 - c) * n + r] += grad_dst[r * n + c];
                }
            }
        }
        PlaneRot::Quarter(_) => unreachable!("quarter index is always normalized to 0..4"),
        PlaneRot::Bilinear { cos, sin } => {
            for r in 0..h {
                for c in 0..w {
                    let (sr, sc) = source_coord((cos, sin), h, w, r, c);
                    bilinear_adjoint(grad_src, h, w, sr, sc, grad_dst[r * w + c]);
                }
            }
        }
    }
}
