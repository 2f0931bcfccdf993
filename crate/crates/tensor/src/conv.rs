//! Direct convolution kernels (cross-correlation convention, stride 1).
//!
//! The 3x3 same-padding case dominates training time. It runs over a
//! zero-padded scratch plane so the nine-tap inner loop has no bounds
//! branches and vectorizes cleanly. Everything else goes through the
//! general tap-by-tap path.

use crate::scalar::Scalar;

/// out[co,y,x] = bias[co] + sum_{ci,ky,kx} w[co,ci,ky,kx] * in[ci, y+ky-p, x+kx-p]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<S: Scalar>(
    input: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[S],
    c_out: usize,
    k: usize,
    padding: usize,
    bias: &[S],
    out: &mut [S],
) {
    let h_out = h + 2 * padding - k + 1;
    let w_out = w + 2 * padding - k + 1;
    debug_assert_eq!(out.len(), c_out * h_out * w_out);

    for co in 0..c_out {
        out[co * h_out * w_out..(co + 1) * h_out * w_out].fill(bias[co]);
    }

    if k == 3 && padding == 1 {
        let mut padded = vec![S::ZERO; (h + 2) * (w + 2)];
        for ci in 0..c_in {
            pad_plane(&input[ci * h * w..(ci + 1) * h * w], h, w, &mut padded);
            for co in 0..c_out {
                let taps = &weight[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
                accumulate_3x3(&padded, w + 2, taps, &mut out[co * h * w..(co + 1) * h * w], h, w);
            }
        }
        return;
    }

    if k == 1 {
        // Pure channel mixing: one axpy per (co, ci) plane pair.
        for ci in 0..c_in {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            for co in 0..c_out {
                crate::reduce::axpy(
                    weight[co * c_in + ci],
                    plane,
                    &mut out[co * h * w..(co + 1) * h * w],
                );
            }
        }
        return;
    }

    conv2d_general(input, c_in, h, w, weight, c_out, k, padding, out, h_out, w_out);
}

/// All nine weight-gradient taps of one (input plane, output-gradient plane)
/// pair in a single pass. Named lane-split accumulators and chunked zip
/// iteration keep the loop in registers and free of bounds checks even with
/// runtime extents.
fn weight_taps_3x3<S: Scalar>(
    padded: &[S],
    pw: usize,
    gplane: &[S],
    h: usize,
    w: usize,
    gw: &mut [S],
) {
    const LANES: usize = 16;
    macro_rules! lane_fma {
        ($acc:ident, $g:expr, $s:expr) => {
            for l in 0..LANES {
                $acc[l] += $g[l] * $s[l];
            }
        };
    }
    let mut a00 = [S::ZERO; LANES];
    let mut a01 = [S::ZERO; LANES];
    let mut a02 = [S::ZERO; LANES];
    let mut a10 = [S::ZERO; LANES];
    let mut a11 = [S::ZERO; LANES];
    let mut a12 = [S::ZERO; LANES];
    let mut a20 = [S::ZERO; LANES];
    let mut a21 = [S::ZERO; LANES];
    let mut a22 = [S::ZERO; LANES];
    let mut tail = [S::ZERO; 9];
    let chunks = w / LANES;
    for y in 0..h {
        let grow = &gplane[y * w..(y + 1) * w];
        let r0 = &padded[y * pw..y * pw + w + 2];
        let r1 = &padded[(y + 1) * pw..(y + 1) * pw + w + 2];
        let r2 = &padded[(y + 2) * pw..(y + 2) * pw + w + 2];
        let it = grow
            .chunks_exact(LANES)
            .zip(r0[0..w].chunks_exact(LANES))
            .zip(r0[1..w + 1].chunks_exact(LANES))
            .zip(r0[2..w + 2].chunks_exact(LANES))
            .zip(r1[0..w].chunks_exact(LANES))
            .zip(r1[1..w + 1].chunks_exact(LANES))
            .zip(r1[2..w + 2].chunks_exact(LANES))
            .zip(r2[0..w].chunks_exact(LANES))
            .zip(r2[1..w + 1].chunks_exact(LANES))
            .zip(r2[2..w + 2].chunks_exact(LANES));
        for (((((((((gl, s00), s01), s02), s10), s11), s12), s20), s21), s22) in it {
            lane_fma!(a00, gl, s00);
            lane_fma!(a01, gl, s01);
            lane_fma!(a02, gl, s02);
            lane_fma!(a10, gl, s10);
            lane_fma!(a11, gl, s11);
            lane_fma!(a12, gl, s12);
            lane_fma!(a20, gl, s20);
            lane_fma!(a21, gl, s21);
            lane_fma!(a22, gl, s22);
        }
        for x in chunks * LANES..w {
            let gv = grow[x];
            tail[0] += gv * r0[x];
            tail[1] += gv * r0[x + 1];
            tail[2] += gv * r0[x + 2];
            tail[3] += gv * r1[x];
            tail[4] += gv * r1[x + 1];
            tail[5] += gv * r1[x + 2];
            tail[6] += gv * r2[x];
            tail[7] += gv * r2[x + 1];
            tail[8] += gv * r2[x + 2];
        }
    }
    let accs = [&a00, &a01, &a02, &a10, &a11, &a12, &a20, &a21, &a22];
    for (t, lanes) in accs.iter().enumerate() {
        let mut s = tail[t];
        for &l in lanes.iter() {
            s += l;
        }
        gw[t] += s;
    }
}

/// Copy a plane into a scratch buffer with a one-pixel zero border.
fn pad_plane<S: Scalar>(plane: &[S], h: usize, w: usize, padded: &mut [S]) {
    padded.fill(S::ZERO);
    for y in 0..h {
        padded[(y + 1) * (w + 2) + 1..(y + 1) * (w + 2) + 1 + w]
            .copy_from_slice(&plane[y * w..(y + 1) * w]);
    }
}

/// Nine-tap fused accumulation of one padded input plane into one output
/// plane. The shifted row views all share length `w` so the inner loop is
/// bounds-check free and vectorizes.
fn accumulate_3x3<S: Scalar>(
    padded: &[S],
    pw: usize,
    taps: &[S],
    out: &mut [S],
    h: usize,
    w: usize,
) {
    let (w00, w01, w02) = (taps[0], taps[1], taps[2]);
    let (w10, w11, w12) = (taps[3], taps[4], taps[5]);
    let (w20, w21, w22) = (taps[6], taps[7], taps[8]);
    for y in 0..h {
        let r0 = &padded[y * pw..y * pw + w + 2];
        let r1 = &padded[(y + 1) * pw..(y + 1) * pw + w + 2];
        let r2 = &padded[(y + 2) * pw..(y + 2) * pw + w + 2];
        let (s00, s01, s02) = (&r0[0..w], &r0[1..w + 1], &r0[2..w + 2]);
        let (s10, s11, s12) = (&r1[0..w], &r1[1..w + 1], &r1[2..w + 2]);
        let (s20, s21, s22) = (&r2[0..w], &r2[1..w + 1], &r2[2..w + 2]);
        let row = &mut out[y * w..(y + 1) * w];
        for x in 0..w {
            row[x] += s00[x] * w00
                + s01[x] * w01
                + s02[x] * w02
                + s10[x] * w10
                + s11[x] * w11
                + s12[x] * w12
                + s20[x] * w20
                + s21[x] * w21
                + s22[x] * w22;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_general<S: Scalar>(
    input: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[S],
    c_out: usize,
    k: usize,
    padding: usize,
    out: &mut [S],
    h_out: usize,
    w_out: usize,
) {
    let p = padding as isize;
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((co * c_in + ci) * k + ky) * k + kx];
                    // valid output range for this tap
                    let dy = ky as isize - p;
                    let dx = kx as isize - p;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h_out as isize)).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w_out as isize)).max(0) as usize;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let src = &input[ci * h * w + iy * w..ci * h * w + (iy + 1) * w];
                        let dst = &mut out[co * h_out * w_out + y * w_out
                            ..co * h_out * w_out + (y + 1) * w_out];
                        for x in x0..x1 {
                            let ix = (x as isize + dx) as usize;
                            dst[x] = src[ix].mul_add(wv, dst[x]);
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution input: correlate the upstream gradient
/// with the flipped kernel. `grad_in` is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input<S: Scalar>(
    grad_out: &[S],
    c_out: usize,
    h_out: usize,
    w_out: usize,
    weight: &[S],
    c_in: usize,
    k: usize,
    padding: usize,
    h: usize,
    w: usize,
    grad_in: &mut [S],
) {
    if k == 3 && padding == 1 {
        let mut padded = vec![S::ZERO; (h + 2) * (w + 2)];
        for co in 0..c_out {
            pad_plane(&grad_out[co * h * w..(co + 1) * h * w], h, w, &mut padded);
            for ci in 0..c_in {
                let t = &weight[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
                let flipped = [t[8], t[7], t[6], t[5], t[4], t[3], t[2], t[1], t[0]];
                accumulate_3x3(
                    &padded,
                    w + 2,
                    &flipped,
                    &mut grad_in[ci * h * w..(ci + 1) * h * w],
                    h,
                    w,
                );
            }
        }
        return;
    }

    if k == 1 {
        for co in 0..c_out {
            let gplane = &grad_out[co * h * w..(co + 1) * h * w];
            for ci in 0..c_in {
                crate::reduce::axpy(
                    weight[co * c_in + ci],
                    gplane,
                    &mut grad_in[ci * h * w..(ci + 1) * h * w],
                );
            }
        }
        return;
    }

    // General case: d_in[ci, iy, ix] += w[co,ci,ky,kx] * g[co, iy-ky+p, ix-kx+p]
    let p = padding as isize;
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((co * c_in + ci) * k + ky) * k + kx];
                    let dy = ky as isize - p;
                    let dx = kx as isize - p;
                    for iy in 0..h {
                        let oy = iy as isize - dy;
                        if oy < 0 || oy >= h_out as isize {
                            continue;
                        }
                        let oy = oy as usize;
                        for ix in 0..w {
                            let ox = ix as isize - dx;
                            if ox < 0 || ox >= w_out as isize {
                                continue;
                            }
                            let g = grad_out[co * h_out * w_out + oy * w_out + ox as usize];
                            grad_in[ci * h * w + iy * w + ix] =
                                g.mul_add(wv, grad_in[ci * h * w + iy * w + ix]);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients w.r.t. weight and bias. Both buffers are accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_params<S: Scalar>(
    grad_out: &[S],
    c_out: usize,
    h_out: usize,
    w_out: usize,
    input: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    padding: usize,
    grad_weight: &mut [S],
    grad_bias: &mut [S],
) {
    for co in 0..c_out {
        let gplane = &grad_out[co * h_out * w_out..(co + 1) * h_out * w_out];
        grad_bias[co] += crate::reduce::sum(gplane);
    }

    if k == 3 && padding == 1 {
        let mut padded = vec![S::ZERO; (h + 2) * (w + 2)];
        for ci in 0..c_in {
            pad_plane(&input[ci * h * w..(ci + 1) * h * w], h, w, &mut padded);
            for co in 0..c_out {
                let gplane = &grad_out[co * h * w..(co + 1) * h * w];
                let gw = &mut grad_weight[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
                weight_taps_3x3(&padded, w + 2, gplane, h, w, gw);
            }
        }
        return;
    }

    if k == 1 {
        for co in 0..c_out {
            let gplane = &grad_out[co * h * w..(co + 1) * h * w];
            for ci in 0..c_in {
                grad_weight[co * c_in + ci] +=
                    crate::reduce::dot(&input[ci * h * w..(ci + 1) * h * w], gplane);
            }
        }
        return;
    }

    let p = padding as isize;
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let dy = ky as isize - p;
                    let dx = kx as isize - p;
                    let mut acc = S::ZERO;
                    for y in 0..h_out {
                        let iy = y as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for x in 0..w_out {
                            let ix = x as isize + dx;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = input[ci * h * w + iy as usize * w + ix as usize]
                                .mul_add(grad_out[co * h_out * w_out + y * w_out + x], acc);
                        }
                    }
                    grad_weight[((co * c_in + ci) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference convolution written as the plainest possible six-loop sum.
    #[allow(clippy::too_many_arguments)]
    fn oracle_conv(
        input: &[f64],
        c_in: usize,
        h: usize,
        w: usize,
        weight: &[f64],
        c_out: usize,
        k: usize,
        padding: usize,
        bias: &[f64],
    ) -> Vec<f64> {
        let h_out = h + 2 * padding - k + 1;
        let w_out = w + 2 * padding - k + 1;
        let mut out = vec![0.0; c_out * h_out * w_out];
        for co in 0..c_out {
            for y in 0..h_out {
                for x in 0..w_out {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - padding as isize;
                                let ix = x as isize + kx as isize - padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += weight[((co * c_in + ci) * k + ky) * k + kx]
                                    * input[ci * h * w + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    out[co * h_out * w_out + y * w_out + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn fast_path_matches_oracle() {
        // pseudo-random but fixed inputs
        let mut state = 0x12345u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let (c_in, c_out, h, w) = (3, 4, 5, 7);
        let input: Vec<f64> = (0..c_in * h * w).map(|_| next()).collect();
        let weight: Vec<f64> = (0..c_out * c_in * 9).map(|_| next()).collect();
        let bias: Vec<f64> = (0..c_out).map(|_| next()).collect();
        let mut out = vec![0.0; c_out * h * w];
        conv2d_forward(&input, c_in, h, w, &weight, c_out, 3, 1, &bias, &mut out);
        let expect = oracle_conv(&input, c_in, h, w, &weight, c_out, 3, 1, &bias);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn one_by_one_matches_oracle() {
        let (c_in, c_out, h, w) = (4, 2, 3, 3);
        let input: Vec<f64> = (0..c_in * h * w).map(|i| (i as f64).sin()).collect();
        let weight: Vec<f64> = (0..c_out * c_in).map(|i| (i as f64 * 0.3).cos()).collect();
        let bias = vec![0.25, -0.5];
        let mut out = vec![0.0; c_out * h * w];
        conv2d_forward(&input, c_in, h, w, &weight, c_out, 1, 0, &bias, &mut out);
        let expect = oracle_conv(&input, c_in, h, w, &weight, c_out, 1, 0, &bias);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unpadded_3x3_matches_oracle() {
        let (c_in, c_out, h, w) = (2, 3, 6, 4);
        let input: Vec<f64> = (0..c_in * h * w).map(|i| (i as f64 * 0.17).sin()).collect();
        let weight: Vec<f64> = (0..c_out * c_in * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let bias = vec![0.0, 1.0, -1.0];
        let h_out = h - 2;
        let w_out = w - 2;
        let mut out = vec![0.0; c_out * h_out * w_out];
        conv2d_forward(&input, c_in, h, w, &weight, c_out, 3, 0, &bias, &mut out);
        let expect = oracle_conv(&input, c_in, h, w, &weight, c_out, 3, 0, &bias);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
