//! Lane-split reductions.
//!
//! Plain sequential float reductions cannot be vectorized (the compiler may
//! not reassociate), so the hot dot products and sums accumulate into eight
//! independent lanes combined in a fixed order. Results are deterministic
//! for a given build.

use crate::scalar::Scalar;

const LANES: usize = 8;

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::ZERO; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for k in 0..LANES {
            acc[k] += xa[k] * xb[k];
        }
    }
    let mut s = S::ZERO;
    for lane in acc {
        s += lane;
    }
    for (&x, &y) in ra.iter().zip(rb.iter()) {
        s += x * y;
    }
    s
}

pub fn sum<S: Scalar>(a: &[S]) -> S {
    let mut acc = [S::ZERO; LANES];
    let chunks = a.chunks_exact(LANES);
    let rest = chunks.remainder();
    for xa in chunks {
        for k in 0..LANES {
            acc[k] += xa[k];
        }
    }
    let mut s = S::ZERO;
    for lane in acc {
        s += lane;
    }
    for &v in rest {
        s += v;
    }
    s
}

/// out += alpha * x
pub fn axpy<S: Scalar>(alpha: S, x: &[S], out: &mut [S]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += alpha * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 0.73).cos()).collect();
        let naive: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn sum_matches_naive() {
        let a: Vec<f64> = (0..41).map(|i| (i as f64 * 0.21).sin()).collect();
        let naive: f64 = a.iter().sum();
        assert!((sum(&a) - naive).abs() < 1e-12);
    }
}
