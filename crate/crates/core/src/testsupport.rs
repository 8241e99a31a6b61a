//! Shared helpers for tests: seeded fixtures and independent oracles
//! (finite differences, index-shift warping, a naive reference resampler).
//! These deliberately avoid the main kernel code paths so they can falsify
//! them. Not part of the public API.

use crate::tensor::{ResizeFactor, Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform random tensor, reproducible from the seed.
pub fn seeded_tensor<T: Scalar>(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from(rng.random_range(lo..hi)).unwrap()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central finite difference of a scalar-valued function at `x`.
pub fn fd_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f(&probe);
        probe[i] = orig - step;
        let lo = f(&probe);
        probe[i] = orig;
        grad.push((hi - lo) / (2.0 * step));
    }
    grad
}

/// Asserts that an analytic gradient matches central finite differences.
/// Elements pass on relative error below `rel_tol`, with a small absolute
/// floor so exactly-zero gradients do not divide by zero.
pub fn check_against_fd(x: &[f64], analytic: &[f64], rel_tol: f64, f: impl FnMut(&[f64]) -> f64) {
    check_against_fd_step(x, analytic, rel_tol, 1e-5, f);
}

/// As [`check_against_fd`], with an explicit step. Composites containing
/// PReLU need a smaller step than isolated kernels: a perturbation shifts
/// whole pre-activation planes, and the finite difference picks up first-order
/// error from every activation within `step` of the kink at zero.
pub fn check_against_fd_step(
    x: &[f64],
    analytic: &[f64],
    rel_tol: f64,
    step: f64,
    f: impl FnMut(&[f64]) -> f64,
) {
    assert_eq!(x.len(), analytic.len());
    let numeric = fd_gradient(x, step, f);
    // rounding in the two function evaluations bounds what the finite
    // difference can resolve: eps * |f| / step
    let floor = 1e-14 / step;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        assert!(
            err <= rel_tol * scale || err <= floor,
            "gradient mismatch at element {i}: analytic {a}, finite-diff {n}, rel err {}",
            err / scale.max(1e-300)
        );
    }
}

/// Integer-shift-with-clamp warp oracle: what backward warping with a constant
/// integer flow must produce, computed by pure index arithmetic.
pub fn shift_clamp_oracle<T: Scalar>(img: &Tensor<T>, sx: i64, sy: i64) -> Tensor<T> {
    let (c, h, w) = img.dims3().unwrap();
    Tensor::from_fn_chw(c, h, w, |ch, y, x| {
        let ix = (x as i64 + sx).clamp(0, w as i64 - 1) as usize;
        let iy = (y as i64 + sy).clamp(0, h as i64 - 1) as usize;
        img.at3(ch, iy, ix)
    })
}

/// Naive reference bilinear resampler under the align-corners-false
/// convention, written independently of the production kernel.
pub fn reference_resize<T: Scalar>(img: &Tensor<T>, factor: ResizeFactor) -> Tensor<T> {
    let (c, h, w) = img.dims3().unwrap();
    let (oh, ow) = match factor {
        ResizeFactor::Half => ((h / 2).max(1), (w / 2).max(1)),
        ResizeFactor::Double => (h * 2, w * 2),
    };
    let sample = |ch: usize, sy: f64, sx: f64| -> f64 {
        let sy = sy.clamp(0.0, h as f64 - 1.0);
        let sx = sx.clamp(0.0, w as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = sy - y0 as f64;
        let fx = sx - x0 as f64;
        let v = |yy: usize, xx: usize| img.at3(ch, yy, xx).to_f64().unwrap();
        v(y0, x0) * (1.0 - fx) * (1.0 - fy)
            + v(y0, x1) * fx * (1.0 - fy)
            + v(y1, x0) * (1.0 - fx) * fy
            + v(y1, x1) * fx * fy
    };
    Tensor::from_fn_chw(c, oh, ow, |ch, oy, ox| {
        let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
        T::from(sample(ch, sy, sx)).unwrap()
    })
}

/// Deterministic subsample of indices, for spot-checking large parameter sets.
pub fn subsampled_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = (0..count).map(|_| rng.random_range(0..len)).collect();
    picked.sort_unstable();
    picked.dedup();
    picked
}
