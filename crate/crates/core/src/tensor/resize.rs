use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Supported resampling factors: exact halving and doubling, which is all the
/// pyramid code needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeFactor {
    Half,
    Double,
}

impl ResizeFactor {
    fn out_extent(self, n: usize) -> usize {
        match self {
            ResizeFactor::Half => (n / 2).max(1),
            ResizeFactor::Double => n * 2,
        }
    }
}

/// Per output index: the two source taps and the weight of the second one,
/// using the align-corners-false convention `src = (dst + 0.5) * in/out - 0.5`
/// with border clamping.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let src = (d as f64 + 0.5) * ratio - 0.5;
            let clamped = src.clamp(0.0, (n_in - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, clamped - i0 as f64)
        })
        .collect()
}

/// Bilinear resize by exactly 1/2 or 2. Halving a constant image yields the
/// same constant; halving is equivalent to 2x2 average pooling when the input
/// extents are even.
pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, factor: ResizeFactor) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = (factor.out_extent(h), factor.out_extent(w));
    let xt = axis_taps(w, ow);
    let yt = axis_taps(h, oh);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let p = input.plane(ch);
        for (oy, &(y0, y1, fy)) in yt.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                let v00 = p[y0 * w + x0].to_f64().unwrap();
                let v10 = p[y0 * w + x1].to_f64().unwrap();
                let v01 = p[y1 * w + x0].to_f64().unwrap();
                let v11 = p[y1 * w + x1].to_f64().unwrap();
                let v = v00 * (1.0 - fx) * (1.0 - fy)
                    + v10 * fx * (1.0 - fy)
                    + v01 * (1.0 - fx) * fy
                    + v11 * fx * fy;
                out.data_mut()[(ch * oh + oy) * ow + ox] = T::from(v).unwrap();
            }
        }
    }
    Ok(out)
}

/// Transpose of `resize_bilinear`: scatters the upstream gradient back onto
/// the input grid.
pub fn resize_bilinear_grad<T: Scalar>(
    upstream: &Tensor<T>,
    in_h: usize,
    in_w: usize,
    factor: ResizeFactor,
) -> Result<Tensor<T>> {
    let (c, oh, ow) = upstream.dims3()?;
    if (factor.out_extent(in_h), factor.out_extent(in_w)) != (oh, ow) {
        return Err(Error::Shape {
            op: "resize_bilinear_grad",
            detail: format!(
                "upstream {}x{} inconsistent with input {}x{} at {:?}",
                oh, ow, in_h, in_w, factor
            ),
        });
    }
    let xt = axis_taps(in_w, ow);
    let yt = axis_taps(in_h, oh);
    let mut grad = Tensor::zeros(&[c, in_h, in_w]);
    for ch in 0..c {
        let base = ch * in_h * in_w;
        for (oy, &(y0, y1, fy)) in yt.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                let u = upstream.data()[(ch * oh + oy) * ow + ox].to_f64().unwrap();
                let g = grad.data_mut();
                g[base + y0 * in_w + x0] += T::from(u * (1.0 - fx) * (1.0 - fy)).unwrap();
                g[base + y0 * in_w + x1] += T::from(u * fx * (1.0 - fy)).unwrap();
                g[base + y1 * in_w + x0] += T::from(u * (1.0 - fx) * fy).unwrap();
                g[base + y1 * in_w + x1] += T::from(u * fx * fy).unwrap();
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::{check_against_fd, reference_resize, seeded_tensor};

    #[test]
    fn half_of_constant_is_constant() {
        let img = Tensor::<f64>::full(&[2, 8, 6], 0.42);
        let out = resize_bilinear(&img, ResizeFactor::Half).unwrap();
        assert_eq!(out.shape(), &[2, 4, 3]);
        assert!(out.data().iter().all(|&v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn half_is_2x2_average_on_even_extents() {
        let img = seeded_tensor::<f64>(&[1, 4, 4], 3, 0.0, 1.0);
        let out = resize_bilinear(&img, ResizeFactor::Half).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let avg = (img.at3(0, 2 * y, 2 * x)
                    + img.at3(0, 2 * y, 2 * x + 1)
                    + img.at3(0, 2 * y + 1, 2 * x)
                    + img.at3(0, 2 * y + 1, 2 * x + 1))
                    / 4.0;
                assert!((out.at3(0, y, x) - avg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_interpolates_monotonically() {
        // [[0,1],[0,1]] doubled: each row runs 0, 0.25, 0.75, 1.
        let img = Tensor::<f64>::from_fn_chw(1, 2, 2, |_, _, x| x as f64);
        let out = resize_bilinear(&img, ResizeFactor::Double).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
        for y in 0..4 {
            let row: Vec<f64> = (0..4).map(|x| out.at3(0, y, x)).collect();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
            assert!(row.windows(2).all(|p| p[0] <= p[1]));
        }
    }

    #[test]
    fn matches_reference_resampler() {
        let img = seeded_tensor::<f64>(&[3, 6, 8], 11, 0.0, 1.0);
        for factor in [ResizeFactor::Half, ResizeFactor::Double] {
            let ours = resize_bilinear(&img, factor).unwrap();
            let reference = reference_resize(&img, factor);
            for (a, b) in ours.data().iter().zip(reference.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn down_up_roundtrip_of_ramp_stays_close() {
        // A linear ramp survives half-then-double resampling with bounded error.
        let img = Tensor::<f64>::from_fn_chw(1, 8, 8, |_, _, x| x as f64 / 7.0);
        let down = resize_bilinear(&img, ResizeFactor::Half).unwrap();
        let up = resize_bilinear(&down, ResizeFactor::Double).unwrap();
        let max_dev = img
            .data()
            .iter()
            .zip(up.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        // worst case sits at the borders where clamping flattens the ramp
        assert!(max_dev <= 0.5 / 7.0 + 1e-12, "max deviation {max_dev}");
    }

    #[test]
    fn grad_is_transpose_of_forward() {
        let img = seeded_tensor::<f64>(&[2, 4, 6], 21, -1.0, 1.0);
        for factor in [ResizeFactor::Half, ResizeFactor::Double] {
            let out = resize_bilinear(&img, factor).unwrap();
            let up = seeded_tensor::<f64>(&out.shape().to_vec(), 22, -1.0, 1.0);
            let grad = resize_bilinear_grad(&up, 4, 6, factor).unwrap();
            check_against_fd(img.data(), grad.data(), 1e-6, |d| {
                let t = Tensor::new(img.shape().to_vec(), d.to_vec()).unwrap();
                resize_bilinear(&t, factor)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(a, b)| a * b)
                    .sum()
            });
        }
    }
}
