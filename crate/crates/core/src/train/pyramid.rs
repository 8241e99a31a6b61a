//! Laplacian pyramid decomposition with exact reconstruction, and the L1
//! training loss computed over pyramid bands.

use crate::error::{Error, Result};
use crate::tensor::{add, resize_bilinear, resize_bilinear_grad, sc, sub, ResizeFactor, Scalar, Tensor};

fn check_levels<T: Scalar>(img: &Tensor<T>, levels: usize) -> Result<()> {
    let (_, h, w) = img.dims3()?;
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let d = 1usize << (levels - 1);
    if h % d != 0 || w % d != 0 {
        return Err(Error::Shape {
            op: "laplacian_pyramid",
            detail: format!("size {h}x{w} not divisible by {d} for {levels} levels"),
        });
    }
    Ok(())
}

/// Band `l` is `down_l - upsample(down_(l+1))`; the final entry is the
/// coarsest Gaussian level. Iterative upsample-and-add reconstructs the
/// original exactly (up to float rounding).
pub fn laplacian_pyramid<T: Scalar>(img: &Tensor<T>, levels: usize) -> Result<Vec<Tensor<T>>> {
    check_levels(img, levels)?;
    let mut gauss = vec![img.clone()];
    for _ in 1..levels {
        gauss.push(resize_bilinear(gauss.last().unwrap(), ResizeFactor::Half)?);
    }
    let mut bands = Vec::with_capacity(levels);
    for l in 0..levels - 1 {
        let up = resize_bilinear(&gauss[l + 1], ResizeFactor::Double)?;
        bands.push(sub(&gauss[l], &up)?);
    }
    bands.push(gauss.pop().unwrap());
    Ok(bands)
}

pub fn reconstruct<T: Scalar>(bands: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut iter = bands.iter().rev();
    let mut acc = iter
        .next()
        .ok_or(Error::Config("cannot reconstruct from an empty pyramid".into()))?
        .clone();
    for band in iter {
        acc = add(band, &resize_bilinear(&acc, ResizeFactor::Double)?)?;
    }
    Ok(acc)
}

/// L1 loss over Laplacian bands, level `l` weighted `2^l` (coarser bands
/// weigh more), each band averaged over its elements. Returns the loss and
/// its analytic gradient with respect to `pred`.
pub fn lap_l1_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, levels: usize) -> Result<(T, Tensor<T>)> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "lap_l1_loss",
            detail: format!("prediction {:?} vs target {:?}", pred.shape(), gt.shape()),
        });
    }
    let pb = laplacian_pyramid(pred, levels)?;
    let gb = laplacian_pyramid(gt, levels)?;

    let mut loss = T::zero();
    // gradient on each Gaussian level, folded fine-ward afterwards
    let mut level_grads: Vec<Tensor<T>> = Vec::with_capacity(levels);
    for l in 0..levels {
        let weight = sc::<T>(f64::from(1u32 << l));
        let n = sc::<T>(pb[l].len() as f64);
        let mut grad = Tensor::zeros(pb[l].shape());
        let mut acc = T::zero();
        for (i, (&p, &g)) in pb[l].iter().zip(gb[l].iter()).enumerate() {
            let d = p - g;
            acc += d.abs();
            grad.data_mut()[i] = if d > T::zero() {
                weight / n
            } else if d < T::zero() {
                -weight / n
            } else {
                T::zero()
            };
        }
        loss += weight * acc / n;
        level_grads.push(grad);
    }

    // band l = gauss_l - up(gauss_{l+1}): each band gradient lands on its own
    // level and, negated through the upsample transpose, on the next coarser
    // one; the running total then folds finewards through the downsamples
    let mut gauss_grads = level_grads;
    for l in (0..levels - 1).rev() {
        let (_, bh, bw) = gauss_grads[l].dims3()?;
        let up_t = resize_bilinear_grad(&gauss_grads[l], bh / 2, bw / 2, ResizeFactor::Double)?;
        gauss_grads[l + 1] = sub(&gauss_grads[l + 1], &up_t)?;
        let folded = resize_bilinear_grad(&gauss_grads[l + 1], bh, bw, ResizeFactor::Half)?;
        gauss_grads[l] = add(&gauss_grads[l], &folded)?;
    }
    let grad = gauss_grads.swap_remove(0);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::{check_against_fd, seeded_tensor};

    #[test]
    fn perfect_reconstruction() {
        for levels in 1..=4 {
            let img = seeded_tensor::<f64>(&[3, 64, 64], 5, 0.0, 1.0);
            let bands = laplacian_pyramid(&img, levels).unwrap();
            assert_eq!(bands.len(), levels);
            let back = reconstruct(&bands).unwrap();
            let max_dev = img
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_dev < 1e-6, "levels={levels} max dev {max_dev}");
        }
    }

    #[test]
    fn constant_image_concentrates_in_coarsest_band() {
        let img = Tensor::<f64>::full(&[1, 16, 16], 0.7);
        let bands = laplacian_pyramid(&img, 3).unwrap();
        for b in &bands[..2] {
            assert!(b.data().iter().all(|&v| v.abs() < 1e-12));
        }
        assert!(bands[2].data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn single_level_is_the_image_itself() {
        let img = seeded_tensor::<f64>(&[3, 8, 8], 6, 0.0, 1.0);
        let bands = laplacian_pyramid(&img, 1).unwrap();
        assert_eq!(bands.len(), 1);
        assert_eq!(bands[0].data(), img.data());
    }

    #[test]
    fn divisibility_is_enforced() {
        let img = Tensor::<f64>::zeros(&[1, 12, 12]);
        assert!(laplacian_pyramid(&img, 4).is_err());
        assert!(laplacian_pyramid(&img, 3).is_ok());
    }

    #[test]
    fn loss_zero_at_identity_and_symmetric() {
        let a = seeded_tensor::<f64>(&[3, 16, 16], 7, 0.0, 1.0);
        let b = seeded_tensor::<f64>(&[3, 16, 16], 8, 0.0, 1.0);
        let (zero, grad) = lap_l1_loss(&a, &a, 3).unwrap();
        assert_eq!(zero, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));
        let (ab, _) = lap_l1_loss(&a, &b, 3).unwrap();
        let (ba, _) = lap_l1_loss(&b, &a, 3).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn loss_grad_matches_fd() {
        // random offsets keep band differences away from the |.| kink
        let pred = seeded_tensor::<f64>(&[1, 8, 8], 9, 0.0, 1.0);
        let gt = seeded_tensor::<f64>(&[1, 8, 8], 10, 2.0, 3.0);
        for levels in [1usize, 2, 3] {
            let (_, grad) = lap_l1_loss(&pred, &gt, levels).unwrap();
            check_against_fd(pred.data(), grad.data(), 1e-5, |d| {
                let t = Tensor::new(pred.shape().to_vec(), d.to_vec()).unwrap();
                lap_l1_loss(&t, &gt, levels).unwrap().0
            });
        }
    }
}
