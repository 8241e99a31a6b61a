use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn check_flow<T: Scalar>(input: &Tensor<T>, flow: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.dims3()?;
    let (fc, fh, fw) = flow.dims3()?;
    if fc != 2 {
        return Err(Error::Shape {
            op: "bilinear_sample",
            detail: format!("flow must have 2 channels (dx, dy), got {}", fc),
        });
    }
    if (fh, fw) != (h, w) {
        return Err(Error::Shape {
            op: "bilinear_sample",
            detail: format!("flow is {}x{}, input is {}x{}", fh, fw, h, w),
        });
    }
    Ok((c, h, w))
}

/// Interpolation footprint for one output pixel: the cell corner, the
/// fractional offsets, and whether each axis is clamped at the border
/// (clamped axes contribute no flow gradient).
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    x_free: bool,
    y_free: bool,
}

fn tap(sx: f64, sy: f64, h: usize, w: usize) -> Tap {
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let x_free = sx > 0.0 && sx < max_x;
    let y_free = sy > 0.0 && sy < max_y;
    let cx = sx.clamp(0.0, max_x);
    let cy = sy.clamp(0.0, max_y);
    let x0 = cx.floor().min(max_x) as usize;
    let y0 = cy.floor().min(max_y) as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Tap { x0, x1, y0, y1, fx: cx - x0 as f64, fy: cy - y0 as f64, x_free, y_free }
}

/// Backward-warp sampling core: `out(x, y) = input(x + dx, y + dy)` with
/// bilinear interpolation. Out-of-bounds coordinates clamp to the border.
/// Flow units are pixels at the flow's own resolution; positive values sample
/// from the right/below.
pub fn bilinear_sample<T: Scalar>(input: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = check_flow(input, flow)?;
    let dx = flow.plane(0);
    let dy = flow.plane(1);
    let mut out = Tensor::zeros(&[c, h, w]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + dx[i].to_f64().unwrap();
            let sy = y as f64 + dy[i].to_f64().unwrap();
            let t = tap(sx, sy, h, w);
            let w00 = (1.0 - t.fx) * (1.0 - t.fy);
            let w10 = t.fx * (1.0 - t.fy);
            let w01 = (1.0 - t.fx) * t.fy;
            let w11 = t.fx * t.fy;
            for ch in 0..c {
                let p = input.plane(ch);
                let v = p[t.y0 * w + t.x0].to_f64().unwrap() * w00
                    + p[t.y0 * w + t.x1].to_f64().unwrap() * w10
                    + p[t.y1 * w + t.x0].to_f64().unwrap() * w01
                    + p[t.y1 * w + t.x1].to_f64().unwrap() * w11;
                out.data_mut()[(ch * h + y) * w + x] = T::from(v).unwrap();
            }
        }
    }
    Ok(out)
}

/// Gradients of `bilinear_sample` with respect to the source image and the
/// flow field. The flow gradient is the analytic in-cell derivative; it is
/// discontinuous at integer coordinates, so finite-difference fixtures keep
/// fractional parts away from the grid.
pub fn bilinear_sample_grad<T: Scalar>(
    input: &Tensor<T>,
    flow: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = check_flow(input, flow)?;
    if upstream.shape() != [c, h, w] {
        return Err(Error::Shape {
            op: "bilinear_sample_grad",
            detail: format!("upstream shape {:?} != input shape {:?}", upstream.shape(), input.shape()),
        });
    }
    let dx = flow.plane(0);
    let dy = flow.plane(1);
    let mut grad_input = Tensor::zeros(&[c, h, w]);
    let mut grad_flow = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + dx[i].to_f64().unwrap();
            let sy = y as f64 + dy[i].to_f64().unwrap();
            let t = tap(sx, sy, h, w);
            let w00 = (1.0 - t.fx) * (1.0 - t.fy);
            let w10 = t.fx * (1.0 - t.fy);
            let w01 = (1.0 - t.fx) * t.fy;
            let w11 = t.fx * t.fy;
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ch in 0..c {
                let u = upstream.data()[(ch * h + y) * w + x].to_f64().unwrap();
                if u == 0.0 {
                    continue;
                }
                let gp = grad_input.data_mut();
                let base = ch * h * w;
                gp[base + t.y0 * w + t.x0] += T::from(u * w00).unwrap();
                gp[base + t.y0 * w + t.x1] += T::from(u * w10).unwrap();
                gp[base + t.y1 * w + t.x0] += T::from(u * w01).unwrap();
                gp[base + t.y1 * w + t.x1] += T::from(u * w11).unwrap();
                let p = input.plane(ch);
                let v00 = p[t.y0 * w + t.x0].to_f64().unwrap();
                let v10 = p[t.y0 * w + t.x1].to_f64().unwrap();
                let v01 = p[t.y1 * w + t.x0].to_f64().unwrap();
                let v11 = p[t.y1 * w + t.x1].to_f64().unwrap();
                if t.x_free {
                    gx += u * ((v10 - v00) * (1.0 - t.fy) + (v11 - v01) * t.fy);
                }
                if t.y_free {
                    gy += u * ((v01 - v00) * (1.0 - t.fx) + (v11 - v10) * t.fx);
                }
            }
            grad_flow.data_mut()[i] = T::from(gx).unwrap();
            grad_flow.data_mut()[h * w + i] = T::from(gy).unwrap();
        }
    }
    Ok((grad_input, grad_flow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::{check_against_fd, seeded_tensor, shift_clamp_oracle};

    #[test]
    fn zero_flow_is_identity() {
        let img = seeded_tensor::<f64>(&[3, 5, 7], 1, 0.0, 1.0);
        let flow = Tensor::zeros(&[2, 5, 7]);
        let out = bilinear_sample(&img, &flow).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn integer_flow_matches_shift_clamp_oracle() {
        let img = seeded_tensor::<f64>(&[2, 6, 8], 9, 0.0, 1.0);
        for &(sx, sy) in &[(1i64, 0i64), (-2, 0), (0, 3), (2, -1), (7, 5), (-9, -9)] {
            let flow = Tensor::from_fn_chw(2, 6, 8, |c, _, _| if c == 0 { sx as f64 } else { sy as f64 });
            let out = bilinear_sample(&img, &flow).unwrap();
            let expect = shift_clamp_oracle(&img, sx, sy);
            assert_eq!(out.data(), expect.data(), "shift ({sx}, {sy})");
        }
    }

    #[test]
    fn constant_flow_one_right_takes_right_neighbor() {
        // Columns hold their own index; flow (1, 0) pulls the right neighbour,
        // and the last column repeats itself because of border clamping.
        let img = Tensor::<f64>::from_fn_chw(1, 2, 5, |_, _, x| x as f64);
        let flow = Tensor::from_fn_chw(2, 2, 5, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let out = bilinear_sample(&img, &flow).unwrap();
        for y in 0..2 {
            for x in 0..4 {
                assert_eq!(out.at3(0, y, x), (x + 1) as f64);
            }
            assert_eq!(out.at3(0, y, 4), 4.0);
        }
    }

    #[test]
    fn half_pixel_flow_blends_columns() {
        let img = Tensor::<f64>::from_fn_chw(1, 3, 2, |_, _, x| x as f64);
        let flow = Tensor::from_fn_chw(2, 3, 2, |c, _, _| if c == 0 { 0.5 } else { 0.0 });
        let out = bilinear_sample(&img, &flow).unwrap();
        for y in 0..3 {
            assert_eq!(out.at3(0, y, 0), 0.5);
            assert_eq!(out.at3(0, y, 1), 1.0); // clamped
        }
    }

    #[test]
    fn flow_channel_count_must_be_two() {
        let img = Tensor::<f32>::zeros(&[1, 4, 4]);
        let flow = Tensor::zeros(&[3, 4, 4]);
        assert!(bilinear_sample(&img, &flow).is_err());
    }

    #[test]
    fn zero_flow_sum_loss_grads() {
        // With zero flow and loss = sum(out), grad_input is all ones and the
        // flow gradient equals the local image difference along each axis.
        let img = seeded_tensor::<f64>(&[1, 4, 6], 17, 0.0, 1.0);
        let flow = Tensor::zeros(&[2, 4, 6]);
        let up = Tensor::full(&[1, 4, 6], 1.0);
        let (gi, gf) = bilinear_sample_grad(&img, &flow, &up).unwrap();
        assert!(gi.data().iter().all(|&v| v == 1.0));
        // interior pixels only: borders have clamped axes
        for y in 1..3 {
            for x in 1..5 {
                let fwd_x = img.at3(0, y, x + 1) - img.at3(0, y, x);
                let fwd_y = img.at3(0, y + 1, x) - img.at3(0, y, x);
                assert!((gf.at3(0, y, x) - fwd_x).abs() < 1e-12);
                assert!((gf.at3(1, y, x) - fwd_y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_image_has_zero_flow_grad() {
        let img = Tensor::<f64>::full(&[2, 5, 5], 0.37);
        let flow = seeded_tensor::<f64>(&[2, 5, 5], 5, -1.6, 1.6);
        let up = seeded_tensor::<f64>(&[2, 5, 5], 6, -1.0, 1.0);
        let (_, gf) = bilinear_sample_grad(&img, &flow, &up).unwrap();
        assert!(gf.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn grads_match_finite_differences_off_grid() {
        let img = seeded_tensor::<f64>(&[2, 6, 6], 41, 0.0, 1.0);
        // fractional parts in [0.25, 0.75], coordinates interior
        let flow = Tensor::<f64>::from_fn_chw(2, 6, 6, |c, y, x| {
            let t = ((x * 7 + y * 3 + c * 5) % 8) as f64 / 16.0; // in [0, 0.4375]
            0.25 + t + if c == 0 { 1.0 } else { 0.0 }
        });
        // keep sampled coords in-bounds: flow dx up to ~1.7 on x in 0..6 can
        // exceed the right border for x >= 4; build upstream masking border
        let up = seeded_tensor::<f64>(&[2, 6, 6], 42, -1.0, 1.0);
        let (gi, gf) = bilinear_sample_grad(&img, &flow, &up).unwrap();

        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        check_against_fd(img.data(), gi.data(), 1e-6, |d| {
            let t = Tensor::new(img.shape().to_vec(), d.to_vec()).unwrap();
            dot(&bilinear_sample(&t, &flow).unwrap(), &up)
        });
        check_against_fd(flow.data(), gf.data(), 1e-6, |d| {
            let t = Tensor::new(flow.shape().to_vec(), d.to_vec()).unwrap();
            dot(&bilinear_sample(&img, &t).unwrap(), &up)
        });
    }
}
