use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::cell::Cell;

/// Shape and cost description of one 2D convolution. Padding is always "same";
/// kernels are 1x1 or 3x3 and strides 1 or 2, which is all the network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn k1(in_ch: usize, out_ch: usize) -> Self {
        Self { kernel: 1, in_ch, out_ch, stride: 1, bias: true }
    }

    pub fn k3(in_ch: usize, out_ch: usize) -> Self {
        Self { kernel: 3, in_ch, out_ch, stride: 1, bias: true }
    }

    pub fn k3_s2(in_ch: usize, out_ch: usize) -> Self {
        Self { kernel: 3, in_ch, out_ch, stride: 2, bias: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != 1 && self.kernel != 3 {
            return Err(Error::Config(format!("conv kernel must be 1 or 3, got {}", self.kernel)));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Config(format!("conv stride must be 1 or 2, got {}", self.stride)));
        }
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::Config("conv channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Same-padding output extent: `ceil(in / stride)`.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + self.stride - 1) / self.stride, (w + self.stride - 1) / self.stride)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    /// MACs for one application on an `h x w` input, with 1 MAC = 1 FLOP.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_size(h, w);
        (self.kernel * self.kernel * self.in_ch * self.out_ch * oh * ow) as u64
    }
}

thread_local! {
    static CONV_FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Cumulative conv FLOPs executed on the calling thread. Tests measure
/// per-call costs by differencing two snapshots.
pub fn conv_flops_executed() -> u64 {
    CONV_FLOPS.with(|c| c.get())
}

fn count_flops(n: u64) {
    CONV_FLOPS.with(|c| c.set(c.get().wrapping_add(n)));
}

fn check_shapes<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize)> {
    spec.validate()?;
    let (c, h, w) = input.dims3()?;
    if c != spec.in_ch {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!("input has {} channels, spec expects in_ch={}", c, spec.in_ch),
        });
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::Shape {
            op: "conv2d",
            detail: format!("weights shape {:?} != expected {:?}", weights.shape(), spec.weight_shape()),
        });
    }
    match (spec.bias, bias) {
        (true, Some(b)) if b.shape() != [spec.out_ch] => {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("bias shape {:?} != [{}]", b.shape(), spec.out_ch),
            });
        }
        (true, None) => {
            return Err(Error::Shape { op: "conv2d", detail: "spec has bias but none supplied".into() })
        }
        (false, Some(_)) => {
            return Err(Error::Shape { op: "conv2d", detail: "spec has no bias but one supplied".into() })
        }
        _ => {}
    }
    Ok((h, w))
}

/// 2D convolution with same padding. Deterministic: accumulation order is
/// fixed regardless of thread count (this function is single-threaded).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (h, w) = check_shapes(input, spec, weights, bias)?;
    let (oh, ow) = spec.out_size(h, w);
    let (k, s, pad) = (spec.kernel, spec.stride, spec.pad());
    count_flops(spec.flops(h, w));

    let mut out = Tensor::zeros(&[spec.out_ch, oh, ow]);
    if let Some(b) = bias {
        for oc in 0..spec.out_ch {
            let v = b.data()[oc];
            out.data_mut()[oc * oh * ow..(oc + 1) * oh * ow].fill(v);
        }
    }

    let wdat = weights.data();
    for oc in 0..spec.out_ch {
        for ic in 0..spec.in_ch {
            let in_plane = input.plane(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[((oc * spec.in_ch + ic) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    // Valid output ranges such that the tap lands in-bounds.
                    let (ox_lo, ox_hi) = valid_range(w, ow, s, kx, pad);
                    let (oy_lo, oy_hi) = valid_range(h, oh, s, ky, pad);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - pad;
                        let in_row = &in_plane[iy * w..iy * w + w];
                        let orow = &mut out.data_mut()[(oc * oh + oy) * ow..(oc * oh + oy + 1) * ow];
                        if s == 1 {
                            let off = ox_lo + kx - pad;
                            for (o, &iv) in orow[ox_lo..ox_hi].iter_mut().zip(&in_row[off..off + (ox_hi - ox_lo)]) {
                                *o += wv * iv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * in_row[ox * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output index range `[lo, hi)` whose input tap `o*s + k - pad` stays inside `[0, n)`.
#[inline]
fn valid_range(n: usize, n_out: usize, s: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(s) };
    let hi_incl = (n - 1 + pad).saturating_sub(k) / s;
    (lo.min(n_out), (hi_incl + 1).min(n_out))
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Analytic gradients of `conv2d` for a given upstream gradient.
pub fn conv2d_grad<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    // The bias tensor itself is not needed to compute gradients.
    let mut spec_nb = *spec;
    spec_nb.bias = false;
    let (h, w) = check_shapes(input, &spec_nb, weights, None)?;
    let (oh, ow) = spec.out_size(h, w);
    if upstream.shape() != [spec.out_ch, oh, ow] {
        return Err(Error::Shape {
            op: "conv2d_grad",
            detail: format!("upstream shape {:?} != output shape [{}, {}, {}]", upstream.shape(), spec.out_ch, oh, ow),
        });
    }
    let (k, s, pad) = (spec.kernel, spec.stride, spec.pad());

    let grad_bias = if spec.bias {
        let mut gb = Tensor::zeros(&[spec.out_ch]);
        for oc in 0..spec.out_ch {
            let mut acc = T::zero();
            for &u in upstream.plane(oc) {
                acc += u;
            }
            gb.data_mut()[oc] = acc;
        }
        Some(gb)
    } else {
        None
    };

    let mut grad_w = Tensor::zeros(&weights.shape().to_vec());
    let mut grad_in = Tensor::zeros(&[spec.in_ch, h, w]);
    let wdat = weights.data();

    for oc in 0..spec.out_ch {
        let up_plane = upstream.plane(oc);
        for ic in 0..spec.in_ch {
            let in_plane = input.plane(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let (ox_lo, ox_hi) = valid_range(w, ow, s, kx, pad);
                    let (oy_lo, oy_hi) = valid_range(h, oh, s, ky, pad);
                    let widx = ((oc * spec.in_ch + ic) * k + ky) * k + kx;
                    let wv = wdat[widx];
                    let mut wacc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - pad;
                        let in_row = &in_plane[iy * w..iy * w + w];
                        let up_row = &up_plane[oy * ow..oy * ow + ow];
                        let gin_row = &mut grad_in.data_mut()[(ic * h + iy) * w..(ic * h + iy + 1) * w];
                        if s == 1 {
                            let off = ox_lo + kx - pad; // in-bounds by valid_range
                            let up_seg = &up_row[ox_lo..ox_hi];
                            for (&u, &iv) in up_seg.iter().zip(&in_row[off..off + (ox_hi - ox_lo)]) {
                                wacc += u * iv;
                            }
                            if wv != T::zero() {
                                for (g, &u) in gin_row[off..off + (ox_hi - ox_lo)].iter_mut().zip(up_seg) {
                                    *g += wv * u;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * s + kx - pad;
                                let u = up_row[ox];
                                wacc += u * in_row[ix];
                                gin_row[ix] += wv * u;
                            }
                        }
                    }
                    grad_w.data_mut()[widx] += wacc;
                }
            }
        }
    }

    Ok(ConvGrads { input: grad_in, weights: grad_w, bias: grad_bias })
}
