use super::{sc, Scalar, Tensor};
use crate::error::{Error, Result};

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, k: T) -> Tensor<T> {
    a.map(|v| v * k)
}

/// `a += b`, in place.
pub fn add_assign<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "add_assign",
            detail: format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(())
}

/// Concatenates `C x H x W` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (_, h, w) = parts
        .first()
        .ok_or(Error::Shape { op: "concat_channels", detail: "empty input list".into() })?
        .dims3()?;
    let mut total_c = 0;
    for p in parts {
        let (pc, ph, pw) = p.dims3()?;
        if (ph, pw) != (h, w) {
            return Err(Error::Shape {
                op: "concat_channels",
                detail: format!("spatial sizes differ: {}x{} vs {}x{}", ph, pw, h, w),
            });
        }
        total_c += pc;
    }
    let mut data = Vec::with_capacity(total_c * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![total_c, h, w], data)
}

/// Splits along the channel axis into pieces of the given sizes, which must
/// tile the channel count exactly.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (c, h, w) = t.dims3()?;
    let sum: usize = sizes.iter().sum();
    if sum != c {
        return Err(Error::Shape {
            op: "split_channels",
            detail: format!("split sizes {:?} sum to {}, tensor has {} channels", sizes, sum, c),
        });
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &s in sizes {
        out.push(Tensor::new(vec![s, h, w], t.data()[off * hw..(off + s) * hw].to_vec())?);
        off += s;
    }
    Ok(out)
}

/// PReLU with one learnable slope per channel: `x` if `x > 0`, else `a_c * x`.
pub fn prelu<T: Scalar>(x: &Tensor<T>, slopes: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if slopes.shape() != [c] {
        return Err(Error::Shape {
            op: "prelu",
            detail: format!("slopes shape {:?} != [{}]", slopes.shape(), c),
        });
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let a = slopes.data()[ch];
        let src = x.plane(ch);
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = if v > T::zero() { v } else { a * v };
        }
    }
    Ok(out)
}

/// Gradients of `prelu` w.r.t. the input and the per-channel slopes.
pub fn prelu_grad<T: Scalar>(
    x: &Tensor<T>,
    slopes: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = x.dims3()?;
    if upstream.shape() != x.shape() {
        return Err(Error::Shape {
            op: "prelu_grad",
            detail: format!("upstream shape {:?} != input {:?}", upstream.shape(), x.shape()),
        });
    }
    let mut gx = Tensor::zeros(&[c, h, w]);
    let mut ga = Tensor::zeros(&[c]);
    for ch in 0..c {
        let a = slopes.data()[ch];
        let mut acc = T::zero();
        let src = x.plane(ch);
        let ups = upstream.plane(ch);
        let dst = &mut gx.data_mut()[ch * h * w..(ch + 1) * h * w];
        for ((g, &v), &u) in dst.iter_mut().zip(src).zip(ups) {
            if v > T::zero() {
                *g = u;
            } else {
                *g = u * a;
                acc += u * v;
            }
        }
        ga.data_mut()[ch] = acc;
    }
    Ok((gx, ga))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| sc::<T>(1.0) / (sc::<T>(1.0) + (-v).exp()))
}

/// Sigmoid gradient expressed through the forward output: `y * (1 - y)`.
pub fn sigmoid_grad<T: Scalar>(y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.zip_map(y, "sigmoid_grad", |u, yv| u * yv * (sc::<T>(1.0) - yv))
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn tanh_grad<T: Scalar>(y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.zip_map(y, "tanh_grad", |u, yv| u * (sc::<T>(1.0) - yv * yv))
}
