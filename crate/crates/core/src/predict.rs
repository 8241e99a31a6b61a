//! Frame synthesis from flow outputs and the three prediction strategies:
//! recurrent rollout of a one-step model, single-pass arbitrary-horizon
//! prediction with an embedded timestep, and dispatch over per-horizon
//! specialist models.

use crate::error::{Error, Result};
use crate::model::{FlowGrads, FlowOutput, Model};
use crate::tensor::{add, bilinear_sample, bilinear_sample_grad, Scalar, Tensor};

/// The two reference frames every prediction starts from.
#[derive(Clone)]
pub struct FramePair<T> {
    pub prev: Tensor<T>,
    pub curr: Tensor<T>,
}

impl<T: Scalar> FramePair<T> {
    pub fn new(prev: Tensor<T>, curr: Tensor<T>) -> Result<Self> {
        let (pc, ph, pw) = prev.dims3()?;
        let (cc, chh, cw) = curr.dims3()?;
        if (pc, ph, pw) != (cc, chh, cw) || pc != 3 {
            return Err(Error::Shape {
                op: "frame_pair",
                detail: format!("frames must share a 3xHxW shape, got {:?} / {:?}", prev.shape(), curr.shape()),
            });
        }
        Ok(Self { prev, curr })
    }
}

/// Ordered per-horizon models `f_1 .. f_n` for independent prediction.
pub struct ModelSet<T> {
    models: Vec<Model<T>>,
}

impl<T: Scalar> ModelSet<T> {
    pub fn new(models: Vec<Model<T>>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Config("a model set needs at least one model".into()));
        }
        if let Some(m) = models.iter().find(|m| m.config().embed_timestep) {
            return Err(Error::Config(format!(
                "independent models must not embed the timestep (offending model uid {})",
                m.uid()
            )));
        }
        Ok(Self { models })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[Model<T>] {
        &self.models
    }

    pub fn get(&self, k: u32) -> Result<&Model<T>> {
        if k < 1 || k as usize > self.models.len() {
            return Err(Error::KOutOfRange { k, min: 1, max: self.models.len() as u32 });
        }
        Ok(&self.models[k as usize - 1])
    }
}

/// Applies a flow to a frame: per-channel bilinear sampling, then a clamp to
/// `[0, 1]` (a no-op for in-range frames since sampling is convex).
pub fn backward_warp<T: Scalar>(frame: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, _, _) = frame.dims3()?;
    if c != 3 {
        return Err(Error::Shape {
            op: "backward_warp",
            detail: format!("expected a 3-channel frame, got {c}"),
        });
    }
    Ok(bilinear_sample(frame, flow)?.clamp(T::zero(), T::one()))
}

/// Convex per-pixel combination `m * a + (1 - m) * b`; the single-channel
/// mask broadcasts over the three colour channels.
pub fn blend<T: Scalar>(warp_t: &Tensor<T>, warp_tm1: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = warp_t.dims3()?;
    if warp_tm1.shape() != warp_t.shape() {
        return Err(Error::Shape {
            op: "blend",
            detail: format!("warp shapes differ: {:?} vs {:?}", warp_t.shape(), warp_tm1.shape()),
        });
    }
    if mask.shape() != [1, h, w] {
        return Err(Error::Shape {
            op: "blend",
            detail: format!("mask shape {:?}, expected [1, {h}, {w}]", mask.shape()),
        });
    }
    if mask.data().iter().any(|&m| m < T::zero() || m > T::one()) {
        return Err(Error::Config("blend mask has values outside [0, 1]".into()));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    let mp = mask.plane(0);
    for ch in 0..c {
        let a = warp_t.plane(ch);
        let b = warp_tm1.plane(ch);
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for i in 0..h * w {
            dst[i] = mp[i] * a[i] + (T::one() - mp[i]) * b[i];
        }
    }
    Ok(out)
}

/// Full frame synthesis: warp both references, blend with the mask, add the
/// residual correction, clamp into frame range.
pub fn synthesize<T: Scalar>(out: &FlowOutput<T>, pair: &FramePair<T>) -> Result<Tensor<T>> {
    Ok(synthesize_cached(out, pair)?.0)
}

pub(crate) struct SynthCache<T> {
    warp_t: Tensor<T>,
    warp_tm1: Tensor<T>,
    mask: Tensor<T>,
    /// blend + residual before the final clamp
    pre_clamp: Tensor<T>,
}

pub(crate) fn synthesize_cached<T: Scalar>(
    out: &FlowOutput<T>,
    pair: &FramePair<T>,
) -> Result<(Tensor<T>, SynthCache<T>)> {
    let warp_t = backward_warp(&pair.curr, &out.flow_to_t)?;
    let warp_tm1 = backward_warp(&pair.prev, &out.flow_to_tm1)?;
    let blended = blend(&warp_t, &warp_tm1, &out.mask)?;
    let pre_clamp = add(&blended, &out.residual)?;
    let clamped = pre_clamp.clamp(T::zero(), T::one());
    let cache = SynthCache { warp_t, warp_tm1, mask: out.mask.clone(), pre_clamp };
    Ok((clamped, cache))
}

/// Gradients of `synthesize` with respect to the flow-output fields.
/// The clamp passes gradient on the closed interval `[0, 1]` and blocks it
/// strictly outside.
pub(crate) fn synthesize_backward<T: Scalar>(
    out: &FlowOutput<T>,
    pair: &FramePair<T>,
    cache: &SynthCache<T>,
    upstream: &Tensor<T>,
) -> Result<FlowGrads<T>> {
    let gated = upstream.zip_map(&cache.pre_clamp, "clamp_grad", |u, pre| {
        if pre >= T::zero() && pre <= T::one() {
            u
        } else {
            T::zero()
        }
    })?;

    let (c, h, w) = gated.dims3()?;
    let mp = cache.mask.plane(0);
    let mut g_warp_t = Tensor::zeros(&[c, h, w]);
    let mut g_warp_tm1 = Tensor::zeros(&[c, h, w]);
    let mut g_mask = Tensor::zeros(&[1, h, w]);
    for ch in 0..c {
        let g = gated.plane(ch);
        let a = cache.warp_t.plane(ch);
        let b = cache.warp_tm1.plane(ch);
        for i in 0..h * w {
            g_warp_t.data_mut()[ch * h * w + i] = g[i] * mp[i];
            g_warp_tm1.data_mut()[ch * h * w + i] = g[i] * (T::one() - mp[i]);
            g_mask.data_mut()[i] += g[i] * (a[i] - b[i]);
        }
    }

    let (_, g_flow_t) = bilinear_sample_grad(&pair.curr, &out.flow_to_t, &g_warp_t)?;
    let (_, g_flow_tm1) = bilinear_sample_grad(&pair.prev, &out.flow_to_tm1, &g_warp_tm1)?;
    Ok(FlowGrads { flow_to_t: g_flow_t, flow_to_tm1: g_flow_tm1, mask: g_mask, residual: gated })
}

/// Predicts `k` steps ahead by composing the one-step model with itself,
/// feeding each synthesized frame back as the newest input. Cost and error
/// both grow with `k`.
pub fn predict_recurrent<T: Scalar>(model: &Model<T>, pair: &FramePair<T>, k: u32) -> Result<Tensor<T>> {
    if k < 1 {
        return Err(Error::Config("recurrent prediction needs k >= 1".into()));
    }
    let mut prev = pair.prev.clone();
    let mut curr = pair.curr.clone();
    for _ in 0..k {
        let out = model.forward(&prev, &curr, None)?;
        let step = FramePair { prev, curr: curr.clone() };
        let next = synthesize(&out, &step)?;
        prev = step.curr;
        curr = next;
    }
    Ok(curr)
}

/// Predicts any horizon in one pass through a timestep-embedding model; the
/// cost is independent of `k`.
pub fn predict_arbitrary<T: Scalar>(model: &Model<T>, pair: &FramePair<T>, k: u32) -> Result<Tensor<T>> {
    let out = model.forward(&pair.prev, &pair.curr, Some(k))?;
    synthesize(&out, pair)
}

/// Dispatches to the horizon-`k` specialist; a single inference.
pub fn predict_independent<T: Scalar>(set: &ModelSet<T>, pair: &FramePair<T>, k: u32) -> Result<Tensor<T>> {
    let model = set.get(k)?;
    let out = model.forward(&pair.prev, &pair.curr, None)?;
    synthesize(&out, pair)
}
