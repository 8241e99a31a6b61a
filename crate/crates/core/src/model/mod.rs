//! The pyramid flow-prediction network.
//!
//! A shared strided-conv encoder turns each input frame into a feature
//! pyramid. Decoding runs coarse to fine: at every level the current flow
//! estimates warp both feature maps, a 1x1 conv fuses the warped features
//! with the flows (and the optional timestep plane), one residual block of
//! the configured kind refines them, and a 3x3 head emits flow updates plus,
//! at the finest level, the blend-mask logit and the residual correction.
//! Flows double in value when upsampled to the next finer level.

mod io;

pub use io::{load_model, save_model, FORMAT_MAGIC, FORMAT_VERSION};

use crate::blocks::{self, BlockGraph, BlockKind, ParamInit};
use crate::error::{Error, Result};
use crate::tensor::{
    add, add_assign, bilinear_sample, bilinear_sample_grad, concat_channels, conv2d, conv2d_grad,
    prelu, prelu_grad, resize_bilinear, resize_bilinear_grad, scale, sc, sigmoid, sigmoid_grad,
    split_channels, tanh, tanh_grad, ConvSpec, ResizeFactor, Scalar, Tensor,
};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

/// Head output layout: two flow updates, one mask logit, three residual
/// channels.
const HEAD_CHANNELS: usize = 8;

fn default_levels() -> usize {
    3
}
fn default_channels() -> Vec<usize> {
    vec![24, 36, 54]
}
fn default_block_kinds() -> Vec<BlockKind> {
    vec![BlockKind::IfrnetResidual; 3]
}
fn default_k_max() -> u32 {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Pyramid depth; level 0 runs at full resolution, level `levels - 1` at
    /// `1 / 2^(levels-1)`.
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Feature channels per level, finest first. Divisible by 6.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// Residual block family per level, finest first.
    #[serde(default = "default_block_kinds")]
    pub block_kinds: Vec<BlockKind>,
    /// When set the model takes a timestep and can predict any horizon in a
    /// single pass.
    #[serde(default)]
    pub embed_timestep: bool,
    #[serde(default = "default_k_max")]
    pub k_max: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: default_levels(),
            channels: default_channels(),
            block_kinds: default_block_kinds(),
            embed_timestep: false,
            k_max: default_k_max(),
        }
    }
}

impl ModelConfig {
    /// Lightweight preset: double-stacked lite blocks at every level.
    pub fn fast() -> Self {
        Self { block_kinds: vec![BlockKind::ElanLiteX2; 3], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("need at least 2 pyramid levels, got {}", self.levels)));
        }
        if self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "channels list has {} entries for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.block_kinds.len() != self.levels {
            return Err(Error::Config(format!(
                "block_kinds list has {} entries for {} levels",
                self.block_kinds.len(),
                self.levels
            )));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % 6 != 0) {
            return Err(Error::Config(format!("channel counts must be divisible by 6, got {c}")));
        }
        if self.k_max < 1 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        Ok(())
    }

    /// Spatial divisibility required of input frames.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn enc_spec(&self, level: usize) -> ConvSpec {
        if level == 0 {
            ConvSpec::k3(3, self.channels[0])
        } else {
            ConvSpec::k3_s2(self.channels[level - 1], self.channels[level])
        }
    }

    fn fuse_in_channels(&self, level: usize) -> usize {
        2 * self.channels[level] + 4 + usize::from(self.embed_timestep)
    }

    fn fuse_spec(&self, level: usize) -> ConvSpec {
        ConvSpec::k1(self.fuse_in_channels(level), self.channels[level])
    }

    fn head_spec(&self, level: usize) -> ConvSpec {
        ConvSpec::k3(self.channels[level], HEAD_CHANNELS)
    }

    fn build_blocks(&self) -> Result<Vec<BlockGraph>> {
        self.channels
            .iter()
            .zip(&self.block_kinds)
            .map(|(&c, &k)| blocks::build_block(k, c))
            .collect()
    }
}

/// Per-inference output bundle: both flows point from the predicted frame
/// back to its sources.
#[derive(Clone)]
pub struct FlowOutput<T> {
    /// `F_{t+k -> t}`, 2 x H x W, pixels.
    pub flow_to_t: Tensor<T>,
    /// `F_{t+k -> t-1}`, 2 x H x W, pixels.
    pub flow_to_tm1: Tensor<T>,
    /// Blend weight in `[0, 1]`, 1 x H x W.
    pub mask: Tensor<T>,
    /// Additive correction in `[-1, 1]`, 3 x H x W.
    pub residual: Tensor<T>,
}

/// Gradients with respect to every [`FlowOutput`] field.
pub struct FlowGrads<T> {
    pub flow_to_t: Tensor<T>,
    pub flow_to_tm1: Tensor<T>,
    pub mask: Tensor<T>,
    pub residual: Tensor<T>,
}

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static FORWARD_LOG: RefCell<Vec<u64>> = const { RefCell::new(Vec::new()) };
}

/// Drains the calling thread's log of model uids, in forward-call order.
/// Test instrumentation for dispatch and causality checks.
pub fn take_forward_log() -> Vec<u64> {
    FORWARD_LOG.with(|l| std::mem::take(&mut *l.borrow_mut()))
}

/// Configuration plus named weight tensors. Immutable during inference;
/// training holds exclusive access.
pub struct Model<T> {
    config: ModelConfig,
    weights: BTreeMap<String, Tensor<T>>,
    blocks: Vec<BlockGraph>,
    uid: u64,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            weights: self.weights.clone(),
            blocks: self.blocks.clone(),
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        }
    }
}

/// Full parameter layout for a config: `(name, shape, init)` in the fixed
/// order used for seeding and validation.
fn param_layout(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>, ParamInit)>> {
    let mut out = Vec::new();
    for level in 0..config.levels {
        let spec = config.enc_spec(level);
        out.push((format!("enc{level}.w"), spec.weight_shape().to_vec(), ParamInit::ConvWeight {
            fan_in: spec.in_ch * spec.kernel * spec.kernel,
        }));
        out.push((format!("enc{level}.b"), vec![spec.out_ch], ParamInit::Zero));
        out.push((format!("enc{level}.slope"), vec![spec.out_ch], ParamInit::Slope));
    }
    for level in 0..config.levels {
        let fuse = config.fuse_spec(level);
        out.push((format!("lvl{level}.fuse.w"), fuse.weight_shape().to_vec(), ParamInit::ConvWeight {
            fan_in: fuse.in_ch,
        }));
        out.push((format!("lvl{level}.fuse.b"), vec![fuse.out_ch], ParamInit::Zero));
        out.push((format!("lvl{level}.fuse.slope"), vec![fuse.out_ch], ParamInit::Slope));
        let graph = blocks::build_block(config.block_kinds[level], config.channels[level])?;
        for p in blocks::param_specs(&graph) {
            out.push((format!("lvl{level}.block.{}", p.name), p.shape, p.init));
        }
        let head = config.head_spec(level);
        // zero-initialised heads: the untrained model emits zero flow,
        // mask 0.5 and zero residual
        out.push((format!("lvl{level}.head.w"), head.weight_shape().to_vec(), ParamInit::Zero));
        out.push((format!("lvl{level}.head.b"), vec![head.out_ch], ParamInit::Zero));
    }
    Ok(out)
}

/// Deterministically seeds a fresh model. Conv weights draw from a fan-in
/// scaled normal; output heads start at zero.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    use rand::SeedableRng;
    use rand_distr::Distribution;

    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut weights = BTreeMap::new();
    for (name, shape, init) in param_layout(config)? {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            ParamInit::ConvWeight { fan_in } => {
                let normal = rand_distr::Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).unwrap();
                (0..n).map(|_| sc(normal.sample(&mut rng))).collect()
            }
            ParamInit::Zero => vec![T::zero(); n],
            ParamInit::Slope => vec![sc(0.25); n],
        };
        weights.insert(name, Tensor::new(shape, data)?);
    }
    Model::from_parts(config.clone(), weights)
}

impl<T: Scalar> Model<T> {
    /// Assembles a model and validates the weight map against the config.
    pub fn from_parts(config: ModelConfig, weights: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config)?;
        for (name, shape, _) in &layout {
            match weights.get(name) {
                None => return Err(Error::MissingWeight(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Shape {
                        op: "model_weights",
                        detail: format!("weight `{name}` has shape {:?}, expected {:?}", t.shape(), shape),
                    });
                }
                _ => {}
            }
        }
        if weights.len() != layout.len() {
            let expected: std::collections::BTreeSet<&String> =
                layout.iter().map(|(n, _, _)| n).collect();
            let extra: Vec<&String> = weights.keys().filter(|k| !expected.contains(k)).collect();
            return Err(Error::Config(format!("unexpected weight tensors: {extra:?}")));
        }
        let blocks = config.build_blocks()?;
        Ok(Self { config, weights, blocks, uid: NEXT_UID.fetch_add(1, Ordering::Relaxed) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.weights
    }

    /// Replaces one weight tensor; the name must exist and the shape match.
    pub fn set_weight(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        match self.weights.get_mut(name) {
            None => Err(Error::MissingWeight(name.to_string())),
            Some(slot) => {
                if slot.shape() != tensor.shape() {
                    return Err(Error::Shape {
                        op: "set_weight",
                        detail: format!(
                            "weight `{name}` has shape {:?}, replacement is {:?}",
                            slot.shape(),
                            tensor.shape()
                        ),
                    });
                }
                *slot = tensor;
                Ok(())
            }
        }
    }

    /// Instance id recorded in the forward log.
    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let weights = self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        Model {
            config: self.config.clone(),
            weights,
            blocks: self.blocks.clone(),
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        }
    }

    fn check_inputs(&self, prev: &Tensor<T>, curr: &Tensor<T>, k: Option<u32>) -> Result<(usize, usize)> {
        let (pc, ph, pw) = prev.dims3()?;
        let (cc, ch, cw) = curr.dims3()?;
        if (pc, ph, pw) != (cc, ch, cw) || pc != 3 {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("frames must share a 3xHxW shape, got {:?} and {:?}", prev.shape(), curr.shape()),
            });
        }
        let d = self.config.spatial_divisor();
        if ph % d != 0 || pw % d != 0 {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("frame size {ph}x{pw} not divisible by {d} (pyramid depth {})", self.config.levels),
            });
        }
        match (self.config.embed_timestep, k) {
            (true, Some(k)) if k >= 1 && k <= self.config.k_max => Ok(()),
            (true, Some(k)) => Err(Error::KOutOfRange { k, min: 1, max: self.config.k_max }),
            (true, None) => Err(Error::Config("timestep-embedding model requires k".into())),
            (false, Some(_)) => Err(Error::Config("model has no timestep embedding; do not pass k".into())),
            (false, None) => Ok(()),
        }
        .map(|_| (ph, pw))
    }

    /// Pure single inference. Identical inputs produce bit-identical output.
    pub fn forward(&self, prev: &Tensor<T>, curr: &Tensor<T>, k: Option<u32>) -> Result<FlowOutput<T>> {
        FORWARD_LOG.with(|l| l.borrow_mut().push(self.uid));
        Ok(self.forward_cached(prev, curr, k)?.0)
    }

    pub(crate) fn forward_cached(
        &self,
        prev: &Tensor<T>,
        curr: &Tensor<T>,
        k: Option<u32>,
    ) -> Result<(FlowOutput<T>, ForwardCache<T>)> {
        self.check_inputs(prev, curr, k)?;
        let enc_prev = self.encode(prev)?;
        let enc_curr = self.encode(curr)?;
        let top = self.config.levels - 1;
        let (_, th, tw) = enc_curr.feats[top].dims3()?;

        let mut ft = Tensor::zeros(&[2, th, tw]);
        let mut ftm1 = Tensor::zeros(&[2, th, tw]);
        let mut levels: Vec<Option<LevelCache<T>>> = (0..self.config.levels).map(|_| None).collect();
        let mut mask = Tensor::zeros(&[1, 1, 1]);
        let mut residual = Tensor::zeros(&[1, 1, 1]);

        for level in (0..=top).rev() {
            let fc = &enc_curr.feats[level];
            let fp = &enc_prev.feats[level];
            let (_, lh, lw) = fc.dims3()?;
            let wc = bilinear_sample(fc, &ft)?;
            let wp = bilinear_sample(fp, &ftm1)?;
            let mut parts: Vec<&Tensor<T>> = vec![&wc, &wp, &ft, &ftm1];
            let kplane;
            if self.config.embed_timestep {
                let kv = sc::<T>(f64::from(k.unwrap()) / f64::from(self.config.k_max));
                kplane = Tensor::full(&[1, lh, lw], kv);
                parts.push(&kplane);
            }
            let x = concat_channels(&parts)?;
            let fuse_pre = conv2d(
                &x,
                &self.config.fuse_spec(level),
                self.weight(&format!("lvl{level}.fuse.w"))?,
                Some(self.weight(&format!("lvl{level}.fuse.b"))?),
            )?;
            let y = prelu(&fuse_pre, self.weight(&format!("lvl{level}.fuse.slope"))?)?;
            let (z, block_cache) =
                blocks::run_block_cached(&self.blocks[level], &y, &self.weights, &format!("lvl{level}.block."))?;
            let head = conv2d(
                &z,
                &self.config.head_spec(level),
                self.weight(&format!("lvl{level}.head.w"))?,
                Some(self.weight(&format!("lvl{level}.head.b"))?),
            )?;
            let pieces = split_channels(&head, &[2, 2, 1, 3])?;
            let ft_in = ft.clone();
            let ftm1_in = ftm1.clone();
            ft = add(&ft, &pieces[0])?;
            ftm1 = add(&ftm1, &pieces[1])?;
            if level == 0 {
                mask = sigmoid(&pieces[2]);
                residual = tanh(&pieces[3]);
            }
            levels[level] = Some(LevelCache {
                ft_in,
                ftm1_in,
                x,
                fuse_pre,
                block_cache,
                z,
                mask_act: if level == 0 { Some(mask.clone()) } else { None },
                residual_act: if level == 0 { Some(residual.clone()) } else { None },
            });
            if level > 0 {
                ft = scale(&resize_bilinear(&ft, ResizeFactor::Double)?, sc(2.0));
                ftm1 = scale(&resize_bilinear(&ftm1, ResizeFactor::Double)?, sc(2.0));
            }
        }

        let out = FlowOutput { flow_to_t: ft, flow_to_tm1: ftm1, mask, residual };
        let cache = ForwardCache {
            enc_prev,
            enc_curr,
            levels: levels.into_iter().map(Option::unwrap).collect(),
        };
        Ok((out, cache))
    }

    fn weight(&self, name: &str) -> Result<&Tensor<T>> {
        blocks::lookup(&self.weights, name)
    }

    fn encode(&self, frame: &Tensor<T>) -> Result<EncCache<T>> {
        // centre the [0,1] frame so features start zero-mean
        let centered = frame.map(|v| v - sc::<T>(0.5));
        let mut pres = Vec::with_capacity(self.config.levels);
        let mut feats = Vec::with_capacity(self.config.levels);
        for level in 0..self.config.levels {
            let input = if level == 0 { &centered } else { &feats[level - 1] };
            let pre = conv2d(
                input,
                &self.config.enc_spec(level),
                self.weight(&format!("enc{level}.w"))?,
                Some(self.weight(&format!("enc{level}.b"))?),
            )?;
            let act = prelu(&pre, self.weight(&format!("enc{level}.slope"))?)?;
            pres.push(pre);
            feats.push(act);
        }
        Ok(EncCache { centered, pres, feats })
    }

    /// Backpropagates output gradients to every weight tensor.
    pub(crate) fn backward(&self, cache: &ForwardCache<T>, out_grads: &FlowGrads<T>) -> Result<BTreeMap<String, Tensor<T>>> {
        let top = self.config.levels - 1;
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut gft = out_grads.flow_to_t.clone();
        let mut gftm1 = out_grads.flow_to_tm1.clone();
        let mut feat_grads_curr: Vec<Option<Tensor<T>>> = (0..=top).map(|_| None).collect();
        let mut feat_grads_prev: Vec<Option<Tensor<T>>> = (0..=top).map(|_| None).collect();

        for level in 0..=top {
            let lc = &cache.levels[level];
            if level > 0 {
                // invert the upsample-and-double that produced this level's
                // incoming gradient scale
                let (_, lh, lw) = lc.ft_in.dims3()?;
                gft = resize_bilinear_grad(&scale(&gft, sc(2.0)), lh, lw, ResizeFactor::Double)?;
                gftm1 = resize_bilinear_grad(&scale(&gftm1, sc(2.0)), lh, lw, ResizeFactor::Double)?;
            }
            let (_, lh, lw) = lc.ft_in.dims3()?;
            let (gmask_logit, gres_raw) = if level == 0 {
                (
                    sigmoid_grad(lc.mask_act.as_ref().unwrap(), &out_grads.mask)?,
                    tanh_grad(lc.residual_act.as_ref().unwrap(), &out_grads.residual)?,
                )
            } else {
                (Tensor::zeros(&[1, lh, lw]), Tensor::zeros(&[3, lh, lw]))
            };
            let ghead = concat_channels(&[&gft, &gftm1, &gmask_logit, &gres_raw])?;

            let head_spec = self.config.head_spec(level);
            let hg = conv2d_grad(&lc.z, &head_spec, self.weight(&format!("lvl{level}.head.w"))?, &ghead)?;
            blocks::merge_grad(&mut grads, format!("lvl{level}.head.w"), hg.weights);
            blocks::merge_grad(&mut grads, format!("lvl{level}.head.b"), hg.bias.unwrap());

            let gy = blocks::block_backward(
                &self.blocks[level],
                &lc.block_cache,
                &hg.input,
                &self.weights,
                &format!("lvl{level}.block."),
                &mut grads,
            )?;

            let slope = self.weight(&format!("lvl{level}.fuse.slope"))?;
            let (gfuse_pre, gslope) = prelu_grad(&lc.fuse_pre, slope, &gy)?;
            blocks::merge_grad(&mut grads, format!("lvl{level}.fuse.slope"), gslope);
            let fg = conv2d_grad(&lc.x, &self.config.fuse_spec(level), self.weight(&format!("lvl{level}.fuse.w"))?, &gfuse_pre)?;
            blocks::merge_grad(&mut grads, format!("lvl{level}.fuse.w"), fg.weights);
            blocks::merge_grad(&mut grads, format!("lvl{level}.fuse.b"), fg.bias.unwrap());

            let c = self.config.channels[level];
            let mut sizes = vec![c, c, 2, 2];
            if self.config.embed_timestep {
                sizes.push(1); // constant plane: gradient discarded
            }
            let gx = split_channels(&fg.input, &sizes)?;

            let (gfc, gft_warp) = bilinear_sample_grad(&cache.enc_curr.feats[level], &lc.ft_in, &gx[0])?;
            let (gfp, gftm1_warp) = bilinear_sample_grad(&cache.enc_prev.feats[level], &lc.ftm1_in, &gx[1])?;
            accumulate(&mut feat_grads_curr[level], gfc);
            accumulate(&mut feat_grads_prev[level], gfp);

            // ft_out = ft_in + head delta, and ft_in also feeds the warp and
            // the fuse input directly
            gft = add(&add(&gft, &gx[2])?, &gft_warp)?;
            gftm1 = add(&add(&gftm1, &gx[3])?, &gftm1_warp)?;
        }

        self.encoder_backward(&cache.enc_curr, feat_grads_curr, &mut grads)?;
        self.encoder_backward(&cache.enc_prev, feat_grads_prev, &mut grads)?;
        Ok(grads)
    }

    fn encoder_backward(
        &self,
        enc: &EncCache<T>,
        mut feat_grads: Vec<Option<Tensor<T>>>,
        grads: &mut BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        let top = self.config.levels - 1;
        let mut g = feat_grads[top].take().unwrap_or_else(|| Tensor::zeros(enc.feats[top].shape()));
        for level in (0..=top).rev() {
            let slope = self.weight(&format!("enc{level}.slope"))?;
            let (gpre, gslope) = prelu_grad(&enc.pres[level], slope, &g)?;
            blocks::merge_grad(grads, format!("enc{level}.slope"), gslope);
            let input = if level == 0 { &enc.centered } else { &enc.feats[level - 1] };
            let cg = conv2d_grad(input, &self.config.enc_spec(level), self.weight(&format!("enc{level}.w"))?, &gpre)?;
            blocks::merge_grad(grads, format!("enc{level}.w"), cg.weights);
            blocks::merge_grad(grads, format!("enc{level}.b"), cg.bias.unwrap());
            if level > 0 {
                g = cg.input;
                if let Some(extra) = feat_grads[level - 1].take() {
                    add_assign(&mut g, &extra)?;
                }
            }
        }
        Ok(())
    }

    /// Exact conv FLOPs of one forward pass at the given frame size, counting
    /// both frame encodings and every decoder level.
    pub fn inference_flops(&self, h: usize, w: usize) -> Ratio<u64> {
        inference_flops(&self.config, h, w)
    }
}

/// Static per-inference cost of a configuration.
pub fn inference_flops(config: &ModelConfig, h: usize, w: usize) -> Ratio<u64> {
    let mut total = Ratio::from_integer(0u64);
    // encoder runs once per input frame
    let (mut eh, mut ew) = (h, w);
    for level in 0..config.levels {
        let spec = config.enc_spec(level);
        total += Ratio::from_integer(2 * spec.flops(eh, ew));
        (eh, ew) = spec.out_size(eh, ew);
    }
    for level in 0..config.levels {
        let (lh, lw) = (h >> level, w >> level);
        total += Ratio::from_integer(config.fuse_spec(level).flops(lh, lw));
        let graph = blocks::build_block(config.block_kinds[level], config.channels[level])
            .expect("validated config");
        total += blocks::count_flops(&graph, lh, lw);
        total += Ratio::from_integer(config.head_spec(level).flops(lh, lw));
    }
    total
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => add_assign(existing, &g).expect("matching shapes"),
        None => *slot = Some(g),
    }
}

struct EncCache<T> {
    centered: Tensor<T>,
    /// conv outputs before activation, per level
    pres: Vec<Tensor<T>>,
    /// activated features, per level
    feats: Vec<Tensor<T>>,
}

struct LevelCache<T> {
    ft_in: Tensor<T>,
    ftm1_in: Tensor<T>,
    x: Tensor<T>,
    fuse_pre: Tensor<T>,
    block_cache: blocks::BlockCache<T>,
    z: Tensor<T>,
    mask_act: Option<Tensor<T>>,
    residual_act: Option<Tensor<T>>,
}

pub struct ForwardCache<T> {
    enc_prev: EncCache<T>,
    enc_curr: EncCache<T>,
    levels: Vec<LevelCache<T>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::seeded_tensor;
    use rand::Rng;
    use rand::SeedableRng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            levels: 2,
            channels: vec![6, 12],
            block_kinds: vec![BlockKind::IfrnetResidual, BlockKind::ElanLite],
            embed_timestep: false,
            k_max: 5,
        }
    }

    /// Random small perturbation of the (zero-initialised) heads so flows and
    /// mask become non-trivial.
    pub(crate) fn randomize_heads<T: Scalar>(model: &mut Model<T>, seed: u64, scale: f64) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> =
            model.weights().keys().filter(|k| k.contains(".head.")).cloned().collect();
        for name in names {
            let t = model.weights()[&name].clone();
            let data: Vec<T> =
                t.data().iter().map(|_| sc::<T>(rng.random_range(-scale..scale))).collect();
            model.set_weight(&name, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
        }
    }

    /// Heads get small random weights plus a bias offset on the flow
    /// channels, keeping every sampling coordinate well away from the
    /// integer grid where the bilinear gradient is discontinuous (central
    /// finite differences would straddle the kink there).
    pub(crate) fn prepare_gradcheck_fixture<T: Scalar>(model: &mut Model<T>, seed: u64) {
        randomize_heads(model, seed, 0.02);
        let levels = model.config().levels;
        for level in 0..levels {
            let name = format!("lvl{level}.head.b");
            let mut b = model.weights()[&name].clone();
            let offsets = [0.31, -0.27, 0.23, -0.19];
            for (i, &o) in offsets.iter().enumerate() {
                b.data_mut()[i] = sc(o / (1 << level) as f64);
            }
            model.set_weight(&name, b).unwrap();
        }
    }

    #[test]
    fn same_seed_bit_identical_weights() {
        let cfg = tiny_config();
        let a = init_model::<f32>(&cfg, 42).unwrap();
        let b = init_model::<f32>(&cfg, 42).unwrap();
        assert_eq!(a.weights().len(), b.weights().len());
        for (k, v) in a.weights() {
            assert_eq!(v, &b.weights()[k], "{k}");
        }
    }

    #[test]
    fn different_seeds_differ_somewhere() {
        let cfg = tiny_config();
        let a = init_model::<f32>(&cfg, 1).unwrap();
        let b = init_model::<f32>(&cfg, 2).unwrap();
        assert!(a.weights().iter().any(|(k, v)| v != &b.weights()[k]));
    }

    #[test]
    fn untrained_model_is_the_neutral_predictor() {
        let cfg = tiny_config();
        let m = init_model::<f32>(&cfg, 7).unwrap();
        let prev = seeded_tensor::<f32>(&[3, 8, 8], 70, 0.0, 1.0);
        let curr = seeded_tensor::<f32>(&[3, 8, 8], 71, 0.0, 1.0);
        let out = m.forward(&prev, &curr, None).unwrap();
        assert!(out.flow_to_t.data().iter().all(|&v| v == 0.0));
        assert!(out.flow_to_tm1.data().iter().all(|&v| v == 0.0));
        assert!(out.mask.data().iter().all(|&v| v == 0.5));
        assert!(out.residual.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let cfg = tiny_config();
        let mut m = init_model::<f32>(&cfg, 9).unwrap();
        randomize_heads(&mut m, 10, 0.1);
        let prev = seeded_tensor::<f32>(&[3, 8, 8], 72, 0.0, 1.0);
        let curr = seeded_tensor::<f32>(&[3, 8, 8], 73, 0.0, 1.0);
        let a = m.forward(&prev, &curr, None).unwrap();
        let b = m.forward(&prev, &curr, None).unwrap();
        assert_eq!(a.flow_to_t.data(), b.flow_to_t.data());
        assert_eq!(a.mask.data(), b.mask.data());
        assert_eq!(a.residual.data(), b.residual.data());
    }

    #[test]
    fn mask_stays_in_unit_interval() {
        let cfg = tiny_config();
        let mut m = init_model::<f32>(&cfg, 11).unwrap();
        randomize_heads(&mut m, 12, 2.0);
        for s in 0..5 {
            let prev = seeded_tensor::<f32>(&[3, 8, 8], 100 + s, 0.0, 1.0);
            let curr = seeded_tensor::<f32>(&[3, 8, 8], 200 + s, 0.0, 1.0);
            let out = m.forward(&prev, &curr, None).unwrap();
            assert!(out.mask.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(out.residual.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn k_validation() {
        let mut cfg = tiny_config();
        let prev = Tensor::<f32>::zeros(&[3, 8, 8]);
        let curr = Tensor::<f32>::zeros(&[3, 8, 8]);
        let plain = init_model::<f32>(&cfg, 1).unwrap();
        assert!(matches!(plain.forward(&prev, &curr, Some(1)), Err(Error::Config(_))));
        cfg.embed_timestep = true;
        let embed = init_model::<f32>(&cfg, 1).unwrap();
        assert!(matches!(embed.forward(&prev, &curr, None), Err(Error::Config(_))));
        assert!(matches!(
            embed.forward(&prev, &curr, Some(6)),
            Err(Error::KOutOfRange { k: 6, min: 1, max: 5 })
        ));
        assert!(embed.forward(&prev, &curr, Some(5)).is_ok());
    }

    #[test]
    fn spatial_divisibility_enforced() {
        let m = init_model::<f32>(&tiny_config(), 1).unwrap();
        let prev = Tensor::<f32>::zeros(&[3, 9, 8]);
        let curr = Tensor::<f32>::zeros(&[3, 9, 8]);
        assert!(m.forward(&prev, &curr, None).is_err());
    }

    #[test]
    fn executed_flops_match_static_count() {
        use crate::tensor::conv_flops_executed;
        for cfg in [tiny_config(), {
            let mut c = tiny_config();
            c.embed_timestep = true;
            c
        }] {
            let m = init_model::<f32>(&cfg, 3).unwrap();
            let prev = seeded_tensor::<f32>(&[3, 16, 8], 80, 0.0, 1.0);
            let curr = seeded_tensor::<f32>(&[3, 16, 8], 81, 0.0, 1.0);
            let k = cfg.embed_timestep.then_some(2);
            let before = conv_flops_executed();
            m.forward(&prev, &curr, k).unwrap();
            let executed = conv_flops_executed() - before;
            assert_eq!(Ratio::from_integer(executed), m.inference_flops(16, 8));
        }
    }

    #[test]
    fn gradients_match_finite_differences_subsampled() {
        use crate::testsupport::{check_against_fd_step, subsampled_indices};
        let cfg = tiny_config();
        let mut m = init_model::<f64>(&cfg, 21).unwrap();
        prepare_gradcheck_fixture(&mut m, 22);
        let prev = seeded_tensor::<f64>(&[3, 8, 8], 82, 0.05, 0.95);
        let curr = seeded_tensor::<f64>(&[3, 8, 8], 83, 0.05, 0.95);
        // scalar objective exercising every output field
        let probe_ft = seeded_tensor::<f64>(&[2, 8, 8], 84, -1.0, 1.0);
        let probe_ftm1 = seeded_tensor::<f64>(&[2, 8, 8], 85, -1.0, 1.0);
        let probe_m = seeded_tensor::<f64>(&[1, 8, 8], 86, -1.0, 1.0);
        let probe_r = seeded_tensor::<f64>(&[3, 8, 8], 87, -1.0, 1.0);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        let objective = |m: &Model<f64>| -> f64 {
            let o = m.forward_cached(&prev, &curr, None).unwrap().0;
            dot(&o.flow_to_t, &probe_ft)
                + dot(&o.flow_to_tm1, &probe_ftm1)
                + dot(&o.mask, &probe_m)
                + dot(&o.residual, &probe_r)
        };
        let (out, cache) = m.forward_cached(&prev, &curr, None).unwrap();
        let _ = out;
        let grads = m
            .backward(
                &cache,
                &FlowGrads {
                    flow_to_t: probe_ft.clone(),
                    flow_to_tm1: probe_ftm1.clone(),
                    mask: probe_m.clone(),
                    residual: probe_r.clone(),
                },
            )
            .unwrap();
        for (name, grad) in &grads {
            let base = m.weights()[name].clone();
            let picks = subsampled_indices(base.len(), 6, 0xF00D);
            let sub_analytic: Vec<f64> = picks.iter().map(|&i| grad.data()[i]).collect();
            let sub_x: Vec<f64> = picks.iter().map(|&i| base.data()[i]).collect();
            check_against_fd_step(&sub_x, &sub_analytic, 1e-5, 1e-6, |vals| {
                let mut probe = base.clone();
                for (&i, &v) in picks.iter().zip(vals) {
                    probe.data_mut()[i] = v;
                }
                let mut m2 = m.clone();
                m2.set_weight(name, probe).unwrap();
                objective(&m2)
            });
        }
    }

    #[test]
    fn shift_equivariance_on_interior() {
        let cfg = tiny_config();
        let mut m = init_model::<f32>(&cfg, 31).unwrap();
        randomize_heads(&mut m, 32, 0.5);
        let n = 64usize;
        let base_prev = seeded_tensor::<f32>(&[3, n, n], 90, 0.0, 1.0);
        let base_curr = seeded_tensor::<f32>(&[3, n, n], 91, 0.0, 1.0);
        let (dy, dx) = (4usize, 6usize);
        let shift = |t: &Tensor<f32>| {
            Tensor::from_fn_chw(3, n, n, |c, y, x| {
                let sy = y.saturating_sub(dy).min(n - 1);
                let sx = x.saturating_sub(dx).min(n - 1);
                t.at3(c, sy, sx)
            })
        };
        let out_a = m.forward(&base_prev, &base_curr, None).unwrap();
        let out_b = m.forward(&shift(&base_prev), &shift(&base_curr), None).unwrap();
        // compare flows on a central crop, offset by the shift; the crop
        // margin keeps the receptive field clear of the borders
        let mut max_dev = 0.0f32;
        for ch in 0..2 {
            for y in 28..36 {
                for x in 28..36 {
                    let dev = (out_b.flow_to_t.at3(ch, y + dy, x + dx) - out_a.flow_to_t.at3(ch, y, x)).abs();
                    max_dev = max_dev.max(dev);
                }
            }
        }
        assert!(max_dev < 0.5, "interior flow deviated by {max_dev} px under integer shift");
    }
}
