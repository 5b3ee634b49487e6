//! Kernel prediction network and the translate operation.
//!
//! The network is a small encoder–decoder with skip connections. Its last
//! layer is a 1×1 projection to `k²` channels (`k²·C` with per-channel
//! kernels) and has no output nonlinearity, so the predicted taps are free in
//! sign and magnitude. The image itself never passes through the
//! encoder–decoder: translation is a single pixel-wise filtering of the input
//! with the predicted kernels, which keeps fine structure intact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{digest, Archive};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::filter::{apply_pixelwise_filter, filter_gradients};
use crate::imaging::{clamp_to_unit, Image, KernelField, PaddingPolicy};
use crate::nn::{
    avg_pool2, avg_pool2_backward, concat, leaky_relu, leaky_relu_backward, split, upsample2,
    upsample2_backward, Conv, Tensor,
};
use crate::rng::stream;

pub const CHECKPOINT_KIND: &str = "kpn";

/// Scale of the head's random weights relative to He initialization. Small
/// enough that fresh models predict close to a centre impulse.
const HEAD_INIT_GAIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KpnConfig {
    /// Kernel side length (odd).
    pub k: usize,
    pub base_channels: usize,
    /// Number of 2× downsampling levels.
    pub depth: usize,
    pub per_channel_kernels: bool,
    /// Image channels the model accepts.
    pub channels: usize,
    pub seed: u64,
}

impl Default for KpnConfig {
    fn default() -> Self {
        Self {
            k: 5,
            base_channels: 32,
            depth: 3,
            per_channel_kernels: false,
            channels: 3,
            seed: 0,
        }
    }
}

impl KpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::Config(format!("k must be odd and positive, got {}", self.k)));
        }
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("depth and base_channels must be at least 1".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        if self.per_channel_kernels {
            self.channels
        } else {
            1
        }
    }

    /// Channels of the prediction head.
    pub fn output_channels(&self) -> usize {
        self.groups() * self.k * self.k
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    stem: Conv,
    down: Vec<Conv>,
    up: Vec<Conv>,
    head: Conv,
}

impl Layers {
    fn build(cfg: &KpnConfig) -> (Self, usize) {
        let mut off = 0;
        let stem = Conv::alloc(cfg.channels, cfg.width_at(0), 3, &mut off);
        let down = (1..=cfg.depth)
            .map(|l| Conv::alloc(cfg.width_at(l - 1), cfg.width_at(l), 3, &mut off))
            .collect();
        let up = (1..=cfg.depth)
            .map(|l| Conv::alloc(cfg.width_at(l) + cfg.width_at(l - 1), cfg.width_at(l - 1), 3, &mut off))
            .collect();
        let head = Conv::alloc(cfg.width_at(0), cfg.output_channels(), 1, &mut off);
        (Self { stem, down, up, head }, off)
    }

    fn all(&self) -> impl Iterator<Item = &Conv> {
        std::iter::once(&self.stem)
            .chain(&self.down)
            .chain(&self.up)
            .chain(std::iter::once(&self.head))
    }
}

/// Intermediate values kept by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct KpnTrace {
    height: usize,
    width: usize,
    input: Tensor,
    stem_pre: Tensor,
    down_in: Vec<Tensor>,
    down_pre: Vec<Tensor>,
    up_in: Vec<Tensor>,
    up_pre: Vec<Tensor>,
    head_in: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KpnModel {
    config: KpnConfig,
    layers: Layers,
    params: Vec<f64>,
    init_kernel_bound: f64,
}

impl KpnModel {
    /// Randomly initialized model whose mean kernel is a centre impulse.
    pub fn new(config: KpnConfig) -> Result<Self> {
        config.validate()?;
        let (layers, n) = Layers::build(&config);
        let mut params = vec![0.0; n];
        let mut rng = stream(config.seed);
        for conv in layers.all() {
            let gain = if *conv == layers.head { HEAD_INIT_GAIN } else { 1.0 };
            conv.init(&mut params, gain, &mut rng);
        }
        let centre = (config.k / 2) * config.k + config.k / 2;
        for g in 0..config.groups() {
            params[layers.head.b_off + g * config.k * config.k + centre] = 1.0;
        }
        let mut model = Self {
            config,
            layers,
            params,
            init_kernel_bound: 0.0,
        };
        model.init_kernel_bound = model.kernel_bound();
        Ok(model)
    }

    /// A model that predicts `kernel` (row-major `k×k`) at every pixel of
    /// every input, for every group.
    pub fn with_constant_kernels(config: KpnConfig, kernel: &[f64]) -> Result<Self> {
        let mut model = Self::new(config)?;
        let kk = model.config.k * model.config.k;
        if kernel.len() != kk {
            return Err(shape_err!("expected {kk} taps, got {}", kernel.len()));
        }
        let head = model.layers.head;
        model.params[head.w_off..head.w_off + head.n_weights()].fill(0.0);
        for g in 0..model.config.groups() {
            model.params[head.b_off + g * kk..head.b_off + (g + 1) * kk].copy_from_slice(kernel);
        }
        model.init_kernel_bound = model.kernel_bound();
        Ok(model)
    }

    /// A model frozen to the identity translation.
    pub fn identity(config: KpnConfig) -> Result<Self> {
        let k = config.k;
        let mut kernel = vec![0.0; k * k];
        kernel[(k / 2) * k + k / 2] = 1.0;
        Self::with_constant_kernels(config, &kernel)
    }

    pub fn config(&self) -> &KpnConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn digest(&self) -> String {
        digest(&self.params)
    }

    /// Bound `B` on `|tap|` recorded right after initialization.
    pub fn init_kernel_bound(&self) -> f64 {
        self.init_kernel_bound
    }

    /// Rigorous bound on `|tap|` for any input with values in `[0, 1]`,
    /// propagated layer by layer through the current parameters.
    pub fn kernel_bound(&self) -> f64 {
        let p = &self.params;
        let l = &self.layers;
        // Leaky ReLU, pooling and nearest upsampling never increase max |x|.
        let mut skips = vec![l.stem.output_bound(p, 1.0)];
        for conv in &l.down {
            let b = conv.output_bound(p, *skips.last().expect("nonempty"));
            skips.push(b);
        }
        let mut x = *skips.last().expect("nonempty");
        for (lvl, conv) in l.up.iter().enumerate().rev() {
            x = conv.output_bound(p, x.max(skips[lvl]));
        }
        l.head.output_bound(p, x)
    }

    fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let m = 1usize << self.config.depth;
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.channels() != self.config.channels {
            return Err(arg_err!(
                "model expects {} channels, image has {}",
                self.config.channels,
                image.channels()
            ));
        }
        Ok(())
    }

    /// Forward pass that also returns the trace needed by [`Self::backward`].
    pub fn forward_trace(&self, image: &Image) -> Result<(KernelField, KpnTrace)> {
        self.check_input(image)?;
        let p = &self.params;
        let l = &self.layers;
        let (h, w) = (image.height(), image.width());
        let (hp, wp) = self.padded_dims(h, w);
        let input = Tensor::from_vec(image.channels(), h, w, image.to_planar()).pad_replicate(hp, wp);

        let stem_pre = l.stem.forward(p, &input);
        stem_pre.ensure_finite("stem")?;
        let mut skips = vec![leaky_relu(&stem_pre)];
        let mut down_in = Vec::with_capacity(l.down.len());
        let mut down_pre = Vec::with_capacity(l.down.len());
        for (i, conv) in l.down.iter().enumerate() {
            let pooled = avg_pool2(skips.last().expect("nonempty"));
            let pre = conv.forward(p, &pooled);
            pre.ensure_finite(&format!("down{}", i + 1))?;
            skips.push(leaky_relu(&pre));
            down_in.push(pooled);
            down_pre.push(pre);
        }
        let mut up_in = vec![Tensor::zeros(0, 0, 0); l.up.len()];
        let mut up_pre = vec![Tensor::zeros(0, 0, 0); l.up.len()];
        let mut x = skips.pop().expect("nonempty");
        for lvl in (0..l.up.len()).rev() {
            let cat = concat(&upsample2(&x), &skips[lvl]);
            let pre = l.up[lvl].forward(p, &cat);
            pre.ensure_finite(&format!("up{}", lvl + 1))?;
            x = leaky_relu(&pre);
            up_in[lvl] = cat;
            up_pre[lvl] = pre;
        }
        let out = l.head.forward(p, &x);
        out.ensure_finite("head")?;
        let out = out.crop(h, w);
        let kernels = KernelField::grouped(self.config.k, self.config.groups(), h, w, out.data)?;
        let trace = KpnTrace {
            height: h,
            width: w,
            input,
            stem_pre,
            down_in,
            down_pre,
            up_in,
            up_pre,
            head_in: x,
        };
        Ok((kernels, trace))
    }

    /// Predicts one kernel per pixel.
    pub fn predict_kernels(&self, image: &Image) -> Result<KernelField> {
        Ok(self.forward_trace(image)?.0)
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂K`.
    pub fn backward(&self, trace: &KpnTrace, grad_kernels: &KernelField, grads: &mut [f64]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(shape_err!("gradient buffer has {} slots, model has {}", grads.len(), self.params.len()));
        }
        if grad_kernels.height() != trace.height
            || grad_kernels.width() != trace.width
            || grad_kernels.groups() * grad_kernels.k() * grad_kernels.k() != self.config.output_channels()
        {
            return Err(shape_err!("kernel gradient does not match the traced forward pass"));
        }
        let p = &self.params;
        let l = &self.layers;
        let (hp, wp) = (trace.input.h, trace.input.w);
        let g_out = Tensor::from_vec(
            self.config.output_channels(),
            trace.height,
            trace.width,
            grad_kernels.data().to_vec(),
        )
        .uncrop(hp, wp);

        let depth = l.down.len();
        let mut g_skips: Vec<Option<Tensor>> = vec![None; depth + 1];
        let add = |slot: &mut Option<Tensor>, g: Tensor| match slot {
            Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        };

        let mut g_x = l.head.backward(p, &trace.head_in, &g_out, grads, true).expect("input grad");
        for lvl in 0..depth {
            let g_pre = leaky_relu_backward(&trace.up_pre[lvl], &g_x);
            let g_cat = l.up[lvl].backward(p, &trace.up_in[lvl], &g_pre, grads, true).expect("input grad");
            let (g_up, g_skip) = split(&g_cat, self.config.width_at(lvl + 1));
            add(&mut g_skips[lvl], g_skip);
            g_x = upsample2_backward(&g_up);
        }
        add(&mut g_skips[depth], g_x);

        for lvl in (1..=depth).rev() {
            let g_s = g_skips[lvl].take().expect("every level receives gradient");
            let g_pre = leaky_relu_backward(&trace.down_pre[lvl - 1], &g_s);
            let g_in = l.down[lvl - 1]
                .backward(p, &trace.down_in[lvl - 1], &g_pre, grads, true)
                .expect("input grad");
            add(&mut g_skips[lvl - 1], avg_pool2_backward(&g_in));
        }
        let g_s0 = g_skips[0].take().expect("stem receives gradient");
        let g_pre = leaky_relu_backward(&trace.stem_pre, &g_s0);
        l.stem.backward(p, &trace.input, &g_pre, grads, false);
        Ok(())
    }

    /// Night-to-day translation, not clamped.
    pub fn translate(&self, night: &Image) -> Result<Image> {
        let kernels = self.predict_kernels(night)?;
        apply_pixelwise_filter(night, &kernels, PaddingPolicy::Replicate)
    }

    /// Translation clamped to `[0, 1]`, for writing and detection.
    pub fn translate_clamped(&self, night: &Image) -> Result<Image> {
        clamp_to_unit(&self.translate(night)?)
    }

    /// Translation plus the parameter gradient of `⟨upstream, output⟩`.
    pub fn translate_with_grad(&self, night: &Image, upstream: &Image, grads: &mut [f64]) -> Result<Image> {
        let (kernels, trace) = self.forward_trace(night)?;
        let out = apply_pixelwise_filter(night, &kernels, PaddingPolicy::Replicate)?;
        let (_, g_k) = filter_gradients(night, &kernels, upstream, PaddingPolicy::Replicate)?;
        self.backward(&trace, &g_k, grads)?;
        Ok(out)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        a.push("params", self.params.clone());
        a.push("init_kernel_bound", vec![self.init_kernel_bound]);
        a
    }

    pub fn from_archive(mut archive: Archive) -> Result<Self> {
        archive.expect_kind(CHECKPOINT_KIND)?;
        let config: KpnConfig = serde_json::from_value(archive.config.clone())
            .map_err(|e| Error::Compatibility(format!("bad KPN config: {e}")))?;
        config.validate().map_err(|e| Error::Compatibility(e.to_string()))?;
        let (layers, n) = Layers::build(&config);
        let params = archive.take("params")?;
        if params.len() != n {
            return Err(Error::Compatibility(format!(
                "checkpoint holds {} parameters, config implies {n}",
                params.len()
            )));
        }
        let init_kernel_bound = archive.take("init_kernel_bound")?.first().copied().unwrap_or(f64::NAN);
        Ok(Self {
            config,
            layers,
            params,
            init_kernel_bound,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }
}
