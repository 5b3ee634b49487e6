//! A deliberately small single-scale anchor detector.
//!
//! Four 3×3 conv layers with three 2× average pools give a stride-8 feature
//! map; one square anchor sits at the centre of every cell. A 1×1 head
//! predicts an objectness logit and a box regression `(tx, ty, tw, th)` per
//! anchor. It exists so the whole pipeline, including detection losses and
//! mAP evaluation, can be exercised without a large pretrained model.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{nms, select, BBox, BoxSet, DetTargets, DetectConfig, Detector, HeadOutputs};
use crate::checkpoint::{digest, Archive};
use crate::error::{arg_err, Error, Result};
use crate::imaging::Image;
use crate::losses::{l_det_grad, DetLoss};
use crate::nn::{avg_pool2, avg_pool2_backward, leaky_relu, leaky_relu_backward, Conv, Sgd, Tensor};
use crate::rng::{stream, sub_seed};

pub const CHECKPOINT_KIND: &str = "tiny-detector";
const STRIDE: usize = 8;
const HEAD_CHANNELS: usize = 5;
/// Prior objectness of 1% for a fresh head.
const OBJECTNESS_PRIOR_BIAS: f64 = -4.59511985013459;
const MAX_LOG_SCALE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyDetectorConfig {
    pub channels: usize,
    pub base_channels: usize,
    /// Side of the square anchor, in pixels.
    pub anchor_size: f64,
    /// Anchors overlapping a box at least this much are positives, besides the
    /// anchor whose cell contains the box centre.
    pub positive_iou: f64,
    pub class: u32,
    pub seed: u64,
}

impl Default for TinyDetectorConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_channels: 8,
            anchor_size: 16.0,
            positive_iou: 0.5,
            class: 0,
            seed: 0,
        }
    }
}

impl TinyDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.base_channels == 0 || !(self.anchor_size > 0.0) {
            return Err(Error::Config("base_channels and anchor_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiply the learning rate by `lr_decay` every this many epochs.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    /// Random horizontal flips during training.
    pub hflip: bool,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            epochs: 30,
            batch_size: 4,
            lr_decay_every: 10,
            lr_decay: 0.1,
            hflip: true,
            seed: 0,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(
                "detector training needs lr > 0, batch_size ≥ 1 and momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean detection loss per epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    convs: [Conv; 4],
    head: Conv,
}

impl Layers {
    fn build(cfg: &TinyDetectorConfig) -> (Self, usize) {
        let b = cfg.base_channels;
        let mut off = 0;
        let convs = [
            Conv::alloc(cfg.channels, b, 3, &mut off),
            Conv::alloc(b, 2 * b, 3, &mut off),
            Conv::alloc(2 * b, 2 * b, 3, &mut off),
            Conv::alloc(2 * b, 2 * b, 3, &mut off),
        ];
        let head = Conv::alloc(2 * b, HEAD_CHANNELS, 1, &mut off);
        (Self { convs, head }, off)
    }
}

struct Trace {
    height: usize,
    width: usize,
    /// Input of each conv layer (the first is the padded image).
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    head_in: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDetector {
    config: TinyDetectorConfig,
    layers: Layers,
    params: Vec<f64>,
    frozen: bool,
}

impl TinyDetector {
    pub fn new(config: TinyDetectorConfig) -> Result<Self> {
        config.validate()?;
        let (layers, n) = Layers::build(&config);
        let mut params = vec![0.0; n];
        let mut rng = stream(config.seed);
        for conv in &layers.convs {
            conv.init(&mut params, 1.0, &mut rng);
        }
        layers.head.init(&mut params, 0.1, &mut rng);
        params[layers.head.b_off] = OBJECTNESS_PRIOR_BIAS;
        Ok(Self {
            config,
            layers,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &TinyDetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    fn grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(STRIDE), w.div_ceil(STRIDE))
    }

    fn anchor(&self, gy: usize, gx: usize) -> BBox {
        let a = self.config.anchor_size;
        let cx = (gx as f64 + 0.5) * STRIDE as f64;
        let cy = (gy as f64 + 0.5) * STRIDE as f64;
        BBox {
            x1: cx - 0.5 * a,
            y1: cy - 0.5 * a,
            x2: cx + 0.5 * a,
            y2: cy + 0.5 * a,
        }
    }

    fn encode(&self, anchor: &BBox, gt: &BBox) -> [f64; 4] {
        let a = self.config.anchor_size;
        let (acx, acy) = anchor.center();
        let (gcx, gcy) = gt.center();
        [(gcx - acx) / a, (gcy - acy) / a, (gt.width() / a).ln(), (gt.height() / a).ln()]
    }

    fn decode(&self, anchor: &BBox, t: [f64; 4]) -> BBox {
        let a = self.config.anchor_size;
        let (acx, acy) = anchor.center();
        let cx = acx + t[0] * a;
        let cy = acy + t[1] * a;
        let w = a * t[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        let h = a * t[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    fn forward_trace(&self, image: &Image) -> Result<(HeadOutputs, Trace)> {
        if self.params.is_empty() {
            return Err(Error::State("detector has no parameters loaded".into()));
        }
        if image.channels() != self.config.channels {
            return Err(arg_err!(
                "detector expects {} channels, image has {}",
                self.config.channels,
                image.channels()
            ));
        }
        let (h, w) = (image.height(), image.width());
        let (gh, gw) = self.grid(h, w);
        let p = &self.params;
        let mut x = Tensor::from_vec(image.channels(), h, w, image.to_planar()).pad_replicate(gh * STRIDE, gw * STRIDE);
        let mut inputs = Vec::with_capacity(4);
        let mut pre = Vec::with_capacity(4);
        for (i, conv) in self.layers.convs.iter().enumerate() {
            let z = conv.forward(p, &x);
            z.ensure_finite(&format!("conv{}", i + 1))?;
            let mut a = leaky_relu(&z);
            if i < 3 {
                a = avg_pool2(&a);
            }
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(z);
        }
        let out = self.layers.head.forward(p, &x);
        out.ensure_finite("head")?;
        let heads = HeadOutputs {
            channels: HEAD_CHANNELS,
            grid_h: gh,
            grid_w: gw,
            data: out.data,
        };
        Ok((
            heads,
            Trace {
                height: h,
                width: w,
                inputs,
                pre,
                head_in: x,
            },
        ))
    }

    /// Backward through the network. Parameter gradients accumulate into
    /// `grads`; the image gradient is returned if requested.
    fn backward(&self, trace: &Trace, grad_heads: &HeadOutputs, grads: &mut [f64], want_input: bool) -> Option<Image> {
        let p = &self.params;
        let g = Tensor::from_vec(HEAD_CHANNELS, grad_heads.grid_h, grad_heads.grid_w, grad_heads.data.clone());
        let mut g = self.layers.head.backward(p, &trace.head_in, &g, grads, true).expect("input grad");
        for i in (0..4).rev() {
            if i < 3 {
                g = avg_pool2_backward(&g);
            }
            let gz = leaky_relu_backward(&trace.pre[i], &g);
            let need = i > 0 || want_input;
            match self.layers.convs[i].backward(p, &trace.inputs[i], &gz, grads, need) {
                Some(gi) => g = gi,
                None => return None,
            }
        }
        let g = g.pad_replicate_backward(trace.height, trace.width);
        let (h, w, ch) = (trace.height, trace.width, self.config.channels);
        let mut data = vec![0.0; h * w * ch];
        for c in 0..ch {
            for (pix, v) in g.plane(c).iter().enumerate() {
                data[pix * ch + c] = *v;
            }
        }
        Some(Image::from_raw(h, w, ch, data))
    }

    /// Loss and parameter gradient for one image.
    pub fn loss_and_grad(&self, image: &Image, targets: &DetTargets, grads: &mut [f64]) -> Result<DetLoss> {
        let (heads, trace) = self.forward_trace(image)?;
        let (loss, g) = l_det_grad(&heads, targets)?;
        self.backward(&trace, &g, grads, false);
        Ok(loss)
    }

    /// Trains a fresh detector on `(image, ground truth)` pairs.
    pub fn train(
        config: TinyDetectorConfig,
        train: &DetectorTrainConfig,
        data: &[(Image, BoxSet)],
    ) -> Result<(Self, TrainReport)> {
        let mut det = Self::new(config)?;
        let report = det.fit(train, data)?;
        Ok((det, report))
    }

    /// SGD with momentum over minibatches; the learning rate decays stepwise.
    pub fn fit(&mut self, train: &DetectorTrainConfig, data: &[(Image, BoxSet)]) -> Result<TrainReport> {
        if self.frozen {
            return Err(Error::State("cannot train a frozen detector".into()));
        }
        train.validate()?;
        if data.is_empty() {
            return Err(Error::Data("detector training set is empty".into()));
        }
        let flipped: Vec<(Image, BoxSet)> = if train.hflip {
            data.iter().map(|(img, gt)| hflip(img, gt)).collect()
        } else {
            Vec::new()
        };
        let targets = data
            .iter()
            .map(|(img, gt)| self.match_targets(gt, img.height(), img.width()))
            .collect::<Result<Vec<_>>>()?;
        let flipped_targets = flipped
            .iter()
            .map(|(img, gt)| self.match_targets(gt, img.height(), img.width()))
            .collect::<Result<Vec<_>>>()?;

        let mut opt = Sgd::new(train.lr, train.momentum, self.params.len());
        let mut report = TrainReport::default();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..train.epochs {
            if train.lr_decay_every > 0 {
                opt.lr = train.lr * train.lr_decay.powi((epoch / train.lr_decay_every) as i32);
            }
            let mut rng = stream(sub_seed(train.seed, epoch as u64));
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(train.batch_size) {
                let mut grads = vec![0.0; self.params.len()];
                for &i in batch {
                    let use_flip = train.hflip && rand::Rng::random_bool(&mut rng, 0.5);
                    let (img, tgt) = if use_flip {
                        (&flipped[i].0, &flipped_targets[i])
                    } else {
                        (&data[i].0, &targets[i])
                    };
                    let loss = self.loss_and_grad(img, tgt, &mut grads)?;
                    epoch_loss += loss.total();
                }
                let scale = 1.0 / batch.len() as f64;
                grads.iter_mut().for_each(|g| *g *= scale);
                opt.step(&mut self.params, &grads);
            }
            let mean = epoch_loss / data.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Numeric(format!("detector loss diverged at epoch {epoch}")));
            }
            report.epoch_losses.push(mean);
        }
        Ok(report)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(CHECKPOINT_KIND, serde_json::to_value(&self.config).expect("serializes"));
        a.push("params", self.params.clone());
        a
    }

    /// Loaded detectors start frozen.
    pub fn from_archive(mut archive: Archive) -> Result<Self> {
        archive.expect_kind(CHECKPOINT_KIND)?;
        let config: TinyDetectorConfig = serde_json::from_value(archive.config.clone())
            .map_err(|e| Error::Compatibility(format!("bad detector config: {e}")))?;
        config.validate().map_err(|e| Error::Compatibility(e.to_string()))?;
        let (layers, n) = Layers::build(&config);
        let params = archive.take("params")?;
        if params.len() != n {
            return Err(Error::Compatibility(format!(
                "checkpoint holds {} parameters, config implies {n}",
                params.len()
            )));
        }
        Ok(Self {
            config,
            layers,
            params,
            frozen: true,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }
}

fn hflip(img: &Image, gt: &BoxSet) -> (Image, BoxSet) {
    let (h, w, ch) = img.dims();
    let flipped = Image::from_fn(h, w, ch, |y, x, c| img.get(y, w - 1 - x, c)).expect("same data");
    let wf = w as f64;
    let boxes = gt
        .boxes
        .iter()
        .map(|b| BBox {
            x1: wf - b.x2,
            y1: b.y1,
            x2: wf - b.x1,
            y2: b.y2,
        })
        .collect();
    (
        flipped,
        BoxSet {
            boxes,
            ..gt.clone()
        },
    )
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Detector for TinyDetector {
    fn forward_heads(&self, image: &Image) -> Result<HeadOutputs> {
        Ok(self.forward_trace(image)?.0)
    }

    fn backward_heads(&self, image: &Image, grad_heads: &HeadOutputs) -> Result<Image> {
        let (heads, trace) = self.forward_trace(image)?;
        if !heads.same_grid(grad_heads) {
            return Err(crate::error::shape_err!("head gradient does not match the anchor grid"));
        }
        let mut scratch = vec![0.0; self.params.len()];
        Ok(self.backward(&trace, grad_heads, &mut scratch, true).expect("input gradient requested"))
    }

    fn detect(&self, image: &Image, cfg: &DetectConfig) -> Result<BoxSet> {
        let heads = self.forward_heads(image)?;
        let (w, h) = (image.width() as f64, image.height() as f64);
        let mut all = BoxSet {
            scores: Some(Vec::new()),
            ..Default::default()
        };
        for gy in 0..heads.grid_h {
            for gx in 0..heads.grid_w {
                let a = gy * heads.grid_w + gx;
                let score = sigmoid(heads.at(0, a));
                if score < cfg.score_threshold {
                    continue;
                }
                let t = [heads.at(1, a), heads.at(2, a), heads.at(3, a), heads.at(4, a)];
                let b = self.decode(&self.anchor(gy, gx), t);
                let clipped = BBox {
                    x1: b.x1.clamp(0.0, w),
                    y1: b.y1.clamp(0.0, h),
                    x2: b.x2.clamp(0.0, w),
                    y2: b.y2.clamp(0.0, h),
                };
                if clipped.x2 - clipped.x1 < 1e-6 || clipped.y2 - clipped.y1 < 1e-6 {
                    continue;
                }
                all.boxes.push(clipped);
                all.classes.push(self.config.class);
                all.scores.as_mut().expect("set").push(score);
            }
        }
        let keep = nms(&all, cfg.nms_iou);
        Ok(select(&all, &keep))
    }

    fn match_targets(&self, gt: &BoxSet, height: usize, width: usize) -> Result<DetTargets> {
        gt.validate()?;
        let (gh, gw) = self.grid(height, width);
        let n = gh * gw;
        let mut best: Vec<Option<(usize, f64, bool)>> = vec![None; n];
        for (j, b) in gt.boxes.iter().enumerate() {
            let (cx, cy) = b.center();
            let cgx = ((cx / STRIDE as f64).floor().max(0.0) as usize).min(gw - 1);
            let cgy = ((cy / STRIDE as f64).floor().max(0.0) as usize).min(gh - 1);
            for gy in 0..gh {
                for gx in 0..gw {
                    let o = super::iou_unchecked(&self.anchor(gy, gx), b);
                    let centre = gy == cgy && gx == cgx;
                    if !(centre || o >= self.config.positive_iou) {
                        continue;
                    }
                    let slot = &mut best[gy * gw + gx];
                    // Centre cells win over IoU-only matches; ties go to higher IoU.
                    let better = match slot {
                        None => true,
                        Some((_, bo, bc)) => (centre, o) > (*bc, *bo),
                    };
                    if better {
                        *slot = Some((j, o, centre));
                    }
                }
            }
        }
        let mut positive = vec![false; n];
        let mut regression = vec![[0.0; 4]; n];
        for (a, slot) in best.iter().enumerate() {
            if let Some((j, _, _)) = slot {
                positive[a] = true;
                regression[a] = self.encode(&self.anchor(a / gw, a % gw), &gt.boxes[*j]);
            }
        }
        Ok(DetTargets {
            grid_h: gh,
            grid_w: gw,
            positive,
            regression,
        })
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn param_digest(&self) -> String {
        digest(&self.params)
    }
}
