//! Training and inference orchestration.
//!
//! Stage one trains a daytime detector ([`train_detector`]). Stage two trains
//! the KPN on StyleMix pairs against that detector, which stays frozen
//! ([`KpnTrainer`]). Inference preprocesses night images, translates them and
//! runs the detector ([`infer_night`]).
//!
//! Output layout under a run directory: `translated/`, `detections/`,
//! `checkpoints/`, `logs/`.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::detector::{
    average_precision, BoxSet, DetTargets, DetectConfig, Detector, DetectorTrainConfig, EvalConfig, EvalReport,
    TinyDetector, TinyDetectorConfig, TrainReport,
};
use crate::error::{Error, Result};
use crate::filter::{apply_pixelwise_filter, filter_gradients};
use crate::imaging::{clamp_to_unit, Image, PaddingPolicy};
use crate::io::{create_dir_all, read_to_string, write_atomic, write_image};
use crate::kpn::{KpnConfig, KpnModel};
use crate::losses::{l_det_cons, l_det_cons_grad, l_det_grad, l_pix, l_pix_cons, l_pix_grad, total_loss, LossReport, LossWeights};
use crate::manifest::{read_manifest, read_predictions, write_predictions, Sample};
use crate::nn::Sgd;
use crate::rng::{stream, sub_seed};
use crate::stylemix::{generate_pair, MixedPair, StyleMixConfig, StylePool, Stylizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kpn_lr: f64,
    pub kpn_epochs: usize,
    /// Mixed night images per epoch; each day image contributes two.
    pub pairs_per_epoch: usize,
    pub det_lr: f64,
    pub det_lr_decay_every: usize,
    pub det_epochs: usize,
    pub momentum: f64,
    /// Day images (so pairs of mixed images) per KPN step.
    pub batch_size: usize,
    /// Stop KPN training after this many steps in total.
    pub max_steps: Option<usize>,
    pub loss: LossWeights,
    pub stylemix: StyleMixConfig,
    pub kpn: KpnConfig,
    pub detector: TinyDetectorConfig,
    pub eval: EvalConfig,
    pub detect: DetectConfig,
    pub contrast: ContrastConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kpn_lr: 0.002,
            kpn_epochs: 200,
            pairs_per_epoch: 2000,
            det_lr: 1e-4,
            det_lr_decay_every: 10,
            det_epochs: 30,
            momentum: 0.9,
            batch_size: 4,
            max_steps: None,
            loss: LossWeights::default(),
            stylemix: StyleMixConfig::default(),
            kpn: KpnConfig::default(),
            detector: TinyDetectorConfig::default(),
            eval: EvalConfig::default(),
            detect: DetectConfig::default(),
            contrast: ContrastConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// A zero KPN learning rate is accepted: it freezes the translator, which
    /// is useful for measuring losses.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.kpn_lr >= 0.0 && self.kpn_lr.is_finite()) {
            return bad(format!("kpn_lr must be finite and non-negative, got {}", self.kpn_lr));
        }
        if !(self.det_lr > 0.0 && self.det_lr.is_finite()) {
            return bad(format!("det_lr must be positive, got {}", self.det_lr));
        }
        if self.kpn_epochs == 0 || self.det_epochs == 0 {
            return bad("epoch counts must be at least 1".into());
        }
        if self.pairs_per_epoch < 2 || self.batch_size == 0 {
            return bad("pairs_per_epoch must be at least 2 and batch_size at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.kpn.channels != self.detector.channels {
            return bad("kpn and detector channel counts differ".into());
        }
        self.stylemix.validate()?;
        self.kpn.validate()?;
        self.detector.validate()?;
        self.eval.validate()?;
        self.contrast.validate()?;
        if !(self.loss.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.loss.lambda));
        }
        Ok(())
    }

    /// Derives every seed in the configuration from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.stylemix.seed = seed;
        self.kpn.seed = sub_seed(seed, 5);
        self.detector.seed = sub_seed(seed, 6);
    }

    pub fn detector_train_config(&self) -> DetectorTrainConfig {
        DetectorTrainConfig {
            lr: self.det_lr,
            momentum: self.momentum,
            epochs: self.det_epochs,
            batch_size: self.batch_size,
            lr_decay_every: self.det_lr_decay_every,
            seed: sub_seed(self.seed, 7),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastMode {
    /// Two linear segments meeting at `(threshold, gain·threshold)`.
    #[default]
    Linear,
    /// `v^(1/gain)`.
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    pub threshold: f64,
    pub gain: f64,
    pub enabled: bool,
    pub mode: ContrastMode,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            gain: 1.5,
            enabled: false,
            mode: ContrastMode::Linear,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("contrast threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.gain >= 1.0 && self.gain.is_finite()) {
            return Err(Error::Config(format!("contrast gain must be at least 1, got {}", self.gain)));
        }
        if self.threshold * self.gain > 1.0 {
            return Err(Error::Config(format!(
                "threshold·gain = {} exceeds 1",
                self.threshold * self.gain
            )));
        }
        Ok(())
    }

    pub fn map(&self, v: f64) -> f64 {
        match self.mode {
            ContrastMode::Linear => {
                let (t, g) = (self.threshold, self.gain);
                if v < t {
                    g * v
                } else {
                    g * t + (v - t) * (1.0 - g * t) / (1.0 - t)
                }
            }
            ContrastMode::Gamma => v.powf(1.0 / self.gain),
        }
    }
}

/// Brightens dark pixels. Disabled configs return the input unchanged.
pub fn contrast_enhance(image: &Image, cfg: &ContrastConfig) -> Result<Image> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(image.clone());
    }
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!("contrast input must lie in [0, 1], found {v}")));
    }
    Ok(image.map(|v| cfg.map(v)))
}

pub const TRAIN_STATE_KIND: &str = "kpn-train";

/// Everything needed to resume KPN training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: KpnModel,
    pub velocity: Vec<f64>,
    /// Steps completed.
    pub step: usize,
}

impl TrainState {
    pub fn new(model: KpnModel) -> Self {
        Self {
            velocity: vec![0.0; model.n_params()],
            model,
            step: 0,
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = self.model.to_archive();
        a.kind = TRAIN_STATE_KIND.into();
        a.push("velocity", self.velocity.clone());
        a.push("step", vec![self.step as f64]);
        a
    }

    pub fn from_archive(mut a: Archive) -> Result<Self> {
        a.expect_kind(TRAIN_STATE_KIND)?;
        let velocity = a.take("velocity")?;
        let step = a.take("step")?.first().copied().unwrap_or(0.0) as usize;
        a.kind = crate::kpn::CHECKPOINT_KIND.into();
        let model = KpnModel::from_archive(a)?;
        if velocity.len() != model.n_params() {
            return Err(Error::Compatibility("optimizer state does not match the model".into()));
        }
        Ok(Self { model, velocity, step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub first: Option<LossReport>,
    pub last: Option<LossReport>,
    pub detector_digest_before: Option<String>,
    pub detector_digest_after: Option<String>,
    pub checkpoints: Vec<PathBuf>,
}

/// KPN training against StyleMix pairs and an optional frozen detector.
///
/// The batch at step `s` depends only on the seed and `s`, so a run resumed
/// from a saved [`TrainState`] continues exactly as an uninterrupted one.
pub struct KpnTrainer<'a> {
    cfg: TrainConfig,
    days: &'a [(Image, BoxSet)],
    pool: &'a StylePool,
    stylizer: &'a dyn Stylizer,
    detector: Option<&'a dyn Detector>,
    targets: Vec<DetTargets>,
}

impl<'a> KpnTrainer<'a> {
    /// With `lambda > 0` a frozen detector is required.
    pub fn new(
        cfg: TrainConfig,
        days: &'a [(Image, BoxSet)],
        pool: &'a StylePool,
        stylizer: &'a dyn Stylizer,
        detector: Option<&'a dyn Detector>,
    ) -> Result<Self> {
        cfg.validate()?;
        if days.is_empty() {
            return Err(Error::Data("day training set is empty".into()));
        }
        if pool.is_empty() {
            return Err(Error::Data("style pool is empty".into()));
        }
        if let Some(det) = detector {
            if !det.is_frozen() {
                return Err(Error::State("the detector must be frozen before KPN training".into()));
            }
        } else if cfg.loss.lambda > 0.0 {
            return Err(Error::State("lambda > 0 needs a detector".into()));
        }
        let targets = match detector {
            Some(det) if cfg.loss.lambda > 0.0 => days
                .iter()
                .map(|(img, gt)| det.match_targets(gt, img.height(), img.width()))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        Ok(Self {
            cfg,
            days,
            pool,
            stylizer,
            detector,
            targets,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn days_per_epoch(&self) -> usize {
        self.cfg.pairs_per_epoch / 2
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.days_per_epoch().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let full = self.cfg.kpn_epochs * self.steps_per_epoch();
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    /// `(day index, pair seed)` for every slot of a step.
    pub fn batch(&self, step: usize) -> Vec<(usize, u64)> {
        let n = self.days.len();
        let per_epoch = self.days_per_epoch();
        let spe = self.steps_per_epoch();
        let (epoch, first) = (step / spe, (step % spe) * self.cfg.batch_size);
        let last = (first + self.cfg.batch_size).min(per_epoch);
        let mut perm_cache: Option<(usize, Vec<usize>)> = None;
        (first..last)
            .map(|pos| {
                let round = pos / n;
                if perm_cache.as_ref().is_none_or(|(r, _)| *r != round) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    let key = sub_seed(sub_seed(self.cfg.seed, 10 + epoch as u64), round as u64);
                    perm.shuffle(&mut stream(key));
                    perm_cache = Some((round, perm));
                }
                let day = perm_cache.as_ref().expect("filled above").1[pos % n];
                let slot = (epoch * per_epoch + pos) as u64;
                (day, sub_seed(sub_seed(self.cfg.seed, 11), slot))
            })
            .collect()
    }

    fn pairs(&self, step: usize) -> Result<Vec<(usize, MixedPair)>> {
        self.batch(step)
            .into_iter()
            .map(|(day, seed)| {
                let pair = generate_pair(&self.days[day].0, &self.cfg.stylemix, self.pool, self.stylizer, seed)?;
                Ok((day, pair))
            })
            .collect()
    }

    /// Loss report and parameter gradient for one pair.
    pub fn pair_loss_and_grad(
        &self,
        model: &KpnModel,
        day: usize,
        pair: &MixedPair,
        grads: &mut [f64],
    ) -> Result<LossReport> {
        let pad = PaddingPolicy::Replicate;
        let (k1, t1) = model.forward_trace(&pair.mn1)?;
        let (k2, t2) = model.forward_trace(&pair.mn2)?;
        let o1 = apply_pixelwise_filter(&pair.mn1, &k1, pad)?;
        let o2 = apply_pixelwise_filter(&pair.mn2, &k2, pad)?;
        let target = &pair.target;

        let lp = 0.5 * (l_pix(&o1, target)? + l_pix(&o2, target)?);
        let lc = l_pix_cons(&o1, &o2)?;
        let gd1 = l_pix_grad(&o1, target)?;
        let gd2 = l_pix_grad(&o2, target)?;
        let gc = l_pix_grad(&o1, &o2)?;
        let mut g1: Vec<f64> = gd1.iter().zip(&gc).map(|(d, c)| 0.5 * d + c).collect();
        let mut g2: Vec<f64> = gd2.iter().zip(&gc).map(|(d, c)| 0.5 * d - c).collect();

        let lambda = self.cfg.loss.lambda;
        let (mut ld, mut ldc) = (0.0, 0.0);
        if let (Some(det), true) = (self.detector, lambda > 0.0) {
            let c1 = clamp_to_unit(&o1)?;
            let c2 = clamp_to_unit(&o2)?;
            let h1 = det.forward_heads(&c1)?;
            let h2 = det.forward_heads(&c2)?;
            let (d1, gh1) = l_det_grad(&h1, &self.targets[day])?;
            let (d2, gh2) = l_det_grad(&h2, &self.targets[day])?;
            ld = 0.5 * (d1.total() + d2.total());
            ldc = l_det_cons(&h1, &h2)?;
            let ghc = l_det_cons_grad(&h1, &h2)?;
            let mut gh_a = gh1;
            let mut gh_b = gh2;
            for ((a, b), c) in gh_a.data.iter_mut().zip(gh_b.data.iter_mut()).zip(&ghc.data) {
                *a = lambda * (0.5 * *a + c);
                *b = lambda * (0.5 * *b - c);
            }
            for (g, o, c, gh) in [(&mut g1, &o1, &c1, &gh_a), (&mut g2, &o2, &c2, &gh_b)] {
                let gi = det.backward_heads(c, gh)?;
                for ((gv, ov), giv) in g.iter_mut().zip(o.data()).zip(gi.data()) {
                    if (0.0..=1.0).contains(ov) {
                        *gv += giv;
                    }
                }
            }
        }

        for (mn, k, t, g) in [(&pair.mn1, &k1, &t1, g1), (&pair.mn2, &k2, &t2, g2)] {
            let (h, w, c) = mn.dims();
            let upstream = Image::new(h, w, c, g)?;
            let (_, gk) = filter_gradients(mn, k, &upstream, pad)?;
            model.backward(t, &gk, grads)?;
        }
        total_loss(lp, lc, ld, ldc, &self.cfg.loss)
    }

    fn batch_loss_and_grad(&self, model: &KpnModel, pairs: &[(usize, MixedPair)]) -> Result<(LossReport, Vec<f64>)> {
        let mut grads = vec![0.0; model.n_params()];
        let mut sum = LossReport::default();
        for (day, pair) in pairs {
            let r = self.pair_loss_and_grad(model, *day, pair, &mut grads)?;
            sum.l_pix += r.l_pix;
            sum.l_pix_cons += r.l_pix_cons;
            sum.l_det += r.l_det;
            sum.l_det_cons += r.l_det_cons;
        }
        let inv = 1.0 / pairs.len() as f64;
        grads.iter_mut().for_each(|g| *g *= inv);
        let report = total_loss(
            sum.l_pix * inv,
            sum.l_pix_cons * inv,
            sum.l_det * inv,
            sum.l_det_cons * inv,
            &self.cfg.loss,
        )?;
        Ok((report, grads))
    }

    /// Loss of the batch at `step` under `model`, without updating anything.
    pub fn step_loss(&self, model: &KpnModel, step: usize) -> Result<LossReport> {
        Ok(self.batch_loss_and_grad(model, &self.pairs(step)?)?.0)
    }

    /// Trains from `state.step` up to [`Self::total_steps`]. With an output
    /// directory, appends to `logs/train.jsonl` and writes a checkpoint at
    /// the end of every epoch. `on_step` sees every log record.
    pub fn run(
        &self,
        state: &mut TrainState,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<TrainSummary> {
        if state.model.config().channels != self.cfg.kpn.channels {
            return Err(Error::Compatibility("model channel count differs from the config".into()));
        }
        let digest_before = self.detector.map(|d| d.param_digest());
        let mut log = match out_dir {
            Some(dir) => {
                create_dir_all(&dir.join("logs"))?;
                create_dir_all(&dir.join("checkpoints"))?;
                let path = dir.join("logs/train.jsonl");
                let file = File::options()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, BufWriter::new(file)))
            }
            None => None,
        };
        let mut summary = TrainSummary {
            steps_run: 0,
            first: None,
            last: None,
            detector_digest_before: digest_before.clone(),
            detector_digest_after: None,
            checkpoints: Vec::new(),
        };
        let start = state.step;
        let end = self.total_steps();
        let spe = self.steps_per_epoch();

        let result = std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<Vec<(usize, MixedPair)>>>(2);
            scope.spawn(move || {
                for step in start..end {
                    if tx.send(self.pairs(step)).is_err() {
                        break;
                    }
                }
            });
            let mut opt = Sgd {
                lr: self.cfg.kpn_lr,
                momentum: self.cfg.momentum,
                velocity: std::mem::take(&mut state.velocity),
            };
            let outcome = (|| {
                for step in start..end {
                    let pairs = rx.recv().map_err(|_| Error::State("pair generator stopped".into()))??;
                    let (report, grads) = self.batch_loss_and_grad(&state.model, &pairs)?;
                    if !report.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                        return Err(Error::Numeric(format!("non-finite loss or gradient at step {step}")));
                    }
                    opt.step(state.model.params_mut(), &grads);
                    state.step = step + 1;
                    let record = StepRecord {
                        step,
                        epoch: step / spe,
                        lr: opt.lr,
                        loss: report,
                    };
                    if let Some((path, w)) = log.as_mut() {
                        writeln!(w, "{}", serde_json::to_string(&record).expect("record serializes"))
                            .map_err(|e| Error::io(path.as_path(), e))?;
                    }
                    on_step(&record);
                    summary.first.get_or_insert(report);
                    summary.last = Some(report);
                    summary.steps_run += 1;
                    if (step + 1) % spe == 0 || step + 1 == end {
                        if let Some(dir) = out_dir {
                            state.velocity.clone_from(&opt.velocity);
                            let path = dir.join(format!("checkpoints/epoch_{:04}.ckpt", step / spe));
                            state.save(&path)?;
                            state.save(dir.join("checkpoints/latest.ckpt"))?;
                            summary.checkpoints.push(path);
                        }
                    }
                }
                Ok(())
            })();
            state.velocity = opt.velocity;
            drop(rx);
            outcome
        });
        if let Some((path, mut w)) = log {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        result?;

        summary.detector_digest_after = self.detector.map(|d| d.param_digest());
        if summary.detector_digest_after != digest_before {
            return Err(Error::State("detector parameters changed during KPN training".into()));
        }
        if let Some(dir) = out_dir {
            state.model.save(dir.join("checkpoints/kpn.ckpt"))?;
        }
        Ok(summary)
    }
}

/// Loads images and ground truth listed in a manifest.
pub fn load_samples(samples: &[Sample]) -> Result<Vec<(Image, BoxSet)>> {
    samples
        .iter()
        .map(|s| Ok((crate::io::read_image(&s.path)?.with_id(s.id.clone()), s.gt.clone())))
        .collect()
}

/// Trains a daytime detector and freezes it.
pub fn train_detector(cfg: &TrainConfig, data: &[(Image, BoxSet)]) -> Result<(TinyDetector, TrainReport)> {
    cfg.validate()?;
    let mut det_cfg = cfg.detector.clone();
    det_cfg.seed = sub_seed(cfg.seed, 6);
    let (mut det, report) = TinyDetector::train(det_cfg, &cfg.detector_train_config(), data)?;
    det.freeze();
    Ok((det, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferResult {
    pub id: String,
    pub translated: Image,
    pub detections: BoxSet,
}

/// Checks that a loaded KPN matches the configured kernel layout.
pub fn check_kpn_compat(model: &KpnModel, expected: &KpnConfig) -> Result<()> {
    let got = model.config();
    if got.k != expected.k || got.channels != expected.channels || got.per_channel_kernels != expected.per_channel_kernels {
        return Err(Error::Compatibility(format!(
            "checkpoint has k={} channels={} per_channel={}, config expects k={} channels={} per_channel={}",
            got.k, got.channels, got.per_channel_kernels, expected.k, expected.channels, expected.per_channel_kernels
        )));
    }
    Ok(())
}

/// Contrast preprocessing, translation, clamping and detection, in input order.
pub fn infer_night(
    images: &[Image],
    kpn: &KpnModel,
    detector: &dyn Detector,
    contrast: &ContrastConfig,
    detect: &DetectConfig,
) -> Result<Vec<InferResult>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            if img.channels() != kpn.config().channels {
                return Err(Error::Compatibility(format!(
                    "image has {} channels, KPN expects {}",
                    img.channels(),
                    kpn.config().channels
                )));
            }
            let pre = contrast_enhance(img, contrast)?;
            let id = img.meta.id.clone().unwrap_or_else(|| format!("{i:04}"));
            let translated = kpn.translate_clamped(&pre)?.with_id(id.clone());
            let detections = detector.detect(&translated, detect)?;
            Ok(InferResult {
                id,
                translated,
                detections,
            })
        })
        .collect()
}

/// Writes `translated/<id>.png` and `detections/detections.jsonl`. Returns
/// the prediction dump path.
pub fn write_results(out_dir: impl AsRef<Path>, results: &[InferResult]) -> Result<PathBuf> {
    let out = out_dir.as_ref();
    create_dir_all(&out.join("translated"))?;
    create_dir_all(&out.join("detections"))?;
    for r in results {
        write_image(&r.translated, out.join(format!("translated/{}.png", r.id)))?;
    }
    let dump = out.join("detections/detections.jsonl");
    let preds: Vec<(String, BoxSet)> = results.iter().map(|r| (r.id.clone(), r.detections.clone())).collect();
    write_predictions(&dump, &preds)?;
    Ok(dump)
}

/// Runs a detector over manifest images and evaluates against their labels.
pub fn detect_and_eval(
    detector: &dyn Detector,
    data: &[(Image, BoxSet)],
    detect: &DetectConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let preds = data
        .iter()
        .map(|(img, _)| detector.detect(img, detect))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<BoxSet> = data.iter().map(|(_, gt)| gt.clone()).collect();
    average_precision(&preds, &gts, eval)
}

/// Evaluates a prediction dump against a ground-truth manifest. Images in
/// the manifest without a dump record count as having no detections; dump
/// ids missing from the manifest are a data error.
pub fn eval_map(pred_path: impl AsRef<Path>, gt_manifest: impl AsRef<Path>, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut preds = read_predictions(pred_path)?;
    let samples = read_manifest(gt_manifest)?;
    let known: std::collections::BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let unknown: Vec<&String> = preds.keys().filter(|id| !known.contains(id.as_str())).collect();
    if !unknown.is_empty() {
        return Err(Error::Data(format!(
            "prediction ids not in the ground truth: {}",
            unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let mut ordered = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in &samples {
        ordered.push(preds.remove(&s.id).unwrap_or_default());
        gts.push(s.gt.clone());
    }
    average_precision(&ordered, &gts, cfg)
}

pub fn write_report(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    write_atomic(path, text.as_bytes())
}
