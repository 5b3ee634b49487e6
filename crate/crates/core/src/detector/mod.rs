//! Object-detector boundary: box types, the interface any plugged detector
//! implements, non-maximum suppression, and a tiny built-in anchor detector.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::imaging::Image;

pub mod eval;
pub mod tiny;

pub use eval::{average_precision, average_precision_at, ApMode, ClassAp, EvalConfig, EvalReport};
pub use tiny::{DetectorTrainConfig, TinyDetector, TinyDetectorConfig, TrainReport};

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(arg_err!("degenerate box {self:?}"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

/// Intersection over union. Errors on degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Boxes with classes and, for predictions, scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub boxes: Vec<BBox>,
    pub classes: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl BoxSet {
    pub fn ground_truth(boxes: Vec<BBox>, classes: Vec<u32>) -> Result<Self> {
        let s = Self {
            boxes,
            classes,
            scores: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn predictions(boxes: Vec<BBox>, classes: Vec<u32>, scores: Vec<f64>) -> Result<Self> {
        let s = Self {
            boxes,
            classes,
            scores: Some(scores),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.boxes.len() {
            return Err(shape_err!("{} boxes but {} classes", self.boxes.len(), self.classes.len()));
        }
        if let Some(scores) = &self.scores {
            if scores.len() != self.boxes.len() {
                return Err(shape_err!("{} boxes but {} scores", self.boxes.len(), scores.len()));
            }
            if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(Error::Data(format!("score {s} outside [0, 1]")));
            }
        }
        self.boxes.iter().try_for_each(BBox::validate)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn score(&self, i: usize) -> f64 {
        self.scores.as_ref().map_or(1.0, |s| s[i])
    }
}

/// Dense detector outputs on the anchor grid, planar `channels×gh×gw`.
///
/// For the built-in detector channel 0 is the objectness logit and channels
/// 1..5 the box regression `(tx, ty, tw, th)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Vec<f64>,
}

impl HeadOutputs {
    pub fn zeros_like(other: &HeadOutputs) -> Self {
        Self {
            data: vec![0.0; other.data.len()],
            ..*other
        }
    }

    pub fn anchors(&self) -> usize {
        self.grid_h * self.grid_w
    }

    #[inline]
    pub fn at(&self, channel: usize, anchor: usize) -> f64 {
        self.data[channel * self.anchors() + anchor]
    }

    #[inline]
    pub fn at_mut(&mut self, channel: usize, anchor: usize) -> &mut f64 {
        let n = self.anchors();
        &mut self.data[channel * n + anchor]
    }

    pub fn same_grid(&self, other: &HeadOutputs) -> bool {
        (self.channels, self.grid_h, self.grid_w) == (other.channels, other.grid_h, other.grid_w)
    }
}

/// Anchor-level training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DetTargets {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Per anchor: whether it is matched to a ground-truth box.
    pub positive: Vec<bool>,
    /// Per anchor regression target; meaningful only where `positive`.
    pub regression: Vec<[f64; 4]>,
}

impl DetTargets {
    pub fn matched(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// Post-processing parameters for [`Detector::detect`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

/// What the pipeline needs from a detector.
///
/// The anchor grid must be a pure function of the image size, and
/// [`Detector::forward_heads`] must be a pure function of the image and the
/// parameters.
pub trait Detector: Send + Sync {
    fn forward_heads(&self, image: &Image) -> Result<HeadOutputs>;

    /// Image gradient of `⟨grad_heads, forward_heads(image)⟩`. Required for
    /// training a translator against the detector's losses.
    fn backward_heads(&self, image: &Image, grad_heads: &HeadOutputs) -> Result<Image>;

    fn detect(&self, image: &Image, cfg: &DetectConfig) -> Result<BoxSet>;

    fn match_targets(&self, gt: &BoxSet, height: usize, width: usize) -> Result<DetTargets>;

    fn is_frozen(&self) -> bool;

    /// Digest of the parameters, for checking that nothing changed them.
    fn param_digest(&self) -> String;
}

/// Greedy non-maximum suppression per class. Returns kept indices in
/// descending score order.
pub fn nms(set: &BoxSet, iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.score(b).total_cmp(&set.score(a)).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = keep.iter().any(|&j| {
            set.classes[j] == set.classes[i] && iou_unchecked(&set.boxes[i], &set.boxes[j]) > iou_threshold
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

pub fn select(set: &BoxSet, indices: &[usize]) -> BoxSet {
    BoxSet {
        boxes: indices.iter().map(|&i| set.boxes[i]).collect(),
        classes: indices.iter().map(|&i| set.classes[i]).collect(),
        scores: set.scores.as_ref().map(|s| indices.iter().map(|&i| s[i]).collect()),
    }
}

/// Runs `detector.detect` over a batch, preserving order. `None` stands for
/// a detector that has not been loaded.
pub fn detect_batch(detector: Option<&dyn Detector>, images: &[Image], cfg: &DetectConfig) -> Result<Vec<BoxSet>> {
    let detector = detector.ok_or_else(|| Error::State("no detector loaded".into()))?;
    images.iter().map(|img| detector.detect(img, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b(2.0, 2.0, 3.0, 3.0)).unwrap(), 0.0);
        assert!((iou(&a, &b(0.5, 0.0, 1.5, 1.0)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let bad = BBox {
            x1: 1.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        };
        assert!(matches!(iou(&a, &bad), Err(Error::Argument(_))));
    }

    #[test]
    fn nms_drops_duplicates() {
        let set = BoxSet::predictions(
            vec![b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 10.0, 10.0), b(20.0, 20.0, 30.0, 30.0)],
            vec![0, 0, 0],
            vec![0.9, 0.9, 0.3],
        )
        .unwrap();
        assert_eq!(nms(&set, 0.5), vec![0, 2]);
    }

    #[test]
    fn boxset_validation() {
        assert!(BoxSet::ground_truth(vec![b(0.0, 0.0, 1.0, 1.0)], vec![]).is_err());
        assert!(BoxSet::predictions(vec![b(0.0, 0.0, 1.0, 1.0)], vec![0], vec![1.5]).is_err());
    }

    #[test]
    fn batch_without_detector_is_a_state_error() {
        let imgs = vec![Image::filled(4, 4, 3, 0.0).unwrap()];
        assert!(matches!(
            detect_batch(None, &imgs, &DetectConfig::default()),
            Err(Error::State(_))
        ));
    }
}
