//! Mean average precision at a fixed IoU threshold.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{iou_unchecked, BoxSet};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Area under the monotone precision envelope over every recall step.
    #[default]
    AllPoints,
    /// Mean of the envelope sampled at recall 0, 0.1, …, 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_threshold: 0.05,
            mode: ApMode::AllPoints,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold must lie in (0, 1), got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: f64,
    pub n_gt: usize,
    pub n_pred: usize,
    /// `(recall, precision)` after each ranked prediction.
    pub pr_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub per_class: BTreeMap<u32, ClassAp>,
}

/// AP for a single class over a set of images.
pub fn average_precision_at(preds: &[BoxSet], gts: &[BoxSet], class: u32, cfg: &EvalConfig) -> Result<ClassAp> {
    if preds.len() != gts.len() {
        return Err(shape_err!("{} prediction sets for {} images", preds.len(), gts.len()));
    }
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (img, set) in preds.iter().enumerate() {
        for i in 0..set.len() {
            let s = set.score(i);
            if set.classes[i] == class && s >= cfg.score_threshold {
                ranked.push((s, img, i));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let n_gt: usize = gts.iter().map(|g| g.classes.iter().filter(|&&c| c == class).count()).sum();
    if n_gt == 0 {
        let ap = if ranked.is_empty() { 1.0 } else { 0.0 };
        return Ok(ClassAp {
            ap,
            n_gt,
            n_pred: ranked.len(),
            pr_curve: Vec::new(),
        });
    }

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut pr_curve = Vec::with_capacity(ranked.len());
    for (rank, &(_, img, i)) in ranked.iter().enumerate() {
        let pb = &preds[img].boxes[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gb) in gts[img].boxes.iter().enumerate() {
            if gts[img].classes[j] != class || taken[img][j] {
                continue;
            }
            let o = iou_unchecked(pb, gb);
            if o >= cfg.iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[img][j] = true;
            tp += 1;
        }
        pr_curve.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    Ok(ClassAp {
        ap: integrate(&pr_curve, cfg.mode),
        n_gt,
        n_pred: ranked.len(),
        pr_curve,
    })
}

fn integrate(pr: &[(f64, f64)], mode: ApMode) -> f64 {
    // Precision envelope: best precision at this or any later rank.
    let mut envelope: Vec<f64> = pr.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match mode {
        ApMode::AllPoints => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (i, &(r, _)) in pr.iter().enumerate() {
                if r > prev_recall {
                    ap += (r - prev_recall) * envelope[i];
                    prev_recall = r;
                }
            }
            ap
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    pr.iter()
                        .zip(&envelope)
                        .filter(|((r, _), _)| *r >= t - 1e-12)
                        .map(|(_, &p)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// mAP over every class appearing in either the predictions or the ground
/// truth. With no classes at all, class 0 is evaluated (and scores 1).
pub fn average_precision(preds: &[BoxSet], gts: &[BoxSet], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut classes: BTreeSet<u32> = preds
        .iter()
        .chain(gts)
        .flat_map(|s| s.classes.iter().copied())
        .collect();
    if classes.is_empty() {
        classes.insert(0);
    }
    let mut per_class = BTreeMap::new();
    for c in classes {
        per_class.insert(c, average_precision_at(preds, gts, c, cfg)?);
    }
    let map = per_class.values().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport { map, per_class })
}

#[cfg(test)]
mod tests {
    use super::super::BBox;
    use super::*;

    fn gt(boxes: &[[f64; 4]]) -> BoxSet {
        BoxSet::ground_truth(
            boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3]).unwrap()).collect(),
            vec![0; boxes.len()],
        )
        .unwrap()
    }

    fn pred(boxes: &[[f64; 4]], scores: &[f64]) -> BoxSet {
        BoxSet::predictions(
            boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3]).unwrap()).collect(),
            vec![0; boxes.len()],
            scores.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_and_half_recall() {
        let cfg = EvalConfig::default();
        let g = gt(&[[0.0, 0.0, 10.0, 10.0]]);
        let p = pred(&[[0.0, 0.0, 10.0, 10.0]], &[0.9]);
        assert_eq!(average_precision(&[p.clone()], &[g], &cfg).unwrap().map, 1.0);
        let g2 = gt(&[[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]]);
        assert!((average_precision(&[p], &[g2], &cfg).unwrap().map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_cases() {
        let cfg = EvalConfig::default();
        let empty = BoxSet::default();
        assert_eq!(average_precision(&[empty.clone()], &[empty.clone()], &cfg).unwrap().map, 1.0);
        let p = pred(&[[0.0, 0.0, 1.0, 1.0]], &[0.5]);
        assert_eq!(average_precision(&[p], &[empty.clone()], &cfg).unwrap().map, 0.0);
        let g = gt(&[[0.0, 0.0, 1.0, 1.0]]);
        assert_eq!(average_precision(&[empty], &[g], &cfg).unwrap().map, 0.0);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let cfg = EvalConfig::default();
        let g = gt(&[[0.0, 0.0, 10.0, 10.0]]);
        let p = pred(&[[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]], &[0.9, 0.8]);
        let r = average_precision(&[p], &[g], &cfg).unwrap();
        assert_eq!(r.per_class[&0].pr_curve, vec![(1.0, 1.0), (1.0, 0.5)]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn eleven_point_mode() {
        let cfg = EvalConfig {
            mode: ApMode::ElevenPoint,
            ..Default::default()
        };
        let g = gt(&[[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]]);
        let p = pred(&[[0.0, 0.0, 10.0, 10.0]], &[0.9]);
        // Recall 0.5 reached at precision 1: thresholds 0..=0.5 count.
        assert!((average_precision(&[p], &[g], &cfg).unwrap().map - 6.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_lists_and_bad_config() {
        let cfg = EvalConfig::default();
        assert!(average_precision(&[], &[BoxSet::default()], &cfg).is_err());
        let bad = EvalConfig {
            iou_threshold: 1.0,
            ..cfg
        };
        assert!(matches!(average_precision(&[], &[], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn score_threshold_filters() {
        let cfg = EvalConfig::default();
        let g = gt(&[[0.0, 0.0, 10.0, 10.0]]);
        let p = pred(&[[0.0, 0.0, 10.0, 10.0]], &[0.01]);
        assert_eq!(average_precision(&[p], &[g], &cfg).unwrap().map, 0.0);
    }
}
