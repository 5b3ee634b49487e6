//! Reference implementations and helpers shared by the integration tests.
//! Written independently of the library code paths they check.
#![allow(dead_code)]

use nightlift::detector::{BBox, BoxSet};
use nightlift::{Image, KernelField, PaddingPolicy};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, c: usize, r: &mut ChaCha8Rng) -> Image {
    let data = (0..h * w * c).map(|_| r.random::<f64>()).collect();
    Image::new(h, w, c, data).unwrap()
}

pub fn random_kernels(k: usize, groups: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> KernelField {
    let data = (0..groups * k * k * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    KernelField::grouped(k, groups, h, w, data).unwrap()
}

/// Six nested loops over the documented layouts: image `H×W×C`
/// channels-last, kernels `(groups·k·k)×H×W`.
pub fn naive_filter(img: &[f64], h: usize, w: usize, c: usize, ker: &[f64], k: usize, groups: usize, zero: bool) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    let half = (k / 2) as i64;
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let g = if groups == 1 { 0 } else { ch };
                let mut acc = 0.0;
                for u in 0..k {
                    for v in 0..k {
                        let mut y = i as i64 + u as i64 - half;
                        let mut x = j as i64 + v as i64 - half;
                        let inside = y >= 0 && y < h as i64 && x >= 0 && x < w as i64;
                        if !inside {
                            if zero {
                                continue;
                            }
                            y = y.max(0).min(h as i64 - 1);
                            x = x.max(0).min(w as i64 - 1);
                        }
                        let weight = ker[((g * k * k + u * k + v) * h + i) * w + j];
                        acc += weight * img[(y as usize * w + x as usize) * c + ch];
                    }
                }
                out[(i * w + j) * c + ch] = acc;
            }
        }
    }
    out
}

pub fn naive_apply(img: &Image, ker: &KernelField, pad: PaddingPolicy) -> Vec<f64> {
    let (h, w, c) = img.dims();
    naive_filter(img.data(), h, w, c, ker.data(), ker.k(), ker.groups(), pad == PaddingPolicy::Zero)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / (norm(a) + norm(b)).max(1e-12)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter)
}

/// True-positive flags for the first `n` ranked detections, matching each to
/// the best still-free ground truth of its image.
fn prefix_hits(ranked: &[(f64, usize, usize)], preds: &[BoxSet], gts: &[BoxSet], class: u32, thr: f64, n: usize) -> usize {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let mut hits = 0;
    for &(_, img, i) in &ranked[..n] {
        let mut best = None;
        let mut best_iou = thr;
        for (j, gb) in gts[img].boxes.iter().enumerate() {
            if gts[img].classes[j] != class || used[img][j] {
                continue;
            }
            let o = overlap(&preds[img].boxes[i], gb);
            if o >= best_iou && best.is_none() || o > best_iou {
                best = Some(j);
                best_iou = o;
            }
        }
        if let Some(j) = best {
            used[img][j] = true;
            hits += 1;
        }
    }
    hits
}

/// Brute-force mAP: every ranking prefix is re-matched from scratch, and
/// AP averages, over each recall step `j / n_gt`, the best precision of any
/// prefix reaching that recall.
pub fn brute_force_map(preds: &[BoxSet], gts: &[BoxSet], iou_thr: f64, score_thr: f64) -> f64 {
    let mut classes: Vec<u32> = preds.iter().chain(gts).flat_map(|s| s.classes.clone()).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return 1.0;
    }
    let mut total = 0.0;
    for &class in &classes {
        let mut ranked = Vec::new();
        for (img, p) in preds.iter().enumerate() {
            for i in 0..p.boxes.len() {
                let s = p.scores.as_ref().unwrap()[i];
                if p.classes[i] == class && s >= score_thr {
                    ranked.push((s, img, i));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let n_gt: usize = gts.iter().map(|g| g.classes.iter().filter(|&&c| c == class).count()).sum();
        if n_gt == 0 {
            total += if ranked.is_empty() { 1.0 } else { 0.0 };
            continue;
        }
        let curve: Vec<(usize, f64)> = (1..=ranked.len())
            .map(|n| {
                let tp = prefix_hits(&ranked, preds, gts, class, iou_thr, n);
                (tp, tp as f64 / n as f64)
            })
            .collect();
        let mut ap = 0.0;
        for j in 1..=n_gt {
            let best = curve.iter().filter(|(tp, _)| *tp >= j).map(|(_, p)| *p).fold(0.0, f64::max);
            ap += best / n_gt as f64;
        }
        total += ap;
    }
    total / classes.len() as f64
}

/// A random scene: up to `max_boxes` ground-truth boxes and predictions made
/// of jittered copies, duplicates and clutter, over `classes` classes.
pub fn random_scene(r: &mut ChaCha8Rng, max_boxes: usize, classes: u32) -> (BoxSet, BoxSet) {
    let n = r.random_range(0..=max_boxes);
    let mut gt_boxes = Vec::new();
    let mut gt_classes = Vec::new();
    for _ in 0..n {
        let x = r.random_range(0.0..50.0);
        let y = r.random_range(0.0..50.0);
        gt_boxes.push(BBox::new(x, y, x + r.random_range(4.0..20.0), y + r.random_range(4.0..20.0)).unwrap());
        gt_classes.push(r.random_range(0..classes));
    }
    let mut boxes = Vec::new();
    let mut cls = Vec::new();
    let mut scores = Vec::new();
    for (b, &c) in gt_boxes.iter().zip(&gt_classes) {
        for _ in 0..r.random_range(0..3) {
            let j = |r: &mut ChaCha8Rng| r.random_range(-3.0..3.0);
            let x1 = b.x1 + j(r);
            let y1 = b.y1 + j(r);
            boxes.push(BBox::new(x1, y1, x1.max(b.x2 + j(r)).max(x1 + 1.0), y1.max(b.y2 + j(r)).max(y1 + 1.0)).unwrap());
            cls.push(if r.random_bool(0.9) { c } else { r.random_range(0..classes) });
            scores.push((r.random_range(0..20) as f64) / 20.0);
        }
    }
    for _ in 0..r.random_range(0..3) {
        let x = r.random_range(0.0..60.0);
        let y = r.random_range(0.0..60.0);
        boxes.push(BBox::new(x, y, x + r.random_range(3.0..15.0), y + r.random_range(3.0..15.0)).unwrap());
        cls.push(r.random_range(0..classes));
        scores.push((r.random_range(0..20) as f64) / 20.0);
    }
    (
        BoxSet::ground_truth(gt_boxes, gt_classes).unwrap(),
        BoxSet::predictions(boxes, cls, scores).unwrap(),
    )
}
