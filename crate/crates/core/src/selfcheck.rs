//! Fast invariant checks runnable on any install.

use std::fmt::Write as _;

use rand::Rng;
use serde::Serialize;

use crate::detector::{average_precision, iou, BBox, BoxSet, EvalConfig};
use crate::error::Result;
use crate::filter::{apply_pixelwise_filter, filter_gradients};
use crate::imaging::{Image, KernelField, PaddingPolicy};
use crate::losses::{smooth_l1_derivative, smooth_l1_scalar};
use crate::rng::stream;
use crate::stylemix::{sample_mix_plan, StyleMixConfig};

/// Signature of the pixel-wise filter under test.
pub type FilterFn = fn(&Image, &KernelField, PaddingPolicy) -> Result<Image>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub checks: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{:width$}  {status}  {}", c.name, c.detail);
        }
        out
    }
}

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut rng = stream(seed);
    Image::from_fn(h, w, c, |_, _, _| rng.random::<f64>()).expect("finite")
}

fn random_kernels(k: usize, h: usize, w: usize, seed: u64) -> KernelField {
    let mut rng = stream(seed);
    let data = (0..k * k * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    KernelField::new(k, h, w, data).expect("valid layout")
}

/// Direct replicate-padded evaluation, one tap at a time.
fn naive_filter(image: &Image, kernels: &KernelField) -> Image {
    let (h, w, ch) = image.dims();
    let k = kernels.k();
    let r = (k / 2) as isize;
    Image::from_fn(h, w, ch, |y, x, c| {
        let mut acc = 0.0;
        for u in 0..k {
            for v in 0..k {
                let yy = (y as isize + u as isize - r).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + v as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kernels.tap(0, u, v, y, x) * image.get(yy, xx, c);
            }
        }
        acc
    })
    .expect("finite")
}

fn max_diff(a: &Image, b: &Image) -> f64 {
    if !a.same_shape(b) {
        return f64::INFINITY;
    }
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check(name: &'static str, body: impl FnOnce() -> std::result::Result<String, String>) -> CheckResult {
    match body() {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name,
            passed: false,
            detail,
        },
    }
}

fn filter_identity(filter: FilterFn) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for (i, k) in [1usize, 3, 5].into_iter().enumerate() {
        let img = random_image(7, 6, 3, 100 + i as u64);
        let out = filter(&img, &KernelField::identity(k, 7, 6).expect("valid"), PaddingPolicy::Replicate)
            .map_err(|e| e.to_string())?;
        worst = worst.max(max_diff(&out, &img));
    }
    if worst <= 1e-12 {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(format!("delta kernels changed the image by up to {worst:.3e}"))
    }
}

fn filter_oracle(filter: FilterFn) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for i in 0..10u64 {
        let k = [1, 3, 5][i as usize % 3];
        let img = random_image(5 + i as usize % 3, 6, 1 + 2 * (i as usize % 2), 200 + i);
        let ker = random_kernels(k, img.height(), img.width(), 300 + i);
        let out = filter(&img, &ker, PaddingPolicy::Replicate).map_err(|e| e.to_string())?;
        worst = worst.max(max_diff(&out, &naive_filter(&img, &ker)));
    }
    if worst <= 1e-9 {
        Ok(format!("10 instances, max deviation {worst:.1e}"))
    } else {
        Err(format!("filter disagrees with the loop oracle by {worst:.3e}"))
    }
}

fn gradient_spot_check(filter: FilterFn) -> std::result::Result<String, String> {
    let img = random_image(5, 5, 3, 400);
    let ker = random_kernels(3, 5, 5, 401);
    let up = random_image(5, 5, 3, 402);
    let pad = PaddingPolicy::Replicate;
    let (gi, gk) = filter_gradients(&img, &ker, &up, pad).map_err(|e| e.to_string())?;
    let objective = |img: &Image, ker: &KernelField| -> std::result::Result<f64, String> {
        let out = filter(img, ker, pad).map_err(|e| e.to_string())?;
        Ok(out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum())
    };
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for idx in [0usize, 17, 40, 74] {
        let mut plus = img.clone();
        plus.data_mut()[idx] += eps;
        let mut minus = img.clone();
        minus.data_mut()[idx] -= eps;
        let fd = (objective(&plus, &ker)? - objective(&minus, &ker)?) / (2.0 * eps);
        worst = worst.max((fd - gi.data()[idx]).abs() / fd.abs().max(1.0));
    }
    for idx in [0usize, 33, 120, 224] {
        let mut plus = ker.clone();
        plus.data_mut()[idx] += eps;
        let mut minus = ker.clone();
        minus.data_mut()[idx] -= eps;
        let fd = (objective(&img, &plus)? - objective(&img, &minus)?) / (2.0 * eps);
        worst = worst.max((fd - gk.data()[idx]).abs() / fd.abs().max(1.0));
    }
    if worst < 1e-6 {
        Ok(format!("8 entries, max rel. error {worst:.1e}"))
    } else {
        Err(format!("analytic and numeric gradients differ by {worst:.3e}"))
    }
}

fn dirichlet_simplex() -> std::result::Result<String, String> {
    let cfg = StyleMixConfig::default();
    for seed in 0..100 {
        let plan = sample_mix_plan(&cfg, 5, 4, 4, seed).map_err(|e| e.to_string())?;
        plan.check_simplex(1e-9).map_err(|e| format!("seed {seed}: {e}"))?;
        if plan.chains.len() != 3 || plan.chains.iter().any(|c| c.is_empty() || c.len() > 2) {
            return Err(format!("seed {seed}: bad chain structure {:?}", plan.chains));
        }
    }
    Ok("100 plans on the simplex".into())
}

fn smooth_l1_knee() -> std::result::Result<String, String> {
    let pass = smooth_l1_scalar(0.0) == 0.0
        && smooth_l1_scalar(1.0) == 0.5
        && smooth_l1_scalar(-1.0) == 0.5
        && smooth_l1_scalar(2.0) == 1.5
        && (smooth_l1_scalar(1.0 - 1e-12) - smooth_l1_scalar(1.0 + 1e-12)).abs() < 1e-9
        && (smooth_l1_derivative(1.0 - 1e-12) - smooth_l1_derivative(1.0 + 1e-12)).abs() < 1e-9;
    if pass {
        Ok("values and slope agree at |x| = 1".into())
    } else {
        Err("smooth L1 is wrong at or around the knee".into())
    }
}

fn iou_cases() -> std::result::Result<String, String> {
    let b = |x1, y1, x2, y2| BBox::new(x1, y1, x2, y2).expect("valid");
    let unit = b(0.0, 0.0, 1.0, 1.0);
    let same = iou(&unit, &unit).map_err(|e| e.to_string())?;
    let apart = iou(&unit, &b(2.0, 2.0, 3.0, 3.0)).map_err(|e| e.to_string())?;
    let half = iou(&unit, &b(0.5, 0.0, 1.5, 1.0)).map_err(|e| e.to_string())?;
    let degenerate = iou(
        &unit,
        &BBox {
            x1: 1.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        },
    );
    if same == 1.0 && apart == 0.0 && (half - 1.0 / 3.0).abs() < 1e-12 && degenerate.is_err() {
        Ok("identical, disjoint, partial and degenerate".into())
    } else {
        Err(format!("got {same}, {apart}, {half}, degenerate ok: {}", degenerate.is_ok()))
    }
}

fn ap_analytic() -> std::result::Result<String, String> {
    let b = |x1, y1, x2, y2| BBox::new(x1, y1, x2, y2).expect("valid");
    let gt = BoxSet::ground_truth(vec![b(0.0, 0.0, 10.0, 10.0), b(20.0, 20.0, 30.0, 30.0)], vec![0, 0])
        .expect("valid");
    let perfect = BoxSet::predictions(gt.boxes.clone(), vec![0, 0], vec![1.0, 1.0]).expect("valid");
    let half = BoxSet::predictions(vec![gt.boxes[0]], vec![0], vec![0.9]).expect("valid");
    let cfg = EvalConfig::default();
    let p = average_precision(&[perfect], &[gt.clone()], &cfg).map_err(|e| e.to_string())?.map;
    let h = average_precision(&[half], &[gt], &cfg).map_err(|e| e.to_string())?.map;
    if (p - 1.0).abs() < 1e-12 && (h - 0.5).abs() < 1e-12 {
        Ok("perfect 1.0, half recall 0.5".into())
    } else {
        Err(format!("perfect gave {p}, half recall gave {h}"))
    }
}

/// Runs every check against `filter`.
pub fn run_with(filter: FilterFn) -> SelfCheckReport {
    SelfCheckReport {
        checks: vec![
            check("filter-identity", || filter_identity(filter)),
            check("filter-oracle", || filter_oracle(filter)),
            check("gradient-spot-check", || gradient_spot_check(filter)),
            check("dirichlet-simplex", dirichlet_simplex),
            check("smooth-l1-knee", smooth_l1_knee),
            check("iou-cases", iou_cases),
            check("ap-analytic", ap_analytic),
        ],
    }
}

pub fn run() -> SelfCheckReport {
    run_with(apply_pixelwise_filter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_build_passes() {
        let report = run();
        assert!(report.checks.len() >= 5);
        assert!(report.all_passed(), "{}", report.table());
    }
}
