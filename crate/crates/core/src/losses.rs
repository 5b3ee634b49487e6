//! Training objectives.
//!
//! All reductions are means, so the weight λ keeps the same meaning across
//! image and grid sizes. Each loss has a matching `*_grad` function returning
//! its exact gradient (the subgradient of `|x|` at zero is taken as zero).

use serde::{Deserialize, Serialize};

use crate::detector::{DetTargets, HeadOutputs};
use crate::error::{shape_err, Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 10.0 }
    }
}

/// Per-step breakdown of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_pix: f64,
    pub l_pix_cons: f64,
    pub l_det: f64,
    pub l_det_cons: f64,
    pub total: f64,
}

/// Mean absolute difference.
pub fn l_pix(pred: &Image, target: &Image) -> Result<f64> {
    pred.ensure_same_shape(target, "l_pix")?;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// `∂ l_pix / ∂ pred`.
pub fn l_pix_grad(pred: &Image, target: &Image) -> Result<Vec<f64>> {
    pred.ensure_same_shape(target, "l_pix")?;
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| sign(a - b) / n)
        .collect())
}

/// Consistency between the two translated branches; symmetric.
pub fn l_pix_cons(a: &Image, b: &Image) -> Result<f64> {
    l_pix(a, b)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub fn smooth_l1_scalar(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[inline]
pub fn smooth_l1_derivative(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        sign(x)
    }
}

/// Mean Smooth-L1 over `x`. Zero for an empty slice.
pub fn smooth_l1(x: &[f64]) -> Result<f64> {
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("smooth_l1 got non-finite input {v}")));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(x.iter().map(|&v| smooth_l1_scalar(v)).sum::<f64>() / x.len() as f64)
}

/// Detection loss split into its parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetLoss {
    /// Smooth-L1 over matched anchors, mean over anchors × 4 coordinates.
    pub regression: f64,
    /// Binary cross-entropy on objectness, positives and negatives averaged
    /// separately and summed.
    pub classification: f64,
    pub matched: usize,
}

impl DetLoss {
    pub fn total(&self) -> f64 {
        self.regression + self.classification
    }

    /// No anchor was matched; the loss is the classification term alone.
    pub fn classification_only(&self) -> bool {
        self.matched == 0
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_targets(head: &HeadOutputs, targets: &DetTargets) -> Result<()> {
    if head.channels < 5 || head.grid_h != targets.grid_h || head.grid_w != targets.grid_w {
        return Err(shape_err!(
            "head grid {}x{}x{} does not match targets {}x{}",
            head.channels,
            head.grid_h,
            head.grid_w,
            targets.grid_h,
            targets.grid_w
        ));
    }
    Ok(())
}

/// Detection loss and its gradient with respect to the head outputs.
pub fn l_det_grad(head: &HeadOutputs, targets: &DetTargets) -> Result<(DetLoss, HeadOutputs)> {
    check_targets(head, targets)?;
    if let Some(v) = head.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("detector head produced {v}")));
    }
    let n = head.anchors();
    let n_pos = targets.matched();
    let n_neg = n - n_pos;
    let mut grad = HeadOutputs::zeros_like(head);
    let mut loss = DetLoss {
        matched: n_pos,
        ..Default::default()
    };
    for a in 0..n {
        let z = head.at(0, a);
        if targets.positive[a] {
            let w = 1.0 / n_pos as f64;
            loss.classification += w * softplus(-z);
            *grad.at_mut(0, a) = w * (sigmoid(z) - 1.0);
            let wr = 1.0 / (4 * n_pos) as f64;
            for j in 0..4 {
                let r = head.at(1 + j, a) - targets.regression[a][j];
                loss.regression += wr * smooth_l1_scalar(r);
                *grad.at_mut(1 + j, a) = wr * smooth_l1_derivative(r);
            }
        } else {
            let w = 1.0 / n_neg as f64;
            loss.classification += w * softplus(z);
            *grad.at_mut(0, a) = w * sigmoid(z);
        }
    }
    Ok((loss, grad))
}

pub fn l_det(head: &HeadOutputs, targets: &DetTargets) -> Result<DetLoss> {
    Ok(l_det_grad(head, targets)?.0)
}

/// Smooth-L1 between two dense head maps on the same grid, mean over every
/// element; symmetric.
pub fn l_det_cons(a: &HeadOutputs, b: &HeadOutputs) -> Result<f64> {
    if !a.same_grid(b) {
        return Err(shape_err!("head grids differ"));
    }
    let diff: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    smooth_l1(&diff)
}

/// `∂ l_det_cons / ∂ a`; the gradient for `b` is its negation.
pub fn l_det_cons_grad(a: &HeadOutputs, b: &HeadOutputs) -> Result<HeadOutputs> {
    if !a.same_grid(b) {
        return Err(shape_err!("head grids differ"));
    }
    let n = a.data.len() as f64;
    Ok(HeadOutputs {
        data: a.data.iter().zip(&b.data).map(|(x, y)| smooth_l1_derivative(x - y) / n).collect(),
        ..*a
    })
}

/// `L = l_pix + l_pix_cons + λ (l_det + l_det_cons)`.
pub fn total_loss(
    l_pix: f64,
    l_pix_cons: f64,
    l_det: f64,
    l_det_cons: f64,
    weights: &LossWeights,
) -> Result<LossReport> {
    for (name, v) in [("l_pix", l_pix), ("l_pix_cons", l_pix_cons), ("l_det", l_det), ("l_det_cons", l_det_cons)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Numeric(format!("loss component {name} = {v} violates the non-negative invariant")));
        }
    }
    if !(weights.lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {}", weights.lambda)));
    }
    Ok(LossReport {
        l_pix,
        l_pix_cons,
        l_det,
        l_det_cons,
        total: l_pix + l_pix_cons + weights.lambda * (l_det + l_det_cons),
    })
}
