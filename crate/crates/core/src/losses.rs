//! Segmentation losses and overlap metrics.
//!
//! Loss functions take probabilities `(1,H,W)` and a binary target of the
//! same shape. The `*_on_tape` forms are differentiable in the
//! probabilities; the plain forms evaluate in double precision.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, TensorId};

pub const DICE_EPS: f64 = 1e-6;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.6,
            lambda2: 0.3,
            lambda3: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda1, self.lambda2, self.lambda3];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::config(format!(
                "loss weights must be non-negative with at least one positive, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// Focal loss shape parameters. `alpha: None` disables class balancing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Focal {
    pub gamma: f64,
    pub alpha: Option<f64>,
}

impl Default for Focal {
    fn default() -> Self {
        Focal {
            gamma: 2.0,
            alpha: Some(0.25),
        }
    }
}

impl Focal {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("focal gamma {} must be >= 0", self.gamma)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config(format!("focal alpha {a} outside (0,1]")));
            }
        }
        Ok(())
    }
}

fn check_pair<T: Element>(probs: &[usize], target: &Tensor<T>) -> Result<()> {
    if probs != target.shape() {
        return Err(Error::shape(format!(
            "probabilities {probs:?} vs target {:?}",
            target.shape()
        )));
    }
    if target.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::config("target mask is not binary"));
    }
    Ok(())
}

fn map_target<T: Element>(target: &Tensor<T>, f: impl Fn(f64) -> f64) -> Tensor<T> {
    Tensor::from_fn(target.shape(), |i| T::of(f(target.data()[i].as_f64())))
}

/// `1 − (2Σpy + ε)/(Σp + Σy + ε)`.
pub fn dice_loss_on_tape<T: Element>(tape: &mut Tape<T>, probs: TensorId, target: &Tensor<T>) -> Result<TensorId> {
    check_pair(tape.shape(probs), target)?;
    let y_sum: f64 = target.data().iter().map(|v| v.as_f64()).sum();
    let y = tape.constant(target.clone());
    let py = tape.mul(probs, y)?;
    let inter = tape.sum(py);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let p_sum = tape.sum(probs);
    let den = tape.add_scalar(p_sum, y_sum + DICE_EPS);
    let inv = tape.power(den, -1.0);
    let ratio = tape.mul(num, inv)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean of `−[y log p + (1−y) log(1−p)]` with `p` clamped to `[1e-7, 1−1e-7]`.
pub fn bce_loss_on_tape<T: Element>(tape: &mut Tape<T>, probs: TensorId, target: &Tensor<T>) -> Result<TensorId> {
    check_pair(tape.shape(probs), target)?;
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = tape.log(p)?;
    let neg_p = tape.scale(p, -1.0);
    let q = tape.add_scalar(neg_p, 1.0);
    let log_q = tape.log(q)?;
    let y = tape.constant(target.clone());
    let not_y = tape.constant(map_target(target, |v| 1.0 - v));
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

/// Mean of `−α_t (1−p_t)^γ log p_t`, with the same clamping as BCE.
pub fn focal_loss_on_tape<T: Element>(
    tape: &mut Tape<T>,
    probs: TensorId,
    target: &Tensor<T>,
    focal: Focal,
) -> Result<TensorId> {
    focal.validate()?;
    check_pair(tape.shape(probs), target)?;
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    // p_t = (2y−1)·p + (1−y)
    let sign = tape.constant(map_target(target, |v| 2.0 * v - 1.0));
    let offset = tape.constant(map_target(target, |v| 1.0 - v));
    let sp = tape.mul(sign, p)?;
    let pt = tape.add(sp, offset)?;
    let log_pt = tape.log(pt)?;
    let neg_pt = tape.scale(pt, -1.0);
    let one_minus = tape.add_scalar(neg_pt, 1.0);
    let modulator = tape.power(one_minus, focal.gamma);
    let mut term = tape.mul(modulator, log_pt)?;
    if let Some(alpha) = focal.alpha {
        let at = tape.constant(map_target(target, |v| if v == 1.0 { alpha } else { 1.0 - alpha }));
        term = tape.mul(at, term)?;
    }
    let m = tape.mean(term);
    Ok(tape.scale(m, -1.0))
}

/// Scalar handles for the three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub dice: TensorId,
    pub bce: TensorId,
    pub focal: TensorId,
    pub total: TensorId,
}

pub fn total_loss_on_tape<T: Element>(
    tape: &mut Tape<T>,
    probs: TensorId,
    target: &Tensor<T>,
    weights: LossWeights,
    focal: Focal,
) -> Result<LossNodes> {
    weights.validate()?;
    let dice = dice_loss_on_tape(tape, probs, target)?;
    let bce = bce_loss_on_tape(tape, probs, target)?;
    let foc = focal_loss_on_tape(tape, probs, target, focal)?;
    let a = tape.scale(dice, weights.lambda1);
    let b = tape.scale(bce, weights.lambda2);
    let c = tape.scale(foc, weights.lambda3);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossNodes {
        dice,
        bce,
        focal: foc,
        total,
    })
}

fn eval<F>(probs: &Tensor<f32>, target: &Tensor<f32>, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape<f64>, TensorId, &Tensor<f64>) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let p = tape.constant(probs.cast::<f64>());
    let out = f(&mut tape, p, &target.cast::<f64>())?;
    tape.value(out).item()
}

pub fn dice_loss(probs: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    eval(probs, target, dice_loss_on_tape)
}

pub fn bce_loss(probs: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    eval(probs, target, bce_loss_on_tape)
}

pub fn focal_loss(probs: &Tensor<f32>, target: &Tensor<f32>, focal: Focal) -> Result<f64> {
    eval(probs, target, |t, p, y| focal_loss_on_tape(t, p, y, focal))
}

pub fn total_loss(probs: &Tensor<f32>, target: &Tensor<f32>, weights: LossWeights, focal: Focal) -> Result<f64> {
    eval(probs, target, |t, p, y| Ok(total_loss_on_tape(t, p, y, weights, focal)?.total))
}

/// `1` where `p ≥ threshold`, else `0`.
pub fn binarize(probs: &Tensor<f32>, threshold: f32) -> Tensor<f32> {
    Tensor::from_fn(probs.shape(), |i| if probs.data()[i] >= threshold { 1.0 } else { 0.0 })
}

fn overlap_counts(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (mut inter, mut p, mut t) = (0, 0, 0);
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        if (a != 0.0 && a != 1.0) || (b != 0.0 && b != 1.0) {
            return Err(Error::config("metric inputs must be binary"));
        }
        let (a, b) = (a == 1.0, b == 1.0);
        inter += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    Ok((inter, p, t))
}

/// `2|P∩T|/(|P|+|T|)`; both empty gives 1.
pub fn dsc_metric(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    let (i, p, t) = overlap_counts(pred, target)?;
    Ok(if p + t == 0 { 1.0 } else { 2.0 * i as f64 / (p + t) as f64 })
}

/// `|P∩T|/|P∪T|`; both empty gives 1.
pub fn iou_metric(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    let (i, p, t) = overlap_counts(pred, target)?;
    let union = p + t - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub query_id: String,
    pub dsc: f64,
    pub iou: f64,
}

impl MetricsRow {
    pub fn score(query_id: impl Into<String>, pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<Self> {
        Ok(MetricsRow {
            query_id: query_id.into(),
            dsc: dsc_metric(pred, target)?,
            iou: iou_metric(pred, target)?,
        })
    }
}

/// `(mean dsc, mean iou)`; zeros for an empty slice.
pub fn mean_metrics(rows: &[MetricsRow]) -> (f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0);
    }
    let n = rows.len() as f64;
    (
        rows.iter().map(|r| r.dsc).sum::<f64>() / n,
        rows.iter().map(|r| r.iou).sum::<f64>() / n,
    )
}

/// Tab-separated `id\tdsc\tiou` rows followed by a `MEAN` row.
pub fn format_report(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(out, "{}\t{:.4}\t{:.4}", r.query_id, r.dsc, r.iou);
    }
    let (d, i) = mean_metrics(rows);
    let _ = writeln!(out, "MEAN\t{d:.4}\t{i:.4}");
    out
}
