//! Segmentation losses over `(B, 1, H, W)` logits and binary targets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Var};
use crate::error::{Error, Result};
use crate::tensor::{lit, Float, Tensor};

pub const IOU_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BceIou,
    Bbce,
}

/// Scalar loss values for logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

/// A loss on the tape together with its named parts.
#[derive(Debug, Clone)]
pub struct LossTerms<'t, T: Float> {
    pub total: Var<'t, T>,
    pub components: Vec<(&'static str, Var<'t, T>)>,
}

impl<T: Float> LossTerms<'_, T> {
    pub fn value(&self) -> LossValue {
        LossValue {
            total: self.total.value().item().as_f64(),
            components: self
                .components
                .iter()
                .map(|(k, v)| (k.to_string(), v.value().item().as_f64()))
                .collect(),
        }
    }
}

fn check_target<T: Float>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    let (_, c, _, _) = logits.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("loss: logits must have one channel, got {:?}", logits.shape())));
    }
    if logits.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "loss: logits {:?} and target {:?} differ",
            logits.shape(),
            target.shape()
        )));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Validation(format!("loss: target value {v} is not 0 or 1")));
    }
    Ok(())
}

/// `ln(1 + e^x)` without overflow.
fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Mean of `w_pos * y * softplus(-x) + w_neg * (1 - y) * softplus(x)`.
fn weighted_bce<'t, T: Float>(logits: Var<'t, T>, target: &Tensor<T>, w_pos: T, w_neg: T) -> Var<'t, T> {
    let x = logits.value();
    let n = lit::<T>(x.numel() as f64);
    let total: T = x
        .data()
        .iter()
        .zip(target.data())
        .map(|(&xi, &yi)| w_pos * yi * softplus(-xi) + w_neg * (T::one() - yi) * softplus(xi))
        .sum();
    let target = target.clone();
    logits.tape().op(Tensor::scalar(total / n), &[logits], move |g, needs| {
        if !needs[0] {
            return vec![None];
        }
        let scale = g.item() / n;
        let grad = Tensor::from_fn(x.shape(), |i| {
            let (xi, yi) = (x.data()[i], target.data()[i]);
            let p = sigmoid(xi);
            scale * (w_pos * yi * (p - T::one()) + w_neg * (T::one() - yi) * p)
        });
        vec![Some(grad)]
    })
}

/// Binary cross-entropy from logits, averaged over every element.
pub fn bce_loss<'t, T: Float>(logits: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    check_target(&logits.value(), target)?;
    Ok(weighted_bce(logits, target, T::one(), T::one()))
}

/// `1 - (I + eps) / (U + eps)` per image, averaged over the batch.
pub fn iou_loss<'t, T: Float>(logits: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let x = logits.value();
    check_target(&x, target)?;
    let (b, ..) = x.dims4()?;
    let per = x.numel() / b;
    let eps = lit::<T>(IOU_EPS);
    // (inter + eps, union + eps) per image
    let stats: Vec<(T, T)> = (0..b)
        .map(|i| {
            let (mut inter, mut sp, mut sy) = (T::zero(), T::zero(), T::zero());
            for k in i * per..(i + 1) * per {
                let p = sigmoid(x.data()[k]);
                let y = target.data()[k];
                inter += p * y;
                sp += p;
                sy += y;
            }
            (inter + eps, sp + sy - inter + eps)
        })
        .collect();
    let bf = lit::<T>(b as f64);
    let value = stats.iter().map(|&(i, u)| T::one() - i / u).sum::<T>() / bf;
    let target = target.clone();
    Ok(logits.tape().op(Tensor::scalar(value), &[logits], move |g, needs| {
        if !needs[0] {
            return vec![None];
        }
        let scale = g.item() / bf;
        let grad = Tensor::from_fn(x.shape(), |k| {
            let (inter, union) = stats[k / per];
            let p = sigmoid(x.data()[k]);
            let y = target.data()[k];
            // d/dp of -(I/U), with dI/dp = y and dU/dp = 1 - y
            let d_p = -(y * union - inter * (T::one() - y)) / (union * union);
            scale * d_p * p * (T::one() - p)
        });
        vec![Some(grad)]
    }))
}

/// BCE and IoU with equal weight.
pub fn bce_iou_loss<'t, T: Float>(logits: Var<'t, T>, target: &Tensor<T>) -> Result<LossTerms<'t, T>> {
    let bce = bce_loss(logits, target)?;
    let iou = iou_loss(logits, target)?;
    Ok(LossTerms {
        total: bce.add(iou)?,
        components: vec![("bce", bce), ("iou", iou)],
    })
}

/// Class-balanced BCE with `alpha = N_neg / N` over the whole batch.
/// Targets with a single class fall back to plain BCE.
pub fn bbce_loss<'t, T: Float>(logits: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    check_target(&logits.value(), target)?;
    let n = target.numel();
    let n_pos = target.data().iter().filter(|&&y| y == T::one()).count();
    if n_pos == 0 || n_pos == n {
        return Ok(weighted_bce(logits, target, T::one(), T::one()));
    }
    let alpha = lit::<T>((n - n_pos) as f64 / n as f64);
    Ok(weighted_bce(logits, target, alpha, T::one() - alpha))
}

pub fn compute<'t, T: Float>(kind: LossKind, logits: Var<'t, T>, target: &Tensor<T>) -> Result<LossTerms<'t, T>> {
    match kind {
        LossKind::BceIou => bce_iou_loss(logits, target),
        LossKind::Bbce => {
            let l = bbce_loss(logits, target)?;
            Ok(LossTerms {
                total: l,
                components: vec![("bbce", l)],
            })
        }
    }
}
