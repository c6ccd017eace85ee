//! Cross-entropy objectives on probability maps and their weighted sum.

use crate::aggregation::WeightMap;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::numerics::ops::{upsample, upsample_backward};
use crate::numerics::{Tensor, UpsampleMode};

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.4, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (what, v) in [("alpha", alpha), ("beta", beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Range {
                    what,
                    value: v,
                    lo: 0.0,
                    hi: f64::INFINITY,
                });
            }
        }
        Ok(LossWeights { alpha, beta })
    }
}

fn nll(p: f64) -> f64 {
    -p.clamp(PROB_FLOOR, 1.0).ln()
}

fn nll_grad(p: f64) -> f64 {
    if (PROB_FLOOR..=1.0).contains(&p) {
        -1.0 / p
    } else {
        0.0
    }
}

fn check_map(op: &'static str, probs: &Tensor, gt: &LabelMap) -> Result<(usize, usize)> {
    if probs.rank() != 3 || probs.shape()[1] != gt.height || probs.shape()[2] != gt.width {
        return Err(Error::dim(
            op,
            format!("probabilities {:?} vs labels {}x{}", probs.shape(), gt.height, gt.width),
        ));
    }
    let k = probs.channels();
    gt.validate(k)?;
    let valid = gt.data.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return Err(Error::Validation(format!("{op}: every pixel is ignored")));
    }
    Ok((k, valid))
}

/// Mean cross-entropy of a `K×H×W` probability map against labels, over
/// non-ignored pixels.
pub fn cross_entropy_map(probs: &Tensor, gt: &LabelMap) -> Result<f64> {
    let (_, valid) = check_map("cross_entropy", probs, gt)?;
    let n = gt.len();
    let d = probs.data();
    let sum: f64 = gt
        .data
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE_LABEL)
        .map(|(p, &l)| nll(d[l as usize * n + p]))
        .sum();
    Ok(sum / valid as f64)
}

/// [`cross_entropy_map`] together with its gradient w.r.t. `probs`.
pub fn cross_entropy_map_grad(probs: &Tensor, gt: &LabelMap) -> Result<(f64, Tensor)> {
    let (_, valid) = check_map("cross_entropy", probs, gt)?;
    let n = gt.len();
    let scale = 1.0 / valid as f64;
    let d = probs.data();
    let mut grad = Tensor::zeros(probs.shape());
    let mut sum = 0.0;
    for (p, &l) in gt.data.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let i = l as usize * n + p;
        sum += nll(d[i]);
        grad.data_mut()[i] = nll_grad(d[i]) * scale;
    }
    Ok((sum * scale, grad))
}

/// Cross-entropy of the weight map, upsampled by `stride`, against full-resolution labels.
pub fn loss_w(w: &WeightMap, gt: &LabelMap, stride: usize) -> Result<f64> {
    cross_entropy_map(&upsample(&w.probs, stride, UpsampleMode::Bilinear)?, gt)
}

/// [`loss_w`] and its gradient w.r.t. the feature-resolution weight map.
pub fn loss_w_grad(probs: &Tensor, gt: &LabelMap, stride: usize) -> Result<(f64, Tensor)> {
    let up = upsample(probs, stride, UpsampleMode::Bilinear)?;
    let (l, g) = cross_entropy_map_grad(&up, gt)?;
    Ok((l, upsample_backward(&g, stride, UpsampleMode::Bilinear)))
}

fn check_mem_probs(o_mem: &Tensor) -> Result<usize> {
    let k = o_mem.shape()[0];
    if o_mem.rank() != 2 || o_mem.shape()[1] != k || k < 2 {
        return Err(Error::dim(
            "loss_M",
            format!("expected K×K class probabilities with K ≥ 2, got {:?}", o_mem.shape()),
        ));
    }
    Ok(k)
}

/// Each memory row (row `k` of `o_mem`) should be classified as class `k`.
pub fn loss_m(o_mem: &Tensor) -> Result<f64> {
    let k = check_mem_probs(o_mem)?;
    Ok((0..k).map(|i| nll(o_mem.at2(i, i))).sum::<f64>() / k as f64)
}

pub fn loss_m_grad(o_mem: &Tensor) -> Result<(f64, Tensor)> {
    let k = check_mem_probs(o_mem)?;
    let mut grad = Tensor::zeros(o_mem.shape());
    for i in 0..k {
        grad.data_mut()[i * k + i] = nll_grad(o_mem.at2(i, i)) / k as f64;
    }
    Ok((loss_m(o_mem)?, grad))
}

pub fn loss_o(o: &Tensor, gt: &LabelMap) -> Result<f64> {
    cross_entropy_map(o, gt)
}

pub fn total_loss(lw: f64, lm: f64, lo: f64, weights: &LossWeights) -> f64 {
    weights.alpha * lw + weights.beta * lm + lo
}
