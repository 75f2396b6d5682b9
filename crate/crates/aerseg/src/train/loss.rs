//! Hybrid segmentation loss: pixel-wise cross entropy plus soft Dice,
//! each with exact gradients with respect to the logits.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::types::{ClassMask, IGNORE_INDEX};

const DICE_SMOOTH: f64 = 1.0;

fn check_shapes<T: Real>(scores: &Tensor<T>, target: &ClassMask) -> Result<usize> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != target.width * target.height {
        return Err(Error::ShapeMismatch(format!(
            "scores {shape:?} vs mask {}x{}",
            target.width, target.height
        )));
    }
    Ok(shape[1])
}

/// Mean over non-sentinel pixels of the negative log softmax at the target
/// class. Returns the loss and its gradient w.r.t. the logits.
pub fn cross_entropy_loss<T: Real>(
    logits: &Tensor<T>,
    target: &ClassMask,
) -> Result<(T, Tensor<T>)> {
    let k = check_shapes(logits, target)?;
    let scored = target.data().iter().filter(|&&t| t != IGNORE_INDEX).count();
    if scored == 0 {
        return Err(Error::AllPixelsIgnored);
    }
    let inv_m = T::from_f64(1.0 / scored as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.numel()];
    for (i, &t) in target.data().iter().enumerate() {
        if t == IGNORE_INDEX {
            continue;
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in row {
            sum = sum + (v - max).exp();
        }
        let log_sum = sum.ln() + max;
        loss = loss + (log_sum - row[t as usize]) * inv_m;
        for (c, &v) in row.iter().enumerate() {
            let p = (v - log_sum).exp();
            let onehot = if c == t as usize { T::one() } else { T::zero() };
            grad[i * k + c] = (p - onehot) * inv_m;
        }
    }
    Ok((loss, Tensor::new(vec![logits.shape()[0], k], grad)))
}

/// Soft Dice loss over probabilities: per class `1 - (2*I + s)/(P + G + s)`
/// with smoothing `s = 1`, macro-averaged over classes present in the target
/// or the prediction. Returns the loss and its gradient w.r.t. the
/// probabilities.
pub fn dice_loss<T: Real>(probs: &Tensor<T>, target: &ClassMask) -> Result<(T, Tensor<T>)> {
    let k = check_shapes(probs, target)?;
    let n = probs.shape()[0];
    if target.data().iter().all(|&t| t == IGNORE_INDEX) {
        return Err(Error::AllPixelsIgnored);
    }
    let s = T::from_f64(DICE_SMOOTH);
    let mut inter = vec![T::zero(); k];
    let mut pmass = vec![T::zero(); k];
    let mut gmass = vec![T::zero(); k];
    for (i, &t) in target.data().iter().enumerate() {
        if t == IGNORE_INDEX {
            continue;
        }
        let row = &probs.data()[i * k..(i + 1) * k];
        for c in 0..k {
            pmass[c] = pmass[c] + row[c];
        }
        inter[t as usize] = inter[t as usize] + row[t as usize];
        gmass[t as usize] = gmass[t as usize] + T::one();
    }
    let present: Vec<usize> =
        (0..k).filter(|&c| gmass[c] > T::zero() || pmass[c] > T::zero()).collect();
    let inv_n = T::from_f64(1.0 / present.len() as f64);
    let mut loss = T::zero();
    let mut dnum_dcoef = vec![T::zero(); k]; // d loss / d (2I+s) scaled pieces
    let mut denom_inv = vec![T::zero(); k];
    let mut numer = vec![T::zero(); k];
    for &c in &present {
        let num = T::from_f64(2.0) * inter[c] + s;
        let den = pmass[c] + gmass[c] + s;
        loss = loss + (T::one() - num / den) * inv_n;
        numer[c] = num;
        denom_inv[c] = den.recip();
        dnum_dcoef[c] = T::one();
    }
    let mut grad = vec![T::zero(); probs.numel()];
    for (i, &t) in target.data().iter().enumerate() {
        if t == IGNORE_INDEX {
            continue;
        }
        for &c in &present {
            // d/dp_ic of num/den: (2*g_ic*den - num) / den^2
            let g_ic = if c == t as usize { T::one() } else { T::zero() };
            let d = (T::from_f64(2.0) * g_ic * denom_inv[c]
                - numer[c] * denom_inv[c] * denom_inv[c])
                * inv_n;
            grad[i * k + c] = -d;
        }
    }
    Ok((loss, Tensor::new(vec![n, k], grad)))
}

/// Cross entropy plus `dice_weight` times Dice, with the Dice term chained
/// through the softmax so the returned gradient is w.r.t. the logits.
pub fn hybrid_loss<T: Real>(
    logits: &Tensor<T>,
    target: &ClassMask,
    dice_weight: T,
) -> Result<(T, Tensor<T>)> {
    let k = check_shapes(logits, target)?;
    let n = logits.shape()[0];
    let (ce, mut grad) = cross_entropy_loss(logits, target)?;
    if dice_weight == T::zero() {
        return Ok((ce, grad));
    }
    // softmax probabilities
    let mut probs = vec![T::zero(); logits.numel()];
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (c, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[i * k + c] = e;
            sum = sum + e;
        }
        for c in 0..k {
            probs[i * k + c] = probs[i * k + c] / sum;
        }
    }
    let probs = Tensor::new(vec![n, k], probs);
    let (dl, dgrad_p) = dice_loss(&probs, target)?;
    // chain rule through softmax: dL/dz_c = p_c * (dL/dp_c - sum_j dL/dp_j p_j)
    for i in 0..n {
        let prow = &probs.data()[i * k..(i + 1) * k];
        let dprow = &dgrad_p.data()[i * k..(i + 1) * k];
        let dot: T = prow.iter().zip(dprow).map(|(&p, &d)| p * d).sum();
        for c in 0..k {
            grad.data_mut()[i * k + c] =
                grad.data()[i * k + c] + dice_weight * prow[c] * (dprow[c] - dot);
        }
    }
    Ok((ce + dice_weight * dl, grad))
}
