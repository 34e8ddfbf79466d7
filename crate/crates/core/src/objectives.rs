//! Loss terms: pixel cross-entropy, soft Dice, their supervised average,
//! pseudo-label consistency, and the scheduled total.

use ndarray::{Array4, ArrayView3, ArrayView4};

use crate::error::{Error, Result};
use crate::semi::{pseudo_label, Prediction};

/// Smoothing added to numerator and denominator of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Softmax over the class axis of [B,K,H,W] logits.
pub fn softmax_probs(logits: &ArrayView4<'_, f64>) -> Array4<f64> {
    let (b, k, h, w) = logits.dim();
    let mut out = Array4::zeros((b, k, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut m = f64::NEG_INFINITY;
                for c in 0..k {
                    m = m.max(logits[(bi, c, i, j)]);
                }
                let mut z = 0.0;
                for c in 0..k {
                    let e = (logits[(bi, c, i, j)] - m).exp();
                    out[(bi, c, i, j)] = e;
                    z += e;
                }
                for c in 0..k {
                    out[(bi, c, i, j)] /= z;
                }
            }
        }
    }
    out
}

fn check_labels(logits: &ArrayView4<'_, f64>, labels: &ArrayView3<'_, u8>) -> Result<()> {
    let (b, k, h, w) = logits.dim();
    if labels.dim() != (b, h, w) {
        return Err(Error::Dimension(format!(
            "labels {:?} do not match logits [{b},{k},{h},{w}]",
            labels.dim()
        )));
    }
    for &v in labels.iter() {
        if v as usize >= k {
            return Err(Error::Argument(format!(
                "label {v} out of range for {k} classes"
            )));
        }
    }
    Ok(())
}

/// Mean over all pixels of −log p(true class), with the gradient in
/// logit space: (p − onehot) / pixel count.
pub fn ce_loss_grad(
    logits: &ArrayView4<'_, f64>,
    labels: &ArrayView3<'_, u8>,
) -> Result<(f64, Array4<f64>)> {
    check_labels(logits, labels)?;
    let (b, _, h, w) = logits.dim();
    let n = (b * h * w) as f64;
    let probs = softmax_probs(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let y = labels[(bi, i, j)] as usize;
                loss -= probs[(bi, y, i, j)].max(f64::MIN_POSITIVE).ln();
                grad[(bi, y, i, j)] -= 1.0;
            }
        }
    }
    grad.mapv_inplace(|g| g / n);
    Ok((loss / n, grad))
}

pub fn ce_loss(logits: &ArrayView4<'_, f64>, labels: &ArrayView3<'_, u8>) -> Result<f64> {
    Ok(ce_loss_grad(logits, labels)?.0)
}

/// 1 − mean per-class soft Dice of softmax probabilities against the
/// one-hot labels, sums taken over the whole batch.
pub fn dice_loss_grad(
    logits: &ArrayView4<'_, f64>,
    labels: &ArrayView3<'_, u8>,
) -> Result<(f64, Array4<f64>)> {
    check_labels(logits, labels)?;
    let (b, k, h, w) = logits.dim();
    let probs = softmax_probs(logits);
    let mut inter = vec![0.0f64; k];
    let mut psum = vec![0.0f64; k];
    let mut gsum = vec![0.0f64; k];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let y = labels[(bi, i, j)] as usize;
                gsum[y] += 1.0;
                inter[y] += probs[(bi, y, i, j)];
                for c in 0..k {
                    psum[c] += probs[(bi, c, i, j)];
                }
            }
        }
    }
    let mut loss = 1.0;
    // d(dice_c)/d(prob_c at x) = (2·g_x·den − num) / den²; the loss takes
    // −1/K of that, then the softmax Jacobian maps it to logit space.
    let mut num = vec![0.0f64; k];
    let mut den = vec![0.0f64; k];
    for c in 0..k {
        num[c] = 2.0 * inter[c] + DICE_EPS;
        den[c] = psum[c] + gsum[c] + DICE_EPS;
        loss -= num[c] / den[c] / k as f64;
    }
    let mut grad = Array4::zeros((b, k, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let y = labels[(bi, i, j)] as usize;
                let mut dot = 0.0;
                let mut dp = vec![0.0f64; k];
                for c in 0..k {
                    let g = if c == y { 1.0 } else { 0.0 };
                    dp[c] = -(2.0 * g * den[c] - num[c]) / (den[c] * den[c]) / k as f64;
                    dot += dp[c] * probs[(bi, c, i, j)];
                }
                for c in 0..k {
                    grad[(bi, c, i, j)] = probs[(bi, c, i, j)] * (dp[c] - dot);
                }
            }
        }
    }
    Ok((loss, grad))
}

pub fn dice_loss(logits: &ArrayView4<'_, f64>, labels: &ArrayView3<'_, u8>) -> Result<f64> {
    Ok(dice_loss_grad(logits, labels)?.0)
}

/// Supervised loss ½·(CE + Dice) over the labeled prefix of the batch.
/// `masks` may cover fewer items than the prediction; the returned
/// gradient is zero on the unlabeled remainder.
pub fn sup_loss_grad(
    pred: &Prediction,
    masks: &ArrayView3<'_, u8>,
) -> Result<(f64, Array4<f64>)> {
    let (b, k, h, w) = pred.logits.dim();
    let l = masks.dim().0;
    if l == 0 || l > b {
        return Err(Error::Argument(format!(
            "labeled prefix of {l} items does not fit a batch of {b}"
        )));
    }
    let labeled = pred.logits.slice(ndarray::s![..l, .., .., ..]);
    let (ce, gce) = ce_loss_grad(&labeled, masks)?;
    let (dc, gdc) = dice_loss_grad(&labeled, masks)?;
    let mut grad = Array4::zeros((b, k, h, w));
    grad.slice_mut(ndarray::s![..l, .., .., ..])
        .assign(&(0.5 * (&gce + &gdc)));
    Ok((0.5 * (ce + dc), grad))
}

pub fn sup_loss(pred: &Prediction, masks: &ArrayView3<'_, u8>) -> Result<f64> {
    Ok(sup_loss_grad(pred, masks)?.0)
}

/// Consistency loss: CE of the target's logits against the argmax pseudo
/// label of the source, over batch items from `from` on (the unlabeled
/// tail; pass 0 to include labeled images). The pseudo label is data;
/// the gradient belongs to the target only.
pub fn semi_loss_grad(
    target: &Prediction,
    source: &Prediction,
    from: usize,
) -> Result<(f64, Array4<f64>)> {
    if target.source == source.source {
        return Err(Error::Config(format!(
            "handle {} cannot pseudo-supervise itself",
            target.source
        )));
    }
    let (b, k, h, w) = target.logits.dim();
    if source.logits.dim() != (b, k, h, w) {
        return Err(Error::Dimension(format!(
            "source logits {:?} do not match target {:?}",
            source.logits.dim(),
            target.logits.dim()
        )));
    }
    if from >= b {
        return Ok((0.0, Array4::zeros((b, k, h, w))));
    }
    let tail = target.logits.slice(ndarray::s![from.., .., .., ..]);
    let pseudo = pseudo_label(&source.logits.slice(ndarray::s![from.., .., .., ..]));
    let (loss, gtail) = ce_loss_grad(&tail, &pseudo.view())?;
    let mut grad = Array4::zeros((b, k, h, w));
    grad.slice_mut(ndarray::s![from.., .., .., ..]).assign(&gtail);
    Ok((loss, grad))
}

pub fn semi_loss(target: &Prediction, source: &Prediction, from: usize) -> Result<f64> {
    Ok(semi_loss_grad(target, source, from)?.0)
}

/// One training iteration's loss terms. Slot 1 carries the first term of
/// each kind, slot 2 the sum of the rest, so the total identity
/// total = sup1 + sup2 + λ1·(semi1+semi2) + λ2·(semi3+semi4) holds for
/// any number of wired terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub sup1: f64,
    pub sup2: f64,
    pub semi1: f64,
    pub semi2: f64,
    pub semi3: f64,
    pub semi4: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn tsv_header() -> &'static str {
        "iteration\tsup1\tsup2\tsemi1\tsemi2\tsemi3\tsemi4\tlambda1\tlambda2\ttotal"
    }

    pub fn tsv_row(&self, iteration: u64) -> String {
        format!(
            "{iteration}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.sup1,
            self.sup2,
            self.semi1,
            self.semi2,
            self.semi3,
            self.semi4,
            self.lambda1,
            self.lambda2,
            self.total
        )
    }
}

/// Raw term values grouped by weighting: supervised terms, consistency
/// terms between learners (under λ1) and consistency terms sourced from
/// a teacher (under λ2).
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub sup: Vec<f64>,
    pub semi_learner: Vec<f64>,
    pub semi_teacher: Vec<f64>,
}

fn two_slots(terms: &[f64]) -> (f64, f64) {
    let first = terms.first().copied().unwrap_or(0.0);
    (first, terms.iter().skip(1).sum())
}

pub fn total_loss(parts: &LossParts, lambda1: f64, lambda2: f64) -> LossBreakdown {
    let (sup1, sup2) = two_slots(&parts.sup);
    let (semi1, semi2) = two_slots(&parts.semi_learner);
    let (semi3, semi4) = two_slots(&parts.semi_teacher);
    LossBreakdown {
        sup1,
        sup2,
        semi1,
        semi2,
        semi3,
        semi4,
        lambda1,
        lambda2,
        total: sup1 + sup2 + lambda1 * (semi1 + semi2) + lambda2 * (semi3 + semi4),
    }
}

/// One-hot ground truth as probabilities, used by tests and oracles.
pub fn one_hot(labels: &ArrayView3<'_, u8>, k: usize) -> Array4<f64> {
    let (b, h, w) = labels.dim();
    let mut out = Array4::zeros((b, k, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                out[(bi, labels[(bi, i, j)] as usize, i, j)] = 1.0;
            }
        }
    }
    out
}
