//! Per-sample losses on logit rows, each returning the loss and its gradient
//! with respect to the logits.

use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Which distribution comes first in the KL divergence used for extraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(surrogate || source)`, argument order as in the extraction objective.
    #[default]
    SurrogateFirst,
    /// `KL(source || surrogate)`, the usual distillation convention.
    SourceFirst,
}

/// Probability vector `e^{z_k} / sum_j e^{z_j}`.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Numeric("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into<T: Real>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

pub(crate) fn log_softmax_into<T: Real>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

/// `-log softmax(z)_label`; gradient `softmax(z) - onehot(label)`, scaled by
/// `scale` and accumulated into `grad`.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize, scale: T, grad: Option<&mut [T]>) -> T {
    let mut logp = vec![T::zero(); logits.len()];
    log_softmax_into(logits, &mut logp);
    if let Some(g) = grad {
        for (j, (gj, &lp)) in g.iter_mut().zip(&logp).enumerate() {
            let target = if j == label { T::one() } else { T::zero() };
            *gj += scale * (lp.exp() - target);
        }
    }
    -logp[label]
}

/// KL divergence between `softmax(student / temperature)` and a teacher given
/// by its log-probabilities. Gradient w.r.t. the student logits is scaled
/// by `scale` and accumulated into `grad`.
pub fn kl_divergence<T: Real>(
    student_logits: &[T],
    teacher_logp: &[T],
    direction: KlDirection,
    temperature: T,
    scale: T,
    grad: Option<&mut [T]>,
) -> T {
    let k = student_logits.len();
    let scaled: Vec<T> = student_logits.iter().map(|&z| z / temperature).collect();
    let mut logq = vec![T::zero(); k];
    log_softmax_into(&scaled, &mut logq);
    match direction {
        KlDirection::SurrogateFirst => {
            let mut kl = T::zero();
            for (&lq, &lp) in logq.iter().zip(teacher_logp) {
                kl += lq.exp() * (lq - lp);
            }
            if let Some(g) = grad {
                for ((gj, &lq), &lp) in g.iter_mut().zip(&logq).zip(teacher_logp) {
                    *gj += scale * lq.exp() * (lq - lp - kl) / temperature;
                }
            }
            kl
        }
        KlDirection::SourceFirst => {
            let mut kl = T::zero();
            for (&lq, &lp) in logq.iter().zip(teacher_logp) {
                let p = lp.exp();
                if p > T::zero() {
                    kl += p * (lp - lq);
                }
            }
            if let Some(g) = grad {
                for ((gj, &lq), &lp) in g.iter_mut().zip(&logq).zip(teacher_logp) {
                    *gj += scale * (lq.exp() - lp.exp()) / temperature;
                }
            }
            kl
        }
    }
}
