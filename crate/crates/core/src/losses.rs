//! Training objectives over per-pixel foreground probabilities.
//!
//! Every loss comes with an exact gradient with respect to its probability
//! inputs. All functions accept arrays of any dimensionality, so the same code
//! serves single slices `(H, W)` and batches `(N, H, W)`. Means are taken over
//! every element.

use ndarray::{Array, Array2, ArrayView, ArrayView2, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside log terms.
pub const PROB_EPS: f64 = 1e-7;
/// Additive smoothing in the Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

/// Per-pixel foreground probabilities of one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    data: Array2<f64>,
}

impl ProbMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(((r, c), v)) = data.indexed_iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("probability {v} at ({r}, {c}) outside [0, 1]")));
        }
        Ok(Self { data })
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Fixed 0.5 binarization.
    pub fn to_mask(&self) -> crate::data::Mask {
        crate::data::Mask::from_probs(self.view(), 0.5)
    }
}

/// Loss coefficients: `lambda_u` weighs the unlabeled consistency term,
/// `alpha` the two-pass KL term of the supervised loss, `gamma` the CE term of
/// the adaptation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_u: 1.0,
            alpha: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_u", self.lambda_u), ("alpha", self.alpha), ("gamma", self.gamma)] {
            ensure!(v.is_finite() && v >= 0.0, Config, "loss weight {name} = {v} must be finite and >= 0");
        }
        Ok(())
    }
}

fn check_shapes<D: Dimension>(a: &ArrayView<'_, f64, D>, b: &ArrayView<'_, f64, D>) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        Validation,
        "shape mismatch: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    ensure!(!a.is_empty(), Validation, "loss over an empty array");
    Ok(())
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Derivative of the clamp: 1 strictly inside the interval, 0 on the flat parts.
#[inline]
fn clamp_slope(p: f64) -> f64 {
    if p > PROB_EPS && p < 1.0 - PROB_EPS {
        1.0
    } else {
        0.0
    }
}

/// Mean binary cross entropy `-[t log p + (1 - t) log(1 - p)]`.
pub fn cross_entropy<D: Dimension>(pred: ArrayView<'_, f64, D>, target: ArrayView<'_, f64, D>) -> Result<f64> {
    check_shapes(&pred, &target)?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    Zip::from(&pred).and(&target).for_each(|&p, &t| {
        let p = clamp_prob(p);
        sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    });
    Ok(sum / n)
}

pub fn cross_entropy_grad<D: Dimension>(
    pred: ArrayView<'_, f64, D>,
    target: ArrayView<'_, f64, D>,
) -> Result<Array<f64, D>> {
    check_shapes(&pred, &target)?;
    let n = pred.len() as f64;
    Ok(Zip::from(&pred).and(&target).map_collect(|&p, &t| {
        let s = clamp_slope(p);
        let p = clamp_prob(p);
        s * (-t / p + (1.0 - t) / (1.0 - p)) / n
    }))
}

/// `1 - (2 Σ p t + s) / (Σ p + Σ t + s)` with `s = DICE_SMOOTH`.
pub fn dice_loss<D: Dimension>(pred: ArrayView<'_, f64, D>, target: ArrayView<'_, f64, D>) -> Result<f64> {
    check_shapes(&pred, &target)?;
    let (num, den) = dice_terms(&pred, &target);
    Ok(1.0 - num / den)
}

fn dice_terms<D: Dimension>(pred: &ArrayView<'_, f64, D>, target: &ArrayView<'_, f64, D>) -> (f64, f64) {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    Zip::from(pred).and(target).for_each(|&p, &t| {
        inter += p * t;
        sp += p;
        st += t;
    });
    (2.0 * inter + DICE_SMOOTH, sp + st + DICE_SMOOTH)
}

pub fn dice_loss_grad<D: Dimension>(
    pred: ArrayView<'_, f64, D>,
    target: ArrayView<'_, f64, D>,
) -> Result<Array<f64, D>> {
    check_shapes(&pred, &target)?;
    let (num, den) = dice_terms(&pred, &target);
    let den2 = den * den;
    Ok(target.mapv(|t| (num - 2.0 * t * den) / den2))
}

/// Pixel term of `KL(p‖q) + KL(q‖p)` for two-class distributions, written as
/// `Σ_k (p_k - q_k)(ln p_k - ln q_k)` so that swapping arguments negates both
/// factors and leaves the product bit-identical.
#[inline]
fn sym_kl_term(p: f64, q: f64) -> f64 {
    let (p, q) = (clamp_prob(p), clamp_prob(q));
    let (pn, qn) = (1.0 - p, 1.0 - q);
    (p - q) * (p.ln() - q.ln()) + (pn - qn) * (pn.ln() - qn.ln())
}

/// `½ [KL(p‖q) + KL(q‖p)]` per pixel, averaged over pixels.
pub fn symmetric_kl<D: Dimension>(p: ArrayView<'_, f64, D>, q: ArrayView<'_, f64, D>) -> Result<f64> {
    check_shapes(&p, &q)?;
    let n = p.len() as f64;
    let mut sum = 0.0;
    Zip::from(&p).and(&q).for_each(|&a, &b| sum += sym_kl_term(a, b));
    Ok(0.5 * sum / n)
}

/// Gradients of [`symmetric_kl`] with respect to `p` and `q`.
pub fn symmetric_kl_grad<D: Dimension>(
    p: ArrayView<'_, f64, D>,
    q: ArrayView<'_, f64, D>,
) -> Result<(Array<f64, D>, Array<f64, D>)> {
    check_shapes(&p, &q)?;
    let scale = 0.5 / p.len() as f64;
    // d/dp [(p-q)(ln p - ln q) + (q-p)(ln(1-p) - ln(1-q))]
    let partial = |a: f64, b: f64| {
        let s = clamp_slope(a);
        let (a, b) = (clamp_prob(a), clamp_prob(b));
        s * scale * ((a.ln() - b.ln()) + (a - b) / a - ((1.0 - a).ln() - (1.0 - b).ln()) + (a - b) / (1.0 - a))
    };
    let gp = Zip::from(&p).and(&q).map_collect(|&a, &b| partial(a, b));
    let gq = Zip::from(&q).and(&p).map_collect(|&a, &b| partial(a, b));
    Ok((gp, gq))
}

/// Two-pass supervised loss `CE(p1, y) + CE(p2, y) + α · symKL(p1, p2)`.
pub fn rdrop_supervised_loss<D: Dimension>(
    pred1: ArrayView<'_, f64, D>,
    pred2: ArrayView<'_, f64, D>,
    target: ArrayView<'_, f64, D>,
    w: &LossWeights,
) -> Result<f64> {
    let ce = cross_entropy(pred1.view(), target.view())? + cross_entropy(pred2.view(), target.view())?;
    Ok(ce + w.alpha * symmetric_kl(pred1, pred2)?)
}

pub fn rdrop_supervised_loss_grad<D: Dimension>(
    pred1: ArrayView<'_, f64, D>,
    pred2: ArrayView<'_, f64, D>,
    target: ArrayView<'_, f64, D>,
    w: &LossWeights,
) -> Result<(Array<f64, D>, Array<f64, D>)> {
    let mut g1 = cross_entropy_grad(pred1.view(), target.view())?;
    let mut g2 = cross_entropy_grad(pred2.view(), target.view())?;
    let (k1, k2) = symmetric_kl_grad(pred1, pred2)?;
    g1.scaled_add(w.alpha, &k1);
    g2.scaled_add(w.alpha, &k2);
    Ok((g1, g2))
}

/// `labeled_term + λ · unlabeled_term`.
pub fn total_ssl_loss(labeled_term: f64, unlabeled_term: f64, w: &LossWeights) -> f64 {
    labeled_term + w.lambda_u * unlabeled_term
}

/// `Dice + γ · CE`, the adaptation network objective.
pub fn adaptation_loss<D: Dimension>(
    pred: ArrayView<'_, f64, D>,
    target: ArrayView<'_, f64, D>,
    w: &LossWeights,
) -> Result<f64> {
    Ok(dice_loss(pred.view(), target.view())? + w.gamma * cross_entropy(pred, target)?)
}

pub fn adaptation_loss_grad<D: Dimension>(
    pred: ArrayView<'_, f64, D>,
    target: ArrayView<'_, f64, D>,
    w: &LossWeights,
) -> Result<Array<f64, D>> {
    let mut g = dice_loss_grad(pred.view(), target.view())?;
    g.scaled_add(w.gamma, &cross_entropy_grad(pred, target)?);
    Ok(g)
}

/// Linear warm-up of the consistency weight over the first `fraction` of training.
pub fn warmup_lambda(lambda: f64, step: usize, total: usize, fraction: f64) -> f64 {
    let ramp = (total as f64 * fraction).round();
    if ramp <= 0.0 {
        return lambda;
    }
    lambda * ((step as f64 + 1.0) / ramp).min(1.0)
}
