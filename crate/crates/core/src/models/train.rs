use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::losses::ProbMap;
use crate::nn::{Gradients, Sgd, Tensor, UNet};

/// Optimizer schedule for one training job.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_size: 8,
            lr: 0.01,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.iterations >= 1, Config, "iterations must be >= 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        ensure!(self.lr.is_finite() && self.lr > 0.0, Config, "lr must be > 0");
        ensure!(self.poly_power.is_finite() && self.poly_power >= 0.0, Config, "poly_power must be >= 0");
        ensure!((0.0..1.0).contains(&self.momentum), Config, "momentum must lie in [0, 1)");
        ensure!(self.weight_decay >= 0.0, Config, "weight_decay must be >= 0");
        ensure!(self.grad_clip >= 0.0, Config, "grad_clip must be >= 0");
        Ok(())
    }
}

/// Stacks per-sample channel planes into an NCHW tensor.
pub(crate) fn stack(samples: &[Vec<ArrayView2<'_, f32>>]) -> Result<Tensor> {
    ensure!(!samples.is_empty(), Validation, "empty batch");
    let c = samples[0].len();
    let (h, w) = samples[0][0].dim();
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        ensure!(s.len() == c, Validation, "batch mixes channel counts");
        for plane in s {
            ensure!(
                plane.dim() == (h, w),
                Validation,
                "batch mixes spatial shapes {:?} and {:?}",
                (h, w),
                plane.dim()
            );
            data.extend(plane.iter().copied());
        }
    }
    Ok(Tensor::from_vec(samples.len(), c, h, w, data))
}

/// Sigmoid of single-channel logits, as `(N, H, W)` probabilities.
pub(crate) fn probs_of(logits: &Tensor) -> Array3<f64> {
    debug_assert_eq!(logits.c, 1);
    Array3::from_shape_fn((logits.n, logits.h, logits.w), |(n, y, x)| {
        let z = logits.data[(n * logits.h + y) * logits.w + x] as f64;
        1.0 / (1.0 + (-z).exp())
    })
}

/// Chains `dL/dp` through the sigmoid into `dL/dlogits`.
pub(crate) fn dlogits(probs: &Array3<f64>, dprobs: &Array3<f64>) -> Tensor {
    let (n, h, w) = probs.dim();
    let data = probs
        .iter()
        .zip(dprobs.iter())
        .map(|(p, g)| (g * p * (1.0 - p)) as f32)
        .collect();
    Tensor::from_vec(n, 1, h, w, data)
}

/// Inference in chunks; returns one probability map per sample.
pub(crate) fn predict_all(net: &UNet, samples: &[Vec<ArrayView2<'_, f32>>]) -> Result<Vec<ProbMap>> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let probs = net.predict(&stack(chunk)?);
        let plane = probs.h * probs.w;
        for n in 0..probs.n {
            let data = probs.data[n * plane..(n + 1) * plane]
                .iter()
                .map(|v| f64::from(*v))
                .collect();
            let arr = Array2::from_shape_vec((probs.h, probs.w), data).expect("plane size");
            out.push(ProbMap::new(arr)?);
        }
    }
    Ok(out)
}

/// Clips (when configured) and applies one optimizer step.
pub(crate) fn apply(train: &TrainConfig, sgd: &mut Sgd, net: &mut UNet, grads: &mut Gradients, lr: f64) {
    if train.grad_clip > 0.0 {
        grads.clip_global_norm(train.grad_clip);
    }
    sgd.step(net, grads, lr as f32);
}
