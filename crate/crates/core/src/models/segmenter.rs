use ndarray::{Array3, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{apply, dlogits, predict_all, probs_of, stack, TrainConfig};
use super::SegmenterConfig;
use crate::data::{LabeledSample, Mask, Slice};
use crate::error::{ensure, Result};
use crate::losses::{
    rdrop_supervised_loss, rdrop_supervised_loss_grad, symmetric_kl, symmetric_kl_grad, warmup_lambda, LossWeights,
    ProbMap,
};
use crate::nn::{poly_lr, Gradients, Sgd, Tensor, UNet};

/// Single-channel dropout U-Net trained with two-pass consistency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segmenter {
    pub config: SegmenterConfig,
    pub net: UNet,
}

fn image_batch<'a>(slices: impl IntoIterator<Item = &'a Slice>) -> Vec<Vec<ArrayView2<'a, f32>>> {
    slices.into_iter().map(|s| vec![s.image()]).collect()
}

impl Segmenter {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        ensure!(
            config.in_channels == 1,
            Config,
            "the segmenter takes one image channel, got in_channels = {}",
            config.in_channels
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = UNet::new(config.unet(1), &mut rng);
        Ok(Self { config, net })
    }

    pub fn predict(&self, slice: &Slice) -> Result<ProbMap> {
        Ok(self.predict_batch(&[slice])?.remove(0))
    }

    pub fn predict_batch(&self, slices: &[&Slice]) -> Result<Vec<ProbMap>> {
        predict_all(&self.net, &image_batch(slices.iter().copied()))
    }

    /// Prediction thresholded at 0.5.
    pub fn segment(&self, slice: &Slice) -> Result<Mask> {
        Ok(self.predict(slice)?.to_mask())
    }

    /// Two stochastic passes over the same batch, each with its own dropout
    /// stream derived from `seed`. Returns `(N, H, W)` probabilities per pass.
    pub fn forward_twice(&self, slices: &[&Slice], seed: u64) -> Result<(Array3<f64>, Array3<f64>)> {
        let x = stack(&image_batch(slices.iter().copied()))?;
        let (mut r1, mut r2) = pass_rngs(seed);
        let (z1, _) = self.net.forward(&x, Some(&mut r1));
        let (z2, _) = self.net.forward(&x, Some(&mut r2));
        Ok((probs_of(&z1), probs_of(&z2)))
    }
}

fn pass_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut a = ChaCha8Rng::seed_from_u64(seed);
    a.set_stream(1);
    let mut b = ChaCha8Rng::seed_from_u64(seed);
    b.set_stream(2);
    (a, b)
}

/// Per-step values reported to the [`train_ssl`] callback.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SslStepStats {
    /// 1-based count of optimizer steps taken so far.
    pub step: usize,
    pub lr: f64,
    pub supervised: f64,
    pub consistency: f64,
    pub lambda: f64,
}

fn draw(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    if k <= len {
        sample(rng, len, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Two passes through the net with gradient accumulation.
struct TwoPass {
    p1: Array3<f64>,
    p2: Array3<f64>,
    t1: crate::nn::Tape,
    t2: crate::nn::Tape,
}

fn two_pass(net: &UNet, x: &Tensor, seed: u64) -> TwoPass {
    let (mut r1, mut r2) = pass_rngs(seed);
    let (z1, t1) = net.forward(x, Some(&mut r1));
    let (z2, t2) = net.forward(x, Some(&mut r2));
    TwoPass {
        p1: probs_of(&z1),
        p2: probs_of(&z2),
        t1,
        t2,
    }
}

/// Semi-supervised training: each step draws half a batch of labeled slices
/// (the whole batch when `unlabeled` is empty) scored by the two-pass
/// supervised loss, and half a batch of unlabeled slices scored by the
/// symmetric KL between passes, weighted by a linearly warmed-up `lambda_u`.
///
/// `on_step` runs after every optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn train_ssl<F>(
    model: &mut Segmenter,
    labeled: &[LabeledSample],
    unlabeled: &[Slice],
    train: &TrainConfig,
    weights: &LossWeights,
    warmup_fraction: f64,
    seed: u64,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&Segmenter, &SslStepStats) -> Result<()>,
{
    ensure!(!labeled.is_empty(), Config, "semi-supervised training needs labeled samples");
    train.validate()?;
    weights.validate()?;
    let (l_bs, u_bs) = if unlabeled.is_empty() || train.batch_size == 1 {
        (train.batch_size, 0)
    } else {
        let l = train.batch_size.div_ceil(2);
        (l, train.batch_size - l)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = Sgd::new(&model.net, train.momentum, train.weight_decay);
    for it in 0..train.iterations {
        let lr = poly_lr(train.lr, it, train.iterations, train.poly_power);
        let mut grads = Gradients::zeros_like(&model.net);

        let idx = draw(&mut rng, labeled.len(), l_bs);
        let x = stack(&image_batch(idx.iter().map(|&i| &labeled[i].slice)))?;
        let target = Array3::from_shape_fn((idx.len(), x.h, x.w), |(n, y, c)| {
            f64::from(labeled[idx[n]].mask.data()[[y, c]])
        });
        let pass = two_pass(&model.net, &x, rng.random());
        let supervised = rdrop_supervised_loss(pass.p1.view(), pass.p2.view(), target.view(), weights)?;
        let (g1, g2) = rdrop_supervised_loss_grad(pass.p1.view(), pass.p2.view(), target.view(), weights)?;
        model.net.backward(&pass.t1, &dlogits(&pass.p1, &g1), &mut grads);
        model.net.backward(&pass.t2, &dlogits(&pass.p2, &g2), &mut grads);
        drop(pass);

        let lambda = warmup_lambda(weights.lambda_u, it, train.iterations, warmup_fraction);
        let mut consistency = 0.0;
        if u_bs > 0 {
            let idx = draw(&mut rng, unlabeled.len(), u_bs);
            let x = stack(&image_batch(idx.iter().map(|&i| &unlabeled[i])))?;
            let pass = two_pass(&model.net, &x, rng.random());
            consistency = symmetric_kl(pass.p1.view(), pass.p2.view())?;
            if lambda > 0.0 {
                let (mut g1, mut g2) = symmetric_kl_grad(pass.p1.view(), pass.p2.view())?;
                g1 *= lambda;
                g2 *= lambda;
                model.net.backward(&pass.t1, &dlogits(&pass.p1, &g1), &mut grads);
                model.net.backward(&pass.t2, &dlogits(&pass.p2, &g2), &mut grads);
            }
        }

        apply(train, &mut sgd, &mut model.net, &mut grads, lr);
        on_step(
            model,
            &SslStepStats {
                step: it + 1,
                lr,
                supervised,
                consistency,
                lambda,
            },
        )?;
    }
    Ok(())
}

/// Mean two-pass symmetric KL over `slices`, one forward pair per slice.
pub fn mean_two_pass_kl(model: &Segmenter, slices: &[&Slice], seed: u64) -> Result<f64> {
    let (p1, p2) = model.forward_twice(slices, seed)?;
    let mut total = 0.0;
    for (a, b) in p1.axis_iter(Axis(0)).zip(p2.axis_iter(Axis(0))) {
        total += symmetric_kl(a, b)?;
    }
    Ok(total / slices.len() as f64)
}
