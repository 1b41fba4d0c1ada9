use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{apply, dlogits, predict_all, probs_of, stack, TrainConfig};
use super::{random_click_with, PointPrompt, SegmenterConfig};
use crate::data::{LabeledSample, Mask, Slice};
use crate::error::{ensure, Error, Result};
use crate::losses::{adaptation_loss_grad, LossWeights, ProbMap};
use crate::nn::{poly_lr, Gradients, Sgd, UNet};

/// Segmenter conditioned on positive point clicks.
pub trait PromptableSegmenter {
    /// Inference-mode prediction given one or more clicks on `image`.
    fn predict_with_clicks(&self, image: &Slice, clicks: &[PointPrompt]) -> Result<ProbMap>;

    fn predict(&self, image: &Slice, prompt: &PointPrompt) -> Result<ProbMap> {
        self.predict_with_clicks(image, std::slice::from_ref(prompt))
    }
}

/// U-Net whose second input channel is a Gaussian heatmap of the clicks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPromptNet {
    pub config: SegmenterConfig,
    /// Heatmap standard deviation in pixels.
    pub sigma: f64,
    pub net: UNet,
}

pub const DEFAULT_PROMPT_SIGMA: f64 = 4.0;

impl PointPromptNet {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config: SegmenterConfig {
                in_channels: 2,
                ..config
            },
            sigma: DEFAULT_PROMPT_SIGMA,
            net: UNet::new(config.unet(2), &mut rng),
        })
    }

    /// Pixelwise maximum of unit-peak Gaussians centred on the clicks.
    pub fn heatmap(&self, height: usize, width: usize, clicks: &[PointPrompt]) -> Result<Array2<f32>> {
        for c in clicks {
            ensure!(
                c.row < height && c.col < width,
                Validation,
                "click ({}, {}) outside a {height}x{width} image",
                c.row,
                c.col
            );
        }
        let denom = 2.0 * self.sigma * self.sigma;
        Ok(Array2::from_shape_fn((height, width), |(y, x)| {
            clicks
                .iter()
                .map(|c| {
                    let (dy, dx) = (y as f64 - c.row as f64, x as f64 - c.col as f64);
                    (-(dy * dy + dx * dx) / denom).exp()
                })
                .fold(0.0f64, f64::max) as f32
        }))
    }
}

impl PromptableSegmenter for PointPromptNet {
    fn predict_with_clicks(&self, image: &Slice, clicks: &[PointPrompt]) -> Result<ProbMap> {
        ensure!(!clicks.is_empty(), Validation, "prediction needs at least one click");
        let (h, w) = image.shape();
        let heat = self.heatmap(h, w, clicks)?;
        Ok(predict_all(&self.net, &[vec![image.image(), heat.view()]])?.remove(0))
    }
}

/// How training clicks are drawn from a ground-truth mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClickPolicy {
    /// One uniformly random foreground click.
    Random,
    /// Between 1 and `max_rounds` clicks from [`iterative_click_sampling`].
    Iterative { max_rounds: usize },
}

impl Default for ClickPolicy {
    fn default() -> Self {
        ClickPolicy::Iterative { max_rounds: 3 }
    }
}

/// First click uniform over `gt`; each later click uniform over the false
/// negatives of the prediction given the clicks so far, or over `gt` when
/// there are none.
pub fn iterative_click_sampling(
    model: &dyn PromptableSegmenter,
    image: &Slice,
    gt: &Mask,
    n_rounds: usize,
    seed: u64,
) -> Result<Vec<PointPrompt>> {
    ensure!(n_rounds >= 1, Validation, "n_rounds must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clicks = vec![random_click_with(gt, &mut rng)?];
    while clicks.len() < n_rounds {
        let pred = model.predict_with_clicks(image, &clicks)?.to_mask();
        let missed = Mask::new(&gt.data() & &pred.data().mapv(|v| 1 - v))?;
        let region = if missed.is_empty() { gt } else { &missed };
        clicks.push(random_click_with(region, &mut rng)?);
    }
    Ok(clicks)
}

/// Fine-tunes on tumor slices with the Dice + γ·CE objective, drawing fresh
/// clicks for every sample of every step.
pub fn fine_tune_promptable(
    model: &mut PointPromptNet,
    train_set: &[LabeledSample],
    train: &TrainConfig,
    policy: ClickPolicy,
    weights: &LossWeights,
    seed: u64,
) -> Result<()> {
    ensure!(!train_set.is_empty(), Validation, "promptable fine-tuning needs tumor slices");
    if let Some(s) = train_set.iter().find(|s| s.mask.is_empty()) {
        return Err(Error::Validation(format!(
            "slice {} has no tumor and cannot provide a prompt",
            s.slice.id
        )));
    }
    if let ClickPolicy::Iterative { max_rounds } = policy {
        ensure!(max_rounds >= 1, Config, "iterative click policy needs max_rounds >= 1");
    }
    train.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = Sgd::new(&model.net, train.momentum, train.weight_decay);
    for it in 0..train.iterations {
        let lr = poly_lr(train.lr, it, train.iterations, train.poly_power);
        let k = train.batch_size.min(train_set.len());
        let mut idx = sample(&mut rng, train_set.len(), k).into_vec();
        while idx.len() < train.batch_size {
            idx.push(rng.random_range(0..train_set.len()));
        }
        let mut heats = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &train_set[i];
            let clicks = match policy {
                ClickPolicy::Random => vec![random_click_with(&s.mask, &mut rng)?],
                ClickPolicy::Iterative { max_rounds } => {
                    let rounds = rng.random_range(1..=max_rounds);
                    iterative_click_sampling(model, &s.slice, &s.mask, rounds, rng.random())?
                }
            };
            let (h, w) = s.slice.shape();
            heats.push(model.heatmap(h, w, &clicks)?);
        }
        let inputs: Vec<Vec<ArrayView2<'_, f32>>> = idx
            .iter()
            .zip(&heats)
            .map(|(&i, heat)| vec![train_set[i].slice.image(), heat.view()])
            .collect();
        let x = stack(&inputs)?;
        let target = Array3::from_shape_fn((idx.len(), x.h, x.w), |(n, y, c)| {
            f64::from(train_set[idx[n]].mask.data()[[y, c]])
        });
        let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let (z, tape) = model.net.forward(&x, Some(&mut drop_rng));
        let p = probs_of(&z);
        let g = adaptation_loss_grad(p.view(), target.view(), weights)?;
        let mut grads = Gradients::zeros_like(&model.net);
        model.net.backward(&tape, &dlogits(&p, &g), &mut grads);
        apply(train, &mut sgd, &mut model.net, &mut grads, lr);
    }
    Ok(())
}
