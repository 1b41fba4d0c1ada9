use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{apply, dlogits, predict_all, probs_of, stack, TrainConfig};
use super::AdapterConfig;
use crate::data::{Mask, Slice, SyntheticSample};
use crate::error::{ensure, Result};
use crate::losses::{adaptation_loss_grad, LossWeights, ProbMap};
use crate::nn::{poly_lr, Gradients, Sgd, UNet};

/// Refines a pseudo-label given the image it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub config: AdapterConfig,
    pub net: UNet,
}

impl Adapter {
    pub fn new(config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config: AdapterConfig {
                in_channels: 2,
                ..config
            },
            net: UNet::new(config.unet(2), &mut rng),
        })
    }

    pub fn refine(&self, image: &Slice, pseudo: &Mask) -> Result<ProbMap> {
        Ok(self.refine_batch(&[(image, pseudo)])?.remove(0))
    }

    pub fn refine_batch(&self, pairs: &[(&Slice, &Mask)]) -> Result<Vec<ProbMap>> {
        let planes: Vec<Array2<f32>> = pairs
            .iter()
            .map(|(s, m)| {
                ensure!(
                    s.shape() == m.shape(),
                    Validation,
                    "slice {} has shape {:?} but its pseudo-label has {:?}",
                    s.id,
                    s.shape(),
                    m.shape()
                );
                Ok(m.data().mapv(f32::from))
            })
            .collect::<Result<_>>()?;
        let inputs: Vec<Vec<ArrayView2<'_, f32>>> = pairs
            .iter()
            .zip(&planes)
            .map(|((s, _), p)| vec![s.image(), p.view()])
            .collect();
        predict_all(&self.net, &inputs)
    }

    /// Prediction on a prepared two-channel input.
    pub fn refine_sample(&self, sample: &SyntheticSample) -> Result<ProbMap> {
        let input = vec![sample.image(), sample.pseudo()];
        Ok(predict_all(&self.net, &[input])?.remove(0))
    }
}

/// Trains on corrupted/clean mask pairs with the Dice + γ·CE objective.
pub fn train_adapter(
    model: &mut Adapter,
    samples: &[SyntheticSample],
    train: &TrainConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<()> {
    ensure!(!samples.is_empty(), Validation, "adapter training needs synthetic samples");
    train.validate()?;
    weights.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = Sgd::new(&model.net, train.momentum, train.weight_decay);
    for it in 0..train.iterations {
        let lr = poly_lr(train.lr, it, train.iterations, train.poly_power);
        let k = train.batch_size.min(samples.len());
        let mut idx = sample(&mut rng, samples.len(), k).into_vec();
        while idx.len() < train.batch_size {
            idx.push(rng.random_range(0..samples.len()));
        }
        let inputs: Vec<Vec<ArrayView2<'_, f32>>> = idx
            .iter()
            .map(|&i| samples[i].input.axis_iter(Axis(0)).collect())
            .collect();
        let x = stack(&inputs)?;
        let target = Array3::from_shape_fn((idx.len(), x.h, x.w), |(n, y, c)| {
            f64::from(samples[idx[n]].target.data()[[y, c]])
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
