use serde::{Deserialize, Serialize};

use super::unet::{Gradients, UNet};

/// Polynomial decay `base * (1 - step / total)^power`.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    base * (1.0 - frac).powf(power)
}

/// SGD with heavy-ball momentum and L2 weight decay (PyTorch semantics).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Sgd {
    pub fn new(net: &UNet, momentum: f32, weight_decay: f32) -> Self {
        let velocity = net
            .convs
            .iter()
            .map(|c| (vec![0.0; c.weight.len()], vec![0.0; c.bias.len()]))
            .collect();
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn step(&mut self, net: &mut UNet, grads: &Gradients, lr: f32) {
        for ((conv, g), (vw, vb)) in net.convs.iter_mut().zip(&grads.0).zip(&mut self.velocity) {
            update(&mut conv.weight, &g.weight, vw, lr, self.momentum, self.weight_decay);
            update(&mut conv.bias, &g.bias, vb, lr, self.momentum, 0.0);
        }
    }
}

fn update(param: &mut [f32], grad: &[f32], vel: &mut [f32], lr: f32, momentum: f32, wd: f32) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(vel) {
        let d = *g + wd * *p;
        *v = momentum * *v + d;
        *p -= lr * *v;
    }
}
