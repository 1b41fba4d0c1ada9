//! A compact encoder-decoder (U-Net) with a single sigmoid output channel.
//!
//! Every encoder level is a pair of 3x3 conv + ReLU layers followed by 2x2 max
//! pooling. Each decoder level reduces channels with a 1x1 conv, upsamples by
//! nearest neighbour, concatenates the skip connection and applies another
//! conv pair. Dropout sits on the bottleneck and in front of the 1x1 head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Conv2d, ConvGrad};
use super::tensor::Tensor;

/// Initial foreground probability of the output head. Foreground is rare in
/// tumor masks; starting near 0.5 drives every ReLU negative within a few
/// steps on some seeds.
pub const HEAD_PRIOR: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of resolution levels (pooling happens `depth - 1` times).
    pub depth: usize,
    pub dropout: f32,
}

impl UNetConfig {
    /// Spatial dims are padded up to a multiple of this.
    pub fn stride(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct UNet {
    pub config: UNetConfig,
    /// Flat conv list; see [`UNet::enc`], [`UNet::dec`] and [`UNet::head`] for layout.
    pub convs: Vec<Conv2d>,
}

/// Gradient buffers matching [`UNet::convs`].
#[derive(Clone, Debug)]
pub struct Gradients(pub Vec<ConvGrad>);

impl Gradients {
    pub fn zeros_like(net: &UNet) -> Self {
        Self(net.convs.iter().map(ConvGrad::zeros_like).collect())
    }

    pub fn scale(&mut self, s: f32) {
        for g in &mut self.0 {
            g.weight.iter_mut().for_each(|v| *v *= s);
            g.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Euclidean norm over every weight and bias gradient.
    pub fn global_norm(&self) -> f32 {
        let sq: f64 = self
            .0
            .iter()
            .flat_map(|g| g.weight.iter().chain(&g.bias))
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum();
        sq.sqrt() as f32
    }

    /// Rescales so that the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f32) -> f32 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

struct PairTape {
    input: Tensor,
    mid: Tensor,
    out: Tensor,
}

struct DecoderTape {
    reduce_in: Tensor,
    pair: PairTape,
    skip_channels: usize,
}

/// Activations cached by [`UNet::forward`] for the backward pass.
pub struct Tape {
    in_h: usize,
    in_w: usize,
    enc: Vec<PairTape>,
    pool_args: Vec<Vec<u8>>,
    bottleneck_drop: Option<Vec<f32>>,
    dec: Vec<DecoderTape>,
    head_drop: Option<Vec<f32>>,
    head_in: Tensor,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Self {
        assert!(config.depth >= 1 && config.base_channels >= 1 && config.in_channels >= 1);
        assert!((0.0..1.0).contains(&config.dropout), "dropout must lie in [0, 1)");
        let mut convs = Vec::new();
        let mut c_in = config.in_channels;
        for level in 0..config.depth {
            let c = config.channels(level);
            convs.push(Conv2d::new(c_in, c, 3, rng));
            convs.push(Conv2d::new(c, c, 3, rng));
            c_in = c;
        }
        for level in (0..config.depth - 1).rev() {
            let c = config.channels(level);
            convs.push(Conv2d::new(config.channels(level + 1), c, 1, rng));
            convs.push(Conv2d::new(2 * c, c, 3, rng));
            convs.push(Conv2d::new(c, c, 3, rng));
        }
        let mut head = Conv2d::new(config.base_channels, 1, 1, rng);
        head.bias[0] = (HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln();
        convs.push(head);
        Self { config, convs }
    }

    pub fn num_parameters(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    fn enc(&self, level: usize) -> usize {
        2 * level
    }

    /// Index of the 1x1 reduce conv for decoder step `step` (0 = deepest).
    fn dec(&self, step: usize) -> usize {
        2 * self.config.depth + 3 * step
    }

    fn head(&self) -> usize {
        self.convs.len() - 1
    }

    fn pair_forward(&self, idx: usize, x: Tensor) -> PairTape {
        let mid = layers::relu(&self.convs[idx].forward(&x));
        let out = layers::relu(&self.convs[idx + 1].forward(&mid));
        PairTape { input: x, mid, out }
    }

    fn pair_backward(&self, idx: usize, tape: &PairTape, dy: &Tensor, grads: &mut Gradients) -> Tensor {
        let d = layers::relu_backward(&tape.out, dy);
        let d = self.convs[idx + 1].backward(&tape.mid, &d, &mut grads.0[idx + 1]);
        let d = layers::relu_backward(&tape.mid, &d);
        self.convs[idx].backward(&tape.input, &d, &mut grads.0[idx])
    }

    /// Runs the network and returns pre-sigmoid logits with the input's spatial shape.
    ///
    /// Passing a dropout generator switches dropout on; `None` is inference mode.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, mut dropout: Option<&mut R>) -> (Tensor, Tape) {
        assert_eq!(x.c, self.config.in_channels, "input channel mismatch");
        let stride = self.config.stride();
        let (ph, pw) = (x.h.div_ceil(stride) * stride, x.w.div_ceil(stride) * stride);
        let rate = self.config.dropout;

        let mut cur = x.pad_to(ph, pw);
        let mut enc = Vec::with_capacity(self.config.depth);
        let mut pool_args = Vec::new();
        for level in 0..self.config.depth {
            let tape = self.pair_forward(self.enc(level), cur);
            if level + 1 < self.config.depth {
                let (pooled, arg) = layers::max_pool2(&tape.out);
                pool_args.push(arg);
                cur = pooled;
            } else {
                cur = tape.out.clone();
            }
            enc.push(tape);
        }

        let mut bottleneck_drop = None;
        if let Some(rng) = dropout.as_deref_mut() {
            if rate > 0.0 {
                let (out, mask) = layers::dropout(&cur, rate, rng);
                cur = out;
                bottleneck_drop = Some(mask);
            }
        }

        let mut dec = Vec::with_capacity(self.config.depth - 1);
        for (step, level) in (0..self.config.depth - 1).rev().enumerate() {
            let idx = self.dec(step);
            let up = layers::upsample2(&self.convs[idx].forward(&cur));
            let skip = &enc[level].out;
            let pair = self.pair_forward(idx + 1, Tensor::concat_channels(skip, &up));
            let reduce_in = std::mem::replace(&mut cur, pair.out.clone());
            dec.push(DecoderTape {
                reduce_in,
                pair,
                skip_channels: skip.c,
            });
        }

        let mut head_drop = None;
        if let Some(rng) = dropout.as_deref_mut() {
            if rate > 0.0 {
                let (out, mask) = layers::dropout(&cur, rate, rng);
                cur = out;
                head_drop = Some(mask);
            }
        }
        let logits = self.convs[self.head()].forward(&cur).crop_to(x.h, x.w);
        let tape = Tape {
            in_h: x.h,
            in_w: x.w,
            enc,
            pool_args,
            bottleneck_drop,
            dec,
            head_drop,
            head_in: cur,
        };
        (logits, tape)
    }

    /// Inference-mode forward pass returning per-pixel foreground probabilities.
    pub fn predict(&self, x: &Tensor) -> Tensor {
        let (mut logits, _) = self.forward::<rand_chacha::ChaCha8Rng>(x, None);
        logits.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        logits
    }

    /// Accumulates `dL/dθ` for the pass recorded in `tape`, given `dL/dlogits`.
    pub fn backward(&self, tape: &Tape, dlogits: &Tensor, grads: &mut Gradients) {
        assert_eq!((dlogits.h, dlogits.w), (tape.in_h, tape.in_w));
        let (ph, pw) = (tape.head_in.h, tape.head_in.w);
        let d = dlogits.pad_to(ph, pw);
        let head = self.head();
        let mut d = self.convs[head].backward(&tape.head_in, &d, &mut grads.0[head]);
        if let Some(mask) = &tape.head_drop {
            d = layers::dropout_backward(&d, mask);
        }

        let depth = self.config.depth;
        // Gradient flowing into each encoder level's output through its skip connection.
        let mut skip_grads: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        for step in (0..depth - 1).rev() {
            let level = depth - 2 - step;
            let idx = self.dec(step);
            let t = &tape.dec[step];
            let dcat = self.pair_backward(idx + 1, &t.pair, &d, grads);
            let (dskip, dup) = dcat.split_channels(t.skip_channels);
            skip_grads[level] = Some(dskip);
            let dreduced = layers::upsample2_backward(&dup);
            d = self.convs[idx].backward(&t.reduce_in, &dreduced, &mut grads.0[idx]);
        }
        if let Some(mask) = &tape.bottleneck_drop {
            d = layers::dropout_backward(&d, mask);
        }
        for level in (0..depth).rev() {
            if level + 1 < depth {
                // `d` currently holds the gradient w.r.t. the pooled output of this level.
                let mut dout = layers::max_pool2_backward(&d, &tape.pool_args[level]);
                if let Some(s) = skip_grads[level].take() {
                    dout.add_assign(&s);
                }
                d = dout;
            }
            d = self.pair_backward(self.enc(level), &tape.enc[level], &d, grads);
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
