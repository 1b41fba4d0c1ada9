//! Forward and backward kernels for the handful of layers the U-Net needs.
//!
//! Convolutions are lowered to a single GEMM per sample through im2col.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Stride-1 "same" convolution with an odd square kernel.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out_channels, in_channels * kernel * kernel]`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct ConvGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }
}

impl Conv2d {
    /// He-uniform initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "only odd kernels are supported");
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let weight = (0..out_channels * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_channels, "conv input channel mismatch");
        let hw = x.plane();
        let k = self.patch_len();
        let mut out = Tensor::zeros(x.n, self.out_channels, x.h, x.w);
        let mut cols = vec![0.0f32; if self.kernel == 1 { 0 } else { k * hw }];
        for n in 0..x.n {
            let b: &[f32] = if self.kernel == 1 {
                x.sample(n)
            } else {
                im2col(x.sample(n), x.c, x.h, x.w, self.kernel, &mut cols);
                &cols
            };
            let y = out.sample_mut(n);
            for (o, row) in y.chunks_mut(hw).enumerate() {
                row.fill(self.bias[o]);
            }
            gemm(
                self.out_channels,
                k,
                hw,
                &self.weight,
                (k, 1),
                b,
                (hw, 1),
                y,
                1.0,
            );
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut ConvGrad) -> Tensor {
        let hw = x.plane();
        let k = self.patch_len();
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut cols = vec![0.0f32; if self.kernel == 1 { 0 } else { k * hw }];
        let mut dcols = vec![0.0f32; k * hw];
        for n in 0..x.n {
            let dyn_ = dy.sample(n);
            for (o, row) in dyn_.chunks(hw).enumerate() {
                grad.bias[o] += row.iter().sum::<f32>();
            }
            let b: &[f32] = if self.kernel == 1 {
                x.sample(n)
            } else {
                im2col(x.sample(n), x.c, x.h, x.w, self.kernel, &mut cols);
                &cols
            };
            // dW += dY [out, hw] * cols^T [hw, k]
            gemm(
                self.out_channels,
                hw,
                k,
                dyn_,
                (hw, 1),
                b,
                (1, hw),
                &mut grad.weight,
                1.0,
            );
            // dcols = W^T [k, out] * dY [out, hw]
            if self.kernel == 1 {
                gemm(
                    k,
                    self.out_channels,
                    hw,
                    &self.weight,
                    (1, k),
                    dyn_,
                    (hw, 1),
                    dx.sample_mut(n),
                    0.0,
                );
            } else {
                gemm(
                    k,
                    self.out_channels,
                    hw,
                    &self.weight,
                    (1, k),
                    dyn_,
                    (hw, 1),
                    &mut dcols,
                    0.0,
                );
                col2im(&dcols, x.c, x.h, x.w, self.kernel, dx.sample_mut(n));
            }
        }
        dx
    }
}

/// `c = a * b + beta * c` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f32], c: usize, h: usize, w: usize, kernel: usize, cols: &mut [f32]) {
    let pad = (kernel / 2) as isize;
    let hw = h * w;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..kernel {
            let dy = ky as isize - pad;
            for kx in 0..kernel {
                let dx = kx as isize - pad;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    drow[..x0.min(w)].fill(0.0);
                    drow[x1..].fill(0.0);
                    if x0 < x1 {
                        let s0 = (x0 as isize + dx) as usize;
                        drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize, kernel: usize, dx: &mut [f32]) {
    let pad = (kernel / 2) as isize;
    let hw = h * w;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..kernel {
            let dy = ky as isize - pad;
            for kx in 0..kernel {
                let ddx = kx as isize - pad;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-ddx).max(0) as usize;
                    let x1 = (w as isize - ddx).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let s0 = (x0 as isize + ddx) as usize;
                    let prow = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (p, g) in prow.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *p += *g;
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Backward of ReLU given its *output*.
pub fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, o) in dx.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

/// 2x2 max pooling; returns the pooled tensor and the winning offset (0..4) per output.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u8>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "max_pool2 needs even spatial dims");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.plane()..(nc + 1) * x.plane()];
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * x.w + 2 * xx;
                let cand = [src[base], src[base + 1], src[base + x.w], src[base + x.w + 1]];
                let mut best = 0;
                for i in 1..4 {
                    if cand[i] > cand[best] {
                        best = i;
                    }
                }
                let o = nc * oh * ow + y * ow + xx;
                out.data[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(dy: &Tensor, arg: &[u8]) -> Tensor {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let o = nc * dy.plane() + y * dy.w + xx;
                let a = arg[o] as usize;
                let (oy, ox) = (a / 2, a % 2);
                dx.data[nc * h * w + (2 * y + oy) * w + 2 * xx + ox] += dy.data[o];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for nc in 0..x.n * x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[nc * h * w + y * w + xx] = x.data[nc * x.plane() + (y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dx.data[nc * h * w + (y / 2) * w + xx / 2] += dy.data[nc * dy.plane() + y * dy.w + xx];
            }
        }
    }
    dx
}

/// Inverted dropout. Returns the output and the per-element scale that was applied.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f32, rng: &mut R) -> (Tensor, Vec<f32>) {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f32> = (0..x.data.len())
        .map(|_| if rng.random::<f32>() < keep { scale } else { 0.0 })
        .collect();
    let mut out = x.clone();
    for (v, m) in out.data.iter_mut().zip(&mask) {
        *v *= *m;
    }
    (out, mask)
}

pub fn dropout_backward(dy: &Tensor, mask: &[f32]) -> Tensor {
    let mut dx = dy.clone();
    for (g, m) in dx.data.iter_mut().zip(mask) {
        *g *= *m;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    // Direct 4-loop convolution used as the reference for the im2col path.
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let pad = (conv.kernel / 2) as isize;
        let mut out = Tensor::zeros(x.n, conv.out_channels, x.h, x.w);
        for n in 0..x.n {
            for o in 0..conv.out_channels {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = conv.bias[o] as f64;
                        for ci in 0..x.c {
                            for ky in 0..conv.kernel {
                                for kx in 0..conv.kernel {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let wi = o * conv.patch_len() + (ci * conv.kernel + ky) * conv.kernel + kx;
                                    let xi = ((n * x.c + ci) * x.h + sy as usize) * x.w + sx as usize;
                                    acc += conv.weight[wi] as f64 * x.data[xi] as f64;
                                }
                            }
                        }
                        out.data[((n * conv.out_channels + o) * x.h + y) * x.w + xx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kernel in [1, 3] {
            let conv = Conv2d::new(3, 4, kernel, &mut rng);
            let x = random_tensor(&mut rng, 2, 3, 5, 7);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, conv(x) - b> == <conv^T dy, x> and <dy, d conv / dW> via finite sums.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kernel in [1, 3] {
            let mut conv = Conv2d::new(2, 3, kernel, &mut rng);
            conv.bias.iter_mut().for_each(|b| *b = 0.0);
            let x = random_tensor(&mut rng, 2, 2, 4, 6);
            let dy = random_tensor(&mut rng, 2, 3, 4, 6);
            let y = conv.forward(&x);
            let mut g = ConvGrad::zeros_like(&conv);
            let dx = conv.backward(&x, &dy, &mut g);
            let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let rhs: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
            let rhs_w: f64 = g.weight.iter().zip(&conv.weight).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            assert!((lhs - rhs_w).abs() < 1e-4 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn pool_and_upsample_backward_route_gradients() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 4.0, 3.0, 2.0]);
        let (p, arg) = max_pool2(&x);
        assert_eq!(p.data, vec![4.0]);
        let dx = max_pool2_backward(&Tensor::from_vec(1, 1, 1, 1, vec![2.0]), &arg);
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);

        let up = upsample2(&Tensor::from_vec(1, 1, 1, 1, vec![3.0]));
        assert_eq!(up.data, vec![3.0; 4]);
        let back = upsample2_backward(&Tensor::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(back.data, vec![10.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 1, 2, 3, 3);
        let (y, _) = dropout(&x, 0.0, &mut rng);
        assert_eq!(x, y);
    }
}
