//! Synthetic CT-like slices with bright blobby lesions inside an organ region.
//!
//! Each slice is rendered from its own ChaCha stream (`set_stream(index)`), so
//! disjoint shards of a corpus can be generated independently and still match
//! a single-shot run.

use std::f64::consts::PI;
use std::ops::Range;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mask, Slice};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Fraction of slices rendered without any lesion (rounded to a count).
    pub tumor_free_fraction: f64,
    pub max_tumors: usize,
    /// Lesion radius range as a fraction of `min(height, width)`.
    pub radius_range: (f64, f64),
    /// Lesion brightness above the organ baseline.
    pub contrast_range: (f64, f64),
    /// Peak amplitude of the smooth background texture.
    pub texture_amplitude: f64,
    /// Half-width of the uniform per-pixel noise.
    pub noise_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tumor_free_fraction: 0.2,
            max_tumors: 3,
            radius_range: (0.06, 0.14),
            contrast_range: (0.12, 0.30),
            texture_amplitude: 0.03,
            noise_amplitude: 0.04,
        }
    }
}

pub fn generate_synthetic_corpus(n_slices: usize, height: usize, width: usize, seed: u64) -> Vec<(Slice, Mask)> {
    generate_synthetic_corpus_with(n_slices, height, width, seed, &SynthConfig::default())
}

pub fn generate_synthetic_corpus_with(
    n_slices: usize,
    height: usize,
    width: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Vec<(Slice, Mask)> {
    generate_synthetic_shard(n_slices, 0..n_slices, height, width, seed, cfg)
}

/// Slices `range` of the corpus that `generate_synthetic_corpus_with(n_slices, ..)` would produce.
pub fn generate_synthetic_shard(
    n_slices: usize,
    range: Range<usize>,
    height: usize,
    width: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Vec<(Slice, Mask)> {
    let n_free = (n_slices as f64 * cfg.tumor_free_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n_slices).collect();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    master.set_stream(u64::MAX);
    order.shuffle(&mut master);
    let mut tumor_free = vec![false; n_slices];
    for &i in &order[..n_free.min(n_slices)] {
        tumor_free[i] = true;
    }

    range
        .filter(|i| *i < n_slices)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            render_slice(&format!("synth_{i:05}"), height, width, !tumor_free[i], cfg, &mut rng)
        })
        .collect()
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    /// Radial boundary modulation `1 + wobble * sin(lobes * phi + phase)`.
    wobble: f64,
    lobes: f64,
    phase: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        rho <= 1.0 + self.wobble * (self.lobes * phi + self.phase).sin()
    }
}

fn render_slice(id: &str, h: usize, w: usize, with_tumor: bool, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Slice, Mask) {
    let (hf, wf) = (h as f64, w as f64);
    let body = Ellipse {
        cy: hf / 2.0,
        cx: wf / 2.0,
        ry: hf * rng.random_range(0.40..0.47),
        rx: wf * rng.random_range(0.42..0.48),
        angle: 0.0,
        wobble: 0.0,
        lobes: 0.0,
        phase: 0.0,
    };
    let organ = Ellipse {
        cy: hf * rng.random_range(0.42..0.58),
        cx: wf * rng.random_range(0.40..0.60),
        ry: hf * rng.random_range(0.24..0.30),
        rx: wf * rng.random_range(0.26..0.32),
        angle: rng.random_range(-0.4..0.4),
        wobble: 0.05,
        lobes: 2.0,
        phase: rng.random_range(0.0..2.0 * PI),
    };
    let organ_level = rng.random_range(0.45..0.55);
    let body_level = rng.random_range(0.20..0.28);

    // Smooth texture: three low-frequency plane waves sharing the amplitude budget.
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let cycles = rng.random_range(1.0..3.0);
            (theta, cycles, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let size = hf.min(wf);

    let mut lesions = Vec::new();
    if with_tumor {
        let k = rng.random_range(1..=cfg.max_tumors.max(1));
        for _ in 0..k {
            let r = size * rng.random_range(cfg.radius_range.0..cfg.radius_range.1);
            let t = rng.random_range(0.0..2.0 * PI);
            let d = rng.random_range(0.0..0.55f64).sqrt();
            // Keep the lesion inside the organ: centre within the shrunken organ ellipse.
            let cy = organ.cy + d * (organ.ry - 1.2 * r).max(0.0) * t.sin();
            let cx = organ.cx + d * (organ.rx - 1.2 * r).max(0.0) * t.cos();
            lesions.push((
                Ellipse {
                    cy,
                    cx,
                    ry: r * rng.random_range(0.75..1.0),
                    rx: r * rng.random_range(0.75..1.0),
                    angle: rng.random_range(0.0..PI),
                    wobble: rng.random_range(0.0..0.15),
                    lobes: f64::from(rng.random_range(2..5u8)),
                    phase: rng.random_range(0.0..2.0 * PI),
                },
                rng.random_range(cfg.contrast_range.0..cfg.contrast_range.1),
            ));
        }
    }

    let mut image = Array2::<f32>::zeros((h, w));
    let mut mask = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = if organ.contains(yc, xc) {
                organ_level
            } else if body.contains(yc, xc) {
                body_level
            } else {
                0.02
            };
            let tex: f64 = waves
                .iter()
                .map(|(theta, cycles, phase)| {
                    let proj = (yc * theta.sin() + xc * theta.cos()) / size;
                    (2.0 * PI * cycles * proj + phase).sin()
                })
                .sum::<f64>()
                / 3.0;
            v += cfg.texture_amplitude * tex;
            if let Some((_, contrast)) = lesions.iter().find(|(e, _)| e.contains(yc, xc)) {
                v += contrast;
                mask.set(y, x, true);
            }
            v += rng.random_range(-cfg.noise_amplitude..=cfg.noise_amplitude);
            image[[y, x]] = v.clamp(0.0, 1.0) as f32;
        }
    }
    let has_tumor = !mask.is_empty();
    let slice = Slice::new(id, image, has_tumor).expect("intensities clamped to [0, 1]");
    (slice, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_per_seed() {
        let a = generate_synthetic_corpus(10, 32, 32, 7);
        let b = generate_synthetic_corpus(10, 32, 32, 7);
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(10, 32, 32, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn shards_match_the_full_corpus() {
        let cfg = SynthConfig::default();
        let full = generate_synthetic_corpus(20, 24, 24, 3);
        let shard = generate_synthetic_shard(20, 5..12, 24, 24, 3, &cfg);
        assert_eq!(shard, full[5..12]);
        assert!(full.iter().enumerate().all(|(i, (s, _))| s.id == format!("synth_{i:05}")));
    }

    #[test]
    fn tumor_free_fraction_is_honoured() {
        let corpus = generate_synthetic_corpus(200, 32, 32, 11);
        let free = corpus.iter().filter(|(_, m)| m.is_empty()).count();
        assert!((38..=42).contains(&free), "{free} tumor-free slices");
        assert!(corpus.iter().all(|(s, m)| s.has_tumor == !m.is_empty()));
    }

    #[test]
    fn lesion_pixels_are_brighter_than_local_background() {
        let corpus = generate_synthetic_corpus(40, 48, 48, 5);
        let radius = 6isize;
        let mut checked = 0;
        for (slice, mask) in &corpus {
            let img = slice.image();
            let (h, w) = slice.shape();
            for (y, x) in mask.foreground() {
                let (mut sum, mut n) = (0.0f64, 0usize);
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        if !mask.get(yy as usize, xx as usize) {
                            sum += img[[yy as usize, xx as usize]] as f64;
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    assert!(img[[y, x]] as f64 > sum / n as f64);
                    checked += 1;
                }
            }
        }
        assert!(checked > 500);
    }
}
