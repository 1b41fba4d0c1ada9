//! Mask corruptions that imitate the failure modes of a weak segmenter, used to
//! build training pairs for the adaptation network.

use std::collections::VecDeque;
use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSample, Mask, SyntheticSample};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbOp {
    Noise,
    Occlusion,
    Elastic,
    Dilation,
    Erosion,
}

impl PerturbOp {
    pub const ALL: [PerturbOp; 5] = [
        PerturbOp::Noise,
        PerturbOp::Occlusion,
        PerturbOp::Elastic,
        PerturbOp::Dilation,
        PerturbOp::Erosion,
    ];
}

impl fmt::Display for PerturbOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PerturbOp::Noise => "noise",
            PerturbOp::Occlusion => "occlusion",
            PerturbOp::Elastic => "elastic",
            PerturbOp::Dilation => "dilation",
            PerturbOp::Erosion => "erosion",
        };
        f.write_str(s)
    }
}

/// Independent apply-probability of each operation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpProbabilities {
    pub noise: f64,
    pub occlusion: f64,
    pub elastic: f64,
    pub dilation: f64,
    pub erosion: f64,
}

impl OpProbabilities {
    pub fn uniform(p: f64) -> Self {
        Self {
            noise: p,
            occlusion: p,
            elastic: p,
            dilation: p,
            erosion: p,
        }
    }

    pub fn get(&self, op: PerturbOp) -> f64 {
        match op {
            PerturbOp::Noise => self.noise,
            PerturbOp::Occlusion => self.occlusion,
            PerturbOp::Elastic => self.elastic,
            PerturbOp::Dilation => self.dilation,
            PerturbOp::Erosion => self.erosion,
        }
    }
}

impl Default for OpProbabilities {
    fn default() -> Self {
        Self::uniform(0.4)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    pub probabilities: OpProbabilities,
    /// Inclusive range of background blobs added by the noise op.
    pub noise_blobs: (usize, usize),
    /// Inclusive blob radius range in pixels.
    pub noise_radius: (usize, usize),
    /// Fraction of the foreground removed by one occlusion.
    pub occlusion_fraction: (f64, f64),
    /// Largest displacement of the elastic field in pixels.
    pub elastic_amplitude: f64,
    /// Gaussian smoothing of the elastic field in pixels.
    pub elastic_sigma: f64,
    /// Inclusive disc radius range for dilation and erosion.
    pub morph_radius: (usize, usize),
    /// Probability that a sample is replaced by an all-zero mask.
    pub all_black: f64,
    /// Application order of the operations.
    pub order: Vec<PerturbOp>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            probabilities: OpProbabilities::default(),
            noise_blobs: (1, 5),
            noise_radius: (2, 8),
            occlusion_fraction: (0.1, 0.5),
            elastic_amplitude: 3.0,
            elastic_sigma: 4.0,
            morph_radius: (1, 4),
            all_black: 0.05,
            order: PerturbOp::ALL.to_vec(),
        }
    }
}

impl PerturbConfig {
    /// Configuration that leaves every mask unchanged.
    pub fn identity() -> Self {
        Self {
            probabilities: OpProbabilities::uniform(0.0),
            all_black: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for op in PerturbOp::ALL {
            let p = self.probabilities.get(op);
            ensure!((0.0..=1.0).contains(&p), Config, "perturb probability for {op} = {p} outside [0, 1]");
        }
        ensure!(
            (0.0..=1.0).contains(&self.all_black),
            Config,
            "perturb.all_black = {} outside [0, 1]",
            self.all_black
        );
        let (a, b) = self.noise_blobs;
        ensure!(a >= 1 && a <= b, Config, "noise_blobs range ({a}, {b}) is empty or starts at 0");
        let (a, b) = self.noise_radius;
        ensure!(a >= 1 && a <= b, Config, "noise_radius range ({a}, {b}) is empty or starts at 0");
        let (a, b) = self.morph_radius;
        ensure!(a >= 1 && a <= b, Config, "morph_radius range ({a}, {b}) is empty or starts at 0");
        let (a, b) = self.occlusion_fraction;
        ensure!(
            0.0 <= a && a <= b && b <= 1.0,
            Config,
            "occlusion_fraction range ({a}, {b}) must satisfy 0 <= lo <= hi <= 1"
        );
        ensure!(
            self.elastic_amplitude.is_finite() && self.elastic_amplitude >= 0.0,
            Config,
            "elastic_amplitude must be finite and >= 0"
        );
        ensure!(
            self.elastic_sigma.is_finite() && self.elastic_sigma > 0.0,
            Config,
            "elastic_sigma must be finite and > 0"
        );
        let mut seen = self.order.clone();
        seen.sort_by_key(|op| *op as u8);
        seen.dedup();
        ensure!(
            seen.len() == self.order.len(),
            Config,
            "perturbation order lists an operation twice"
        );
        Ok(())
    }
}

fn disc_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn offset(h: usize, w: usize, y: usize, x: usize, d: (isize, isize)) -> Option<(usize, usize)> {
    let (yy, xx) = (y as isize + d.0, x as isize + d.1);
    (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then_some((yy as usize, xx as usize))
}

/// Draws `k` filled discs centred on background pixels.
pub fn add_background_noise(mask: &Mask, cfg: &PerturbConfig, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    noise_with(mask, cfg, &mut rng)
}

fn noise_with(mask: &Mask, cfg: &PerturbConfig, rng: &mut ChaCha8Rng) -> Mask {
    let (h, w) = mask.shape();
    let background: Vec<(usize, usize)> = mask
        .data()
        .indexed_iter()
        .filter(|(_, v)| **v == 0)
        .map(|(rc, _)| rc)
        .collect();
    let mut out = mask.clone();
    if background.is_empty() {
        return out;
    }
    let k = rng.random_range(cfg.noise_blobs.0..=cfg.noise_blobs.1);
    for _ in 0..k {
        let (cy, cx) = background[rng.random_range(0..background.len())];
        let r = rng.random_range(cfg.noise_radius.0..=cfg.noise_radius.1);
        for d in disc_offsets(r) {
            if let Some((y, x)) = offset(h, w, cy, cx, d) {
                out.set(y, x, true);
            }
        }
    }
    out
}

/// Clears a 4-connected patch grown breadth-first from a random foreground
/// pixel until it covers the drawn fraction of the foreground.
pub fn occlude_foreground(mask: &Mask, cfg: &PerturbConfig, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    occlude_with(mask, cfg, &mut rng)
}

fn occlude_with(mask: &Mask, cfg: &PerturbConfig, rng: &mut ChaCha8Rng) -> Mask {
    let fg = mask.foreground();
    let mut out = mask.clone();
    if fg.is_empty() {
        return out;
    }
    let fraction = rng.random_range(cfg.occlusion_fraction.0..=cfg.occlusion_fraction.1);
    let target = (fraction * fg.len() as f64).round() as usize;
    let (h, w) = mask.shape();
    let mut visited = Array2::<bool>::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    let start = fg[rng.random_range(0..fg.len())];
    visited[start] = true;
    queue.push_back(start);
    let mut removed = 0;
    while removed < target {
        let Some((y, x)) = queue.pop_front() else { break };
        out.set(y, x, false);
        removed += 1;
        for d in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            if let Some(n) = offset(h, w, y, x, d) {
                if mask.get(n.0, n.1) && !visited[n] {
                    visited[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge replication.
fn smooth(field: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = field.dim();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, &kv)| kv * field[[y, clampi(x as isize + i as isize - r, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, &kv)| kv * rows[[clampi(y as isize + i as isize - r, h), x]])
            .sum::<f64>()
    })
}

/// Warps the mask by a smooth random displacement field whose largest vector
/// has length `elastic_amplitude`, then re-thresholds at 0.5.
pub fn elastic_deform(mask: &Mask, cfg: &PerturbConfig, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    elastic_with(mask, cfg, &mut rng)
}

fn elastic_with(mask: &Mask, cfg: &PerturbConfig, rng: &mut ChaCha8Rng) -> Mask {
    let (h, w) = mask.shape();
    let mut raw = || Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..=1.0));
    let dy = smooth(&raw(), cfg.elastic_sigma);
    let dx = smooth(&raw(), cfg.elastic_sigma);
    let peak = dy
        .iter()
        .zip(dx.iter())
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0f64, f64::max);
    if cfg.elastic_amplitude == 0.0 || peak == 0.0 {
        return mask.clone();
    }
    let scale = cfg.elastic_amplitude / peak;
    let src = mask.to_f64();
    let sample = |y: f64, x: f64| -> f64 {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    };
    let warped = Array2::from_shape_fn((h, w), |(y, x)| {
        sample(y as f64 + scale * dy[[y, x]], x as f64 + scale * dx[[y, x]])
    });
    Mask::from_probs(warped.view(), 0.5)
}

/// Morphological dilation by a disc; pixels outside the image count as background.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = mask.shape();
    let disc = disc_offsets(radius);
    let mut out = mask.clone();
    for (y, x) in mask.foreground() {
        for &d in &disc {
            if let Some((yy, xx)) = offset(h, w, y, x, d) {
                out.set(yy, xx, true);
            }
        }
    }
    out
}

/// Morphological erosion by a disc; pixels outside the image are ignored.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = mask.shape();
    let disc = disc_offsets(radius);
    let mut out = Mask::zeros(h, w);
    for (y, x) in mask.foreground() {
        let inside = disc
            .iter()
            .all(|&d| offset(h, w, y, x, d).is_none_or(|(yy, xx)| mask.get(yy, xx)));
        out.set(y, x, inside);
    }
    out
}

/// Which corruptions a single [`perturb_traced`] call applied.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbTrace {
    pub all_black: bool,
    pub applied: Vec<PerturbOp>,
}

pub fn perturb(mask: &Mask, cfg: &PerturbConfig, seed: u64) -> Mask {
    perturb_traced(mask, cfg, seed).0
}

/// With probability `all_black` returns an empty mask; otherwise draws an
/// independent fire decision for every operation and applies the fired ones
/// in `cfg.order`.
pub fn perturb_traced(mask: &Mask, cfg: &PerturbConfig, seed: u64) -> (Mask, PerturbTrace) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = mask.shape();
    if rng.random::<f64>() < cfg.all_black {
        return (
            Mask::zeros(h, w),
            PerturbTrace {
                all_black: true,
                applied: Vec::new(),
            },
        );
    }
    let fired: Vec<PerturbOp> = cfg
        .order
        .iter()
        .copied()
        .filter(|op| rng.random::<f64>() < cfg.probabilities.get(*op))
        .collect();
    let mut out = mask.clone();
    for &op in &fired {
        out = match op {
            PerturbOp::Noise => noise_with(&out, cfg, &mut rng),
            PerturbOp::Occlusion => occlude_with(&out, cfg, &mut rng),
            PerturbOp::Elastic => elastic_with(&out, cfg, &mut rng),
            PerturbOp::Dilation => dilate(&out, rng.random_range(cfg.morph_radius.0..=cfg.morph_radius.1)),
            PerturbOp::Erosion => erode(&out, rng.random_range(cfg.morph_radius.0..=cfg.morph_radius.1)),
        };
    }
    (
        out,
        PerturbTrace {
            all_black: false,
            applied: fired,
        },
    )
}

/// Error type of a corrupted mask relative to its source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Unchanged,
    OverSegmentation,
    UnderSegmentation,
    BoundaryShift,
    AllBlack,
}

pub fn classify_error(perturbed: &Mask, original: &Mask) -> ErrorClass {
    if perturbed.is_empty() && !original.is_empty() {
        return ErrorClass::AllBlack;
    }
    let extra = !perturbed.is_subset_of(original);
    let missing = !original.is_subset_of(perturbed);
    match (extra, missing) {
        (false, false) => ErrorClass::Unchanged,
        (true, false) => ErrorClass::OverSegmentation,
        (false, true) => ErrorClass::UnderSegmentation,
        (true, true) => ErrorClass::BoundaryShift,
    }
}

/// `replication` corrupted copies of every labeled pair. Sample `k` of
/// replica `r` uses the `(r * n + k)`-th seed of a stream keyed by `seed`.
pub fn build_adaptation_training_set(
    labeled: &[LabeledSample],
    replication: usize,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    ensure!(!labeled.is_empty(), Validation, "adaptation training set needs labeled samples");
    ensure!(replication >= 1, Validation, "replication must be at least 1");
    cfg.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(labeled.len() * replication);
    for _ in 0..replication {
        for s in labeled {
            let corrupted = perturb(&s.mask, cfg, seeds.random());
            out.push(SyntheticSample::new(s.slice.image(), &corrupted, s.mask.clone())?);
        }
    }
    Ok(out)
}
