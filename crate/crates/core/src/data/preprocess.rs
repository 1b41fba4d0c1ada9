use std::collections::VecDeque;

use ndarray::{Array2, Array3, Axis};

use super::{Mask, Slice};
use crate::error::{ensure, Error, Result};

pub const DEFAULT_WINDOW_LO: f64 = -82.0;
pub const DEFAULT_WINDOW_HI: f64 = 198.0;
pub const DEFAULT_MIN_TUMOR_PIXELS: usize = 100;

/// Clamps HU values to `[lo, hi]` and rescales the window linearly onto `[0, 1]`.
pub fn clip_and_normalize(volume: &Array3<f64>, lo: f64, hi: f64) -> Result<Array3<f64>> {
    ensure!(
        lo.is_finite() && hi.is_finite() && lo < hi,
        Validation,
        "invalid HU window [{lo}, {hi}]"
    );
    if let Some(((i, j, k), v)) = volume.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite voxel {v} at index [{i}, {j}, {k}]")));
    }
    let span = hi - lo;
    Ok(volume.mapv(|v| (v.clamp(lo, hi) - lo) / span))
}

/// Splits a normalized volume into axial planes (last axis), pairing each with
/// the matching plane of `masks` when given.
///
/// Slice ids are `<volume_id>_z<index>`.
pub fn volume_to_slices(
    volume_id: &str,
    volume: &Array3<f64>,
    masks: Option<&Array3<u8>>,
) -> Result<Vec<(Slice, Option<Mask>)>> {
    if let Some(m) = masks {
        ensure!(
            m.dim() == volume.dim(),
            Validation,
            "volume {volume_id}: image shape {:?} does not match label shape {:?}",
            volume.dim(),
            m.dim()
        );
    }
    let mut out = Vec::with_capacity(volume.len_of(Axis(2)));
    for (z, plane) in volume.axis_iter(Axis(2)).enumerate() {
        let id = format!("{volume_id}_z{z}");
        let image = plane.mapv(|v| v as f32);
        let mask = match masks {
            Some(m) => Some(Mask::new(m.index_axis(Axis(2), z).to_owned())?),
            None => None,
        };
        let has_tumor = mask.as_ref().is_some_and(|m| !m.is_empty());
        out.push((Slice::new(id, image, has_tumor)?, mask));
    }
    Ok(out)
}

/// 8-connected component labelling. Returns a label image (0 = background,
/// components numbered from 1 in raster order of their first pixel) and the
/// pixel count of each component (index `k - 1` for label `k`).
pub fn label_components(mask: &Mask) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = mask.shape();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) || labels[[r, c]] != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            labels[[r, c]] = label;
            queue.push_back((r, c));
            let mut size = 0;
            while let Some((y, x)) = queue.pop_front() {
                size += 1;
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if mask.get(ny, nx) && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = label;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

/// Removes every 8-connected foreground component smaller than `min_pixels`.
pub fn filter_small_tumors(mask: &Mask, min_pixels: usize) -> Mask {
    let (labels, sizes) = label_components(mask);
    let data = labels.mapv(|l| u8::from(l != 0 && sizes[l as usize - 1] >= min_pixels));
    Mask::new(data).expect("labels produce binary output")
}
