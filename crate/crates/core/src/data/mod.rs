//! Domain types for CT slices and masks, preprocessing, dataset partitioning,
//! the synthetic corpus generator, and on-disk corpus I/O.

mod io;
mod partition;
mod preprocess;
mod synthetic;

use std::collections::HashSet;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub use io::{
    load_corpus, load_nifti_pairs, read_manifest, read_mask_npy, read_nifti_labels, read_nifti_volume, save_corpus,
    write_manifest, write_mask_npy, CorpusEntry, Manifest, NiftiPair, PartitionName, MANIFEST_FILE,
};
pub use partition::{make_partition, PartitionFractions};
pub use preprocess::{
    clip_and_normalize, filter_small_tumors, label_components, volume_to_slices, DEFAULT_MIN_TUMOR_PIXELS,
    DEFAULT_WINDOW_HI, DEFAULT_WINDOW_LO,
};
pub use synthetic::{generate_synthetic_corpus, generate_synthetic_corpus_with, generate_synthetic_shard, SynthConfig};

/// One preprocessed 2D slice with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub id: String,
    image: Array2<f32>,
    pub has_tumor: bool,
}

impl Slice {
    pub fn new(id: impl Into<String>, image: Array2<f32>, has_tumor: bool) -> Result<Self> {
        let id = id.into();
        if let Some(((r, c), v)) = image
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Validation(format!(
                "slice {id}: intensity {v} at ({r}, {c}) outside [0, 1]"
            )));
        }
        Ok(Self { id, image, has_tumor })
    }

    pub fn image(&self) -> ArrayView2<'_, f32> {
        self.image.view()
    }

    pub fn height(&self) -> usize {
        self.image.nrows()
    }

    pub fn width(&self) -> usize {
        self.image.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.dim()
    }
}

/// Binary segmentation map: 0 = background, 1 = tumor.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    data: Array2<u8>,
}

impl Mask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if let Some(((r, c), v)) = data.indexed_iter().find(|(_, v)| **v > 1) {
            return Err(Error::Validation(format!("mask value {v} at ({r}, {c}) is not binary")));
        }
        Ok(Self { data })
    }

    /// Any non-zero value becomes foreground.
    pub fn from_nonzero<T: Copy + PartialEq + Default>(values: ArrayView2<'_, T>) -> Self {
        let zero = T::default();
        Self {
            data: values.mapv(|v| u8::from(v != zero)),
        }
    }

    /// Binarizes a probability map: `p >= threshold` is foreground.
    pub fn from_probs(probs: ArrayView2<'_, f64>, threshold: f64) -> Self {
        Self {
            data: probs.mapv(|p| u8::from(p >= threshold)),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn data(&self) -> ArrayView2<'_, u8> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<u8> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[[row, col]] == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[[row, col]] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| *v == 0)
    }

    /// Foreground coordinates in row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        self.data
            .indexed_iter()
            .filter(|(_, v)| **v == 1)
            .map(|(rc, _)| rc)
            .collect()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    /// True when every foreground pixel of `self` is also foreground in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(other.data.iter()).all(|(a, b)| *a <= *b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub slice: Slice,
    pub mask: Mask,
    pub origin: Origin,
}

impl LabeledSample {
    pub fn new(slice: Slice, mask: Mask, origin: Origin) -> Result<Self> {
        ensure!(
            slice.shape() == mask.shape(),
            Validation,
            "slice {} has shape {:?} but its mask has {:?}",
            slice.id,
            slice.shape(),
            mask.shape()
        );
        Ok(Self { slice, mask, origin })
    }
}

/// Which pipeline stage produced a mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Semi-supervised segmenter.
    SS,
    /// Promptable segmenter.
    MS,
    /// Adaptation network.
    AN,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub slice_id: String,
    pub mask: Mask,
    pub stage: Stage,
    /// DSC between the SS and AN masks; `None` until selection ran.
    pub agreement_dsc: Option<f64>,
    pub iteration: usize,
}

/// Labeled/unlabeled/validation/test split, evolving as pseudo-labels are accepted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetState {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<Slice>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub iteration: usize,
}

impl DatasetState {
    pub fn total_len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.validation.len() + self.test.len()
    }

    /// Checks that the four partitions are pairwise disjoint by slice id.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let ids = self
            .labeled
            .iter()
            .map(|s| &s.slice.id)
            .chain(self.unlabeled.iter().map(|s| &s.id))
            .chain(self.validation.iter().map(|s| &s.slice.id))
            .chain(self.test.iter().map(|s| &s.slice.id));
        for id in ids {
            ensure!(seen.insert(id), Consistency, "slice {id} appears in more than one partition");
        }
        Ok(())
    }

    pub fn labeled_tumor_samples(&self) -> impl Iterator<Item = &LabeledSample> {
        self.labeled
            .iter()
            .filter(|s| s.origin == Origin::Original && !s.mask.is_empty())
    }
}

/// Adaptation-network training pair: `(image, corrupted mask)` stacked as two channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// Shape `(2, H, W)`; channel 0 is the image, channel 1 the corrupted mask.
    pub input: Array3<f32>,
    pub target: Mask,
}

impl SyntheticSample {
    pub fn new(image: ArrayView2<'_, f32>, pseudo: &Mask, target: Mask) -> Result<Self> {
        ensure!(
            image.dim() == pseudo.shape() && pseudo.shape() == target.shape(),
            Validation,
            "synthetic sample shapes disagree: image {:?}, pseudo {:?}, target {:?}",
            image.dim(),
            pseudo.shape(),
            target.shape()
        );
        let pseudo = pseudo.data().mapv(f32::from);
        let input = ndarray::stack(Axis(0), &[image, pseudo.view()]).expect("shapes checked above");
        Ok(Self { input, target })
    }

    pub fn image(&self) -> ArrayView2<'_, f32> {
        self.input.index_axis(Axis(0), 0)
    }

    pub fn pseudo(&self) -> ArrayView2<'_, f32> {
        self.input.index_axis(Axis(0), 1)
    }
}
