//! On-disk layouts.
//!
//! Raw scans: `{root}/images/<stem>.nii[.gz]` paired with `{root}/labels/<stem>.nii[.gz]`.
//!
//! Preprocessed or synthetic corpora:
//!
//! ```text
//! {dir}/manifest.json
//! {dir}/slices/<id>_image.npy   f32, (H, W), values in [0, 1]
//! {dir}/slices/<id>_mask.npy    u8,  (H, W), values in {0, 1}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Ix3};
use ndarray_npy::{read_npy, write_npy};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use super::{DatasetState, LabeledSample, Mask, Origin, Slice};
use crate::error::{ensure, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionName {
    Labeled,
    Unlabeled,
    Validation,
    Test,
}

impl std::str::FromStr for PartitionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Self::Labeled),
            "unlabeled" => Ok(Self::Unlabeled),
            "validation" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub shape: [usize; 2],
    pub has_tumor: bool,
    pub partition: PartitionName,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Free-form provenance, e.g. `synthetic` or `nifti:<root>`.
    pub source: String,
    pub partition_seed: u64,
    pub entries: Vec<CorpusEntry>,
}

impl Manifest {
    pub fn from_state(source: impl Into<String>, partition_seed: u64, state: &DatasetState) -> Self {
        let mut entries = Vec::with_capacity(state.total_len());
        let mut push = |s: &Slice, has_tumor: bool, partition| {
            entries.push(CorpusEntry {
                id: s.id.clone(),
                shape: [s.height(), s.width()],
                has_tumor,
                partition,
            })
        };
        for s in &state.labeled {
            push(&s.slice, !s.mask.is_empty(), PartitionName::Labeled);
        }
        for s in &state.unlabeled {
            push(s, s.has_tumor, PartitionName::Unlabeled);
        }
        for s in &state.validation {
            push(&s.slice, !s.mask.is_empty(), PartitionName::Validation);
        }
        for s in &state.test {
            push(&s.slice, !s.mask.is_empty(), PartitionName::Test);
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            version: MANIFEST_VERSION,
            source: source.into(),
            partition_seed,
            entries,
        }
    }

    pub fn counts(&self) -> BTreeMap<PartitionName, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.partition).or_insert(0) += 1;
        }
        out
    }

    /// Rebuilds the initial dataset state. Unlabeled slices drop their masks;
    /// the returned map keeps them as hidden ground truth for analysis.
    pub fn to_state(&self, samples: Vec<(Slice, Mask)>) -> Result<(DatasetState, HashMap<String, Mask>)> {
        let mut by_id: HashMap<String, (Slice, Mask)> = samples.into_iter().map(|(s, m)| (s.id.clone(), (s, m))).collect();
        let mut state = DatasetState::default();
        let mut hidden = HashMap::new();
        for e in &self.entries {
            let (slice, mask) = by_id
                .remove(&e.id)
                .ok_or_else(|| Error::Consistency(format!("manifest lists {} but no slice was loaded", e.id)))?;
            match e.partition {
                PartitionName::Labeled => state.labeled.push(LabeledSample::new(slice, mask, Origin::Original)?),
                PartitionName::Validation => state.validation.push(LabeledSample::new(slice, mask, Origin::Original)?),
                PartitionName::Test => state.test.push(LabeledSample::new(slice, mask, Origin::Original)?),
                PartitionName::Unlabeled => {
                    hidden.insert(slice.id.clone(), mask);
                    state.unlabeled.push(slice);
                }
            }
        }
        state.check_disjoint()?;
        Ok((state, hidden))
    }
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    ensure!(
        manifest.version == MANIFEST_VERSION,
        Validation,
        "manifest version {} is not supported (expected {MANIFEST_VERSION})",
        manifest.version
    );
    Ok(manifest)
}

fn slice_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    let slices = dir.join("slices");
    (slices.join(format!("{id}_image.npy")), slices.join(format!("{id}_mask.npy")))
}

pub fn write_mask_npy(path: &Path, mask: &Mask) -> Result<()> {
    write_npy(path, &mask.data().to_owned()).map_err(|e| Error::Npy {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

pub fn read_mask_npy(path: &Path) -> Result<Mask> {
    let data: Array2<u8> = read_npy(path).map_err(|e| Error::Npy {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    Mask::new(data)
}

/// Writes every slice and mask plus the manifest.
pub fn save_corpus(dir: &Path, samples: &[(Slice, Mask)], manifest: &Manifest) -> Result<()> {
    let slices = dir.join("slices");
    fs::create_dir_all(&slices).map_err(|e| Error::io(&slices, e))?;
    for (slice, mask) in samples {
        let (img_path, mask_path) = slice_paths(dir, &slice.id);
        write_npy(&img_path, &slice.image().to_owned()).map_err(|e| Error::Npy {
            path: img_path.clone(),
            message: e.to_string(),
        })?;
        write_mask_npy(&mask_path, mask)?;
    }
    write_manifest(dir, manifest)
}

/// Loads the manifest and every slice it lists, in manifest order.
pub fn load_corpus(dir: &Path) -> Result<(Manifest, Vec<(Slice, Mask)>)> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let (img_path, mask_path) = slice_paths(dir, &e.id);
        let image: Array2<f32> = read_npy(&img_path).map_err(|err| Error::Npy {
            path: img_path.clone(),
            message: err.to_string(),
        })?;
        ensure!(
            image.dim() == (e.shape[0], e.shape[1]),
            Validation,
            "slice {} has shape {:?}, manifest says {:?}",
            e.id,
            image.dim(),
            e.shape
        );
        let mask = read_mask_npy(&mask_path)?;
        let slice = Slice::new(e.id.clone(), image, !mask.is_empty())?;
        out.push((slice, mask));
    }
    Ok((manifest, out))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NiftiPair {
    pub stem: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

fn nifti_stem(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .map(str::to_owned)
}

fn list_nifti(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    ensure!(dir.is_dir(), Validation, "missing directory {}", dir.display());
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(stem) = nifti_stem(&path) {
            out.insert(stem, path);
        }
    }
    Ok(out)
}

/// Pairs `{root}/images/*.nii[.gz]` with `{root}/labels/*.nii[.gz]` by filename stem.
pub fn load_nifti_pairs(root: &Path) -> Result<Vec<NiftiPair>> {
    let images = list_nifti(&root.join("images"))?;
    let labels = list_nifti(&root.join("labels"))?;
    ensure!(!images.is_empty(), Validation, "no NIfTI volumes under {}", root.join("images").display());
    images
        .into_iter()
        .map(|(stem, image)| {
            let label = labels
                .get(&stem)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("volume {stem} has no matching label file")))?;
            Ok(NiftiPair { stem, image, label })
        })
        .collect()
}

/// Reads a NIfTI volume as `f64` with the header's intensity scaling applied.
pub fn read_nifti_volume(path: &Path) -> Result<Array3<f64>> {
    let err = |message: String| Error::Nifti {
        path: path.to_owned(),
        message,
    };
    let object = ReaderOptions::new().read_file(path).map_err(|e| err(e.to_string()))?;
    let volume = object
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| err(e.to_string()))?;
    volume
        .into_dimensionality::<Ix3>()
        .map_err(|e| err(format!("expected a 3D volume: {e}")))
}

/// Reads a label volume and keeps voxels equal to `tumor_label` as foreground.
pub fn read_nifti_labels(path: &Path, tumor_label: u8) -> Result<Array3<u8>> {
    let raw = read_nifti_volume(path)?;
    Ok(raw.mapv(|v| u8::from(v.round() as i64 == i64::from(tumor_label))))
}
