use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adapter, PointPromptNet, Segmenter};
use crate::error::{ensure, Error, Result};
use crate::nn::UNet;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Segmenter,
    Promptable,
    Adapter,
}

impl ModelKind {
    pub fn in_channels(self) -> usize {
        match self {
            ModelKind::Segmenter => 1,
            ModelKind::Promptable | ModelKind::Adapter => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum ModelState {
    Segmenter(Segmenter),
    Promptable(PointPromptNet),
    Adapter(Adapter),
}

impl ModelState {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelState::Segmenter(_) => ModelKind::Segmenter,
            ModelState::Promptable(_) => ModelKind::Promptable,
            ModelState::Adapter(_) => ModelKind::Adapter,
        }
    }

    fn net(&self) -> &UNet {
        match self {
            ModelState::Segmenter(m) => &m.net,
            ModelState::Promptable(m) => &m.net,
            ModelState::Adapter(m) => &m.net,
        }
    }
}

/// Self-describing model file: schema version, seed and the full model state
/// (config plus weights).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(flatten)]
    pub state: ModelState,
}

impl Checkpoint {
    pub fn new(state: ModelState, seed: u64) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            seed,
            state,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks schema version and channel layout.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        ensure!(
            ck.schema_version == CHECKPOINT_SCHEMA_VERSION,
            Validation,
            "{}: checkpoint schema {} is not supported (expected {})",
            path.display(),
            ck.schema_version,
            CHECKPOINT_SCHEMA_VERSION
        );
        ck.check_channels()?;
        Ok(ck)
    }

    fn check_channels(&self) -> Result<()> {
        let net = self.state.net();
        let want = self.state.kind().in_channels();
        let first = net
            .convs
            .first()
            .ok_or_else(|| Error::Validation("checkpoint has no layers".into()))?;
        ensure!(
            net.config.in_channels == want && first.in_channels == want,
            Validation,
            "{:?} checkpoint expects {want} input channels, found config {} / first layer {}",
            self.state.kind(),
            net.config.in_channels,
            first.in_channels
        );
        Ok(())
    }

    /// Loads a checkpoint that must hold a model of `kind`.
    pub fn load_kind(path: &Path, kind: ModelKind) -> Result<ModelState> {
        let ck = Self::load(path)?;
        ensure!(
            ck.state.kind() == kind,
            Validation,
            "{}: expected a {kind:?} checkpoint, found {:?}",
            path.display(),
            ck.state.kind()
        );
        Ok(ck.state)
    }
}

impl Segmenter {
    pub fn load(path: &Path) -> Result<Self> {
        match Checkpoint::load_kind(path, ModelKind::Segmenter)? {
            ModelState::Segmenter(m) => Ok(m),
            _ => unreachable!("kind checked"),
        }
    }
}

impl PointPromptNet {
    pub fn load(path: &Path) -> Result<Self> {
        match Checkpoint::load_kind(path, ModelKind::Promptable)? {
            ModelState::Promptable(m) => Ok(m),
            _ => unreachable!("kind checked"),
        }
    }
}

impl Adapter {
    pub fn load(path: &Path) -> Result<Self> {
        match Checkpoint::load_kind(path, ModelKind::Adapter)? {
            ModelState::Adapter(m) => Ok(m),
            _ => unreachable!("kind checked"),
        }
    }
}
