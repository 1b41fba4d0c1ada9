use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{IterationSummary, StopReason};
use super::stages::Helpers;
use super::{PipelineConfig, SelectionRecord};
use crate::data::{read_mask_npy, write_mask_npy};
use crate::error::{ensure, Error, Result};
use crate::models::{Adapter, Checkpoint, ModelState, PointPrompt, PointPromptNet, Segmenter};

pub const STATE_FILE: &str = "state.json";
pub const LOCK_FILE: &str = "run.lock";
const STATE_SCHEMA_VERSION: u32 = 1;

/// One line of `selection_records.jsonl`; masks are paths relative to the
/// iteration directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub slice_id: String,
    pub iteration: usize,
    pub ss_mask: String,
    pub ms_mask: String,
    pub an_mask: String,
    pub agreement_dsc: f64,
    pub accepted: bool,
    pub prompt: Option<PointPrompt>,
    pub stage2_skipped: bool,
}

/// A pseudo-labeled slice as persisted in [`RunState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoEntry {
    pub slice_id: String,
    pub iteration: usize,
    /// AN mask path relative to the run directory.
    pub mask: String,
}

/// Resumable progress of a run: enough, together with the initial partition,
/// to rebuild the dataset state after the last completed iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub schema_version: u32,
    pub config: PipelineConfig,
    pub completed: usize,
    pub pseudo: Vec<PseudoEntry>,
    pub history: Vec<IterationSummary>,
    /// Iteration whose segmenter had the best validation DSC so far.
    pub best_iteration: Option<usize>,
    /// Iterations since the validation DSC last improved.
    pub since_improvement: usize,
    pub stop: Option<StopReason>,
    pub last_error: Option<String>,
}

impl RunState {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            schema_version: STATE_SCHEMA_VERSION,
            config,
            completed: 0,
            pseudo: Vec::new(),
            history: Vec::new(),
            best_iteration: None,
            since_improvement: 0,
            stop: None,
            last_error: None,
        }
    }
}

/// Exclusive handle on a run directory, released on drop.
#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl RunStore {
    /// Starts a fresh run in `root`. An existing run there is an error
    /// unless `force` is set, in which case it is deleted.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.join(STATE_FILE).exists() {
            ensure!(
                force,
                Validation,
                "{} already holds a run; resume it or pass --force to overwrite",
                root.display()
            );
            Self::lock(root)?;
            fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
        }
        mkdir(root)?;
        Self::lock(root)?;
        Ok(Self { root: root.to_owned() })
    }

    /// Opens an existing run for resumption.
    pub fn open(root: &Path) -> Result<Self> {
        ensure!(
            root.join(STATE_FILE).exists(),
            Validation,
            "{} holds no run to resume",
            root.display()
        );
        Self::lock(root)?;
        Ok(Self { root: root.to_owned() })
    }

    fn lock(root: &Path) -> Result<()> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Validation(format!(
                "{} is locked by another process (remove {} if it is stale)",
                root.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn iter_dir(&self, iteration: usize) -> PathBuf {
        self.root.join(format!("iter_{iteration}"))
    }

    fn checkpoint_path(&self, iteration: usize, name: &str) -> PathBuf {
        self.iter_dir(iteration).join("checkpoints").join(format!("{name}.json"))
    }

    pub fn segmenter_path(&self, iteration: usize) -> PathBuf {
        self.checkpoint_path(iteration, "segmenter")
    }

    pub fn save_segmenter(&self, iteration: usize, model: &Segmenter, seed: u64) -> Result<()> {
        let path = self.segmenter_path(iteration);
        mkdir(path.parent().expect("has parent"))?;
        Checkpoint::new(ModelState::Segmenter(model.clone()), seed).save(&path)
    }

    pub fn load_segmenter(&self, iteration: usize) -> Result<Segmenter> {
        Segmenter::load(&self.segmenter_path(iteration))
    }

    pub fn save_helpers(&self, iteration: usize, helpers: &Helpers, seed: u64) -> Result<()> {
        let dir = self.iter_dir(iteration).join("checkpoints");
        mkdir(&dir)?;
        if let Some(ms) = &helpers.ms {
            Checkpoint::new(ModelState::Promptable(ms.clone()), seed).save(&self.checkpoint_path(iteration, "ms"))?;
        }
        if let Some(an) = &helpers.an {
            Checkpoint::new(ModelState::Adapter(an.clone()), seed).save(&self.checkpoint_path(iteration, "an"))?;
        }
        Ok(())
    }

    /// Loads whichever helper checkpoints exist for `iteration`.
    pub fn load_helpers(&self, iteration: usize) -> Result<Helpers> {
        let ms = self.checkpoint_path(iteration, "ms");
        let an = self.checkpoint_path(iteration, "an");
        Ok(Helpers {
            ms: ms.exists().then(|| PointPromptNet::load(&ms)).transpose()?,
            an: an.exists().then(|| Adapter::load(&an)).transpose()?,
        })
    }

    /// Writes the three masks of every record as `.npy` plus the JSONL index.
    pub fn save_records(&self, iteration: usize, records: &[SelectionRecord]) -> Result<()> {
        let dir = self.iter_dir(iteration);
        mkdir(&dir.join("pseudolabels"))?;
        let path = dir.join("selection_records.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for r in records {
            let stem = sanitize(&r.slice_id);
            let rel = |tag: &str, mask| -> Result<String> {
                let rel = format!("pseudolabels/{stem}_{tag}.npy");
                write_mask_npy(&dir.join(&rel), mask)?;
                Ok(rel)
            };
            let row = RecordRow {
                slice_id: r.slice_id.clone(),
                iteration: r.iteration,
                ss_mask: rel("ss", &r.ss_mask)?,
                ms_mask: rel("ms", &r.ms_mask)?,
                an_mask: rel("an", &r.an_mask)?,
                agreement_dsc: r.agreement_dsc,
                accepted: r.accepted,
                prompt: r.prompt,
                stage2_skipped: r.prompt.is_none(),
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load_records(&self, iteration: usize) -> Result<Vec<SelectionRecord>> {
        let dir = self.iter_dir(iteration);
        let path = dir.join("selection_records.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: RecordRow = serde_json::from_str(&line)?;
            out.push(SelectionRecord {
                slice_id: row.slice_id,
                iteration: row.iteration,
                ss_mask: read_mask_npy(&dir.join(&row.ss_mask))?,
                ms_mask: read_mask_npy(&dir.join(&row.ms_mask))?,
                an_mask: read_mask_npy(&dir.join(&row.an_mask))?,
                agreement_dsc: row.agreement_dsc,
                accepted: row.accepted,
                prompt: row.prompt,
            });
        }
        Ok(out)
    }

    pub fn save_metrics(&self, summary: &IterationSummary) -> Result<()> {
        let dir = self.iter_dir(summary.iteration);
        mkdir(&dir)?;
        write_json(&dir.join("metrics.json"), summary)
    }

    pub fn save_state(&self, state: &RunState) -> Result<()> {
        write_json(&self.root.join(STATE_FILE), state)
    }

    pub fn load_state(&self) -> Result<RunState> {
        let state: RunState = read_json(&self.root.join(STATE_FILE))?;
        ensure!(
            state.schema_version == STATE_SCHEMA_VERSION,
            Validation,
            "run state schema {} is not supported (expected {STATE_SCHEMA_VERSION})",
            state.schema_version
        );
        Ok(state)
    }

    /// Relative path (from the run root) of an accepted record's AN mask.
    pub(crate) fn pseudo_mask_rel(iteration: usize, slice_id: &str) -> String {
        format!("iter_{iteration}/pseudolabels/{}_an.npy", sanitize(slice_id))
    }
}

impl Drop for RunStore {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}
