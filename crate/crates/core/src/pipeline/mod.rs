//! The three-stage self-training loop: semi-supervised training, prompted and
//! adapted refinement of the resulting pseudo-labels, DSC-gated selection and
//! labeled-set expansion.

mod run;
mod stages;
mod store;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetState, LabeledSample, Mask, Origin};
use crate::error::{ensure, Error, Result};
use crate::losses::LossWeights;
use crate::metrics::dice_coefficient;
use crate::models::{ClickPolicy, PointPrompt, SegmenterConfig, TrainConfig};
use crate::perturb::PerturbConfig;

pub use run::{resume, run, IterationSummary, RunOutcome, StopReason};
pub use stages::{
    click_seed, evaluate_segmenter, stage1_infer, stage1_train, stage2_prompt_predict, stage3_refine, train_helpers, Helpers,
    PromptOutcome, Stage1Outcome,
};
pub use store::{RecordRow, RunState, RunStore, LOCK_FILE, STATE_FILE};

/// Outer-loop settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Minimum SS/AN agreement DSC for a pseudo-label to be accepted.
    pub beta: f64,
    pub max_iterations: usize,
    /// Iterations without a validation improvement before stopping.
    pub patience: usize,
    /// Accept slices where both SS and AN predict no tumor.
    pub accept_empty_agreement: bool,
    pub use_ms: bool,
    pub use_an: bool,
    /// Re-train MS and AN every iteration on the current labeled tumor slices.
    pub refresh_helpers: bool,
    /// Start each SS round from the previous round's best weights.
    pub warm_start: bool,
    /// Fraction of SS steps over which the consistency weight ramps up.
    pub warmup_fraction: f64,
    /// Validation interval in SS steps for best-checkpoint selection.
    pub eval_every: usize,
    pub click_policy: ClickPolicy,
    /// Copies of each labeled tumor slice in the adaptation training set.
    pub an_replication: usize,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            beta: 0.9,
            max_iterations: 4,
            patience: 1,
            accept_empty_agreement: true,
            use_ms: true,
            use_an: true,
            refresh_helpers: false,
            warm_start: true,
            warmup_fraction: 0.1,
            eval_every: 1000,
            click_policy: ClickPolicy::default(),
            an_replication: 20,
            seed: 0,
        }
    }
}

/// Everything a pipeline run needs besides the data.
/// Defaults to the [`PipelineConfig::corpus`] preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub pipeline: LoopConfig,
    /// Backbone shared by SS, MS and AN; `in_channels` is set per network.
    pub model: SegmenterConfig,
    pub ssl: TrainConfig,
    pub ms: TrainConfig,
    pub an: TrainConfig,
    pub loss: LossWeights,
    pub perturb: PerturbConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::corpus()
    }
}

impl PipelineConfig {
    /// Full-size schedule: 27000 SS steps at batch 16 and lr 0.01.
    pub fn corpus() -> Self {
        Self {
            ssl: TrainConfig {
                iterations: 27_000,
                batch_size: 16,
                lr: 0.01,
                ..TrainConfig::default()
            },
            ms: TrainConfig {
                iterations: 2000,
                batch_size: 8,
                ..TrainConfig::default()
            },
            an: TrainConfig {
                iterations: 200,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ..Self::default_parts()
        }
    }

    /// Single-core schedule for 64x64 synthetic slices, a few minutes per run.
    pub fn desk() -> Self {
        let fast = TrainConfig {
            batch_size: 8,
            lr: 0.05,
            grad_clip: 1.0,
            ..TrainConfig::default()
        };
        Self {
            pipeline: LoopConfig {
                eval_every: 100,
                ..LoopConfig::default()
            },
            model: SegmenterConfig {
                in_channels: 1,
                base_channels: 8,
                depth: 3,
                dropout: 0.1,
            },
            ssl: TrainConfig { iterations: 600, ..fast },
            ms: TrainConfig { iterations: 200, ..fast },
            an: TrainConfig {
                iterations: 200,
                batch_size: 8,
                lr: 0.01,
                ..TrainConfig::default()
            },
            ..Self::default_parts()
        }
    }

    fn default_parts() -> Self {
        Self {
            pipeline: LoopConfig::default(),
            model: SegmenterConfig::default(),
            ssl: TrainConfig::default(),
            ms: TrainConfig::default(),
            an: TrainConfig::default(),
            loss: LossWeights::default(),
            perturb: PerturbConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        ensure!(
            p.beta.is_finite() && (0.0..=1.0).contains(&p.beta),
            Config,
            "pipeline.beta {} outside [0, 1]",
            p.beta
        );
        ensure!(p.max_iterations >= 1, Config, "pipeline.max_iterations must be >= 1");
        ensure!(p.patience >= 1, Config, "pipeline.patience must be >= 1");
        ensure!(p.eval_every >= 1, Config, "pipeline.eval_every must be >= 1");
        ensure!(p.an_replication >= 1, Config, "pipeline.an_replication must be >= 1");
        ensure!(
            (0.0..=1.0).contains(&p.warmup_fraction),
            Config,
            "pipeline.warmup_fraction {} outside [0, 1]",
            p.warmup_fraction
        );
        if let ClickPolicy::Iterative { max_rounds } = p.click_policy {
            ensure!(max_rounds >= 1, Config, "pipeline.click_policy.max_rounds must be >= 1");
        }
        self.model.validate()?;
        for (name, t) in [("ssl", &self.ssl), ("ms", &self.ms), ("an", &self.an)] {
            t.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        self.loss.validate()?;
        self.perturb.validate()
    }
}

/// Per-purpose seed derived from the run seed, so stages do not share streams.
pub(crate) fn derive_seed(base: u64, tag: u64, iteration: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(tag);
    rng.set_word_pos(16 * iteration as u128);
    rng.random()
}

/// Audit entry for one unlabeled slice in one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionRecord {
    pub slice_id: String,
    pub iteration: usize,
    pub ss_mask: Mask,
    pub ms_mask: Mask,
    pub an_mask: Mask,
    /// DSC between the SS and AN masks, 1 when both are empty.
    pub agreement_dsc: f64,
    pub accepted: bool,
    /// Click given to MS; `None` when stage 2 was skipped.
    pub prompt: Option<PointPrompt>,
}

impl SelectionRecord {
    pub fn new(
        slice_id: impl Into<String>,
        iteration: usize,
        ss_mask: Mask,
        ms_mask: Mask,
        an_mask: Mask,
        prompt: Option<PointPrompt>,
    ) -> Result<Self> {
        let agreement_dsc = dice_coefficient(&ss_mask, &an_mask)?;
        ensure!(
            ms_mask.shape() == ss_mask.shape(),
            Validation,
            "MS mask shape {:?} differs from SS mask shape {:?}",
            ms_mask.shape(),
            ss_mask.shape()
        );
        Ok(Self {
            slice_id: slice_id.into(),
            iteration,
            ss_mask,
            ms_mask,
            an_mask,
            agreement_dsc,
            accepted: false,
            prompt,
        })
    }

    pub fn both_empty(&self) -> bool {
        self.ss_mask.is_empty() && self.an_mask.is_empty()
    }
}

/// The acceptance rule: agreement at least `beta`, and empty/empty pairs only
/// when `accept_empty_agreement` is set.
pub fn is_reliable(agreement_dsc: f64, both_empty: bool, beta: f64, accept_empty_agreement: bool) -> bool {
    agreement_dsc >= beta && (!both_empty || accept_empty_agreement)
}

/// Marks every record and splits them into `(accepted, rejected)`.
pub fn select_reliable(
    records: Vec<SelectionRecord>,
    beta: f64,
    accept_empty_agreement: bool,
) -> (Vec<SelectionRecord>, Vec<SelectionRecord>) {
    let (mut accepted, mut rejected) = (Vec::new(), Vec::new());
    for mut r in records {
        r.accepted = is_reliable(r.agreement_dsc, r.both_empty(), beta, accept_empty_agreement);
        if r.accepted {
            accepted.push(r);
        } else {
            rejected.push(r);
        }
    }
    (accepted, rejected)
}

/// Moves accepted slices from unlabeled to labeled with their AN masks.
/// Either every record moves or the state is returned untouched in the error.
pub fn expand_labeled_set(mut state: DatasetState, accepted: &[SelectionRecord]) -> Result<DatasetState> {
    let mut ids = HashSet::new();
    for r in accepted {
        ensure!(
            ids.insert(r.slice_id.as_str()),
            Consistency,
            "slice {} accepted twice",
            r.slice_id
        );
        ensure!(
            r.accepted,
            Consistency,
            "record for slice {} was not accepted",
            r.slice_id
        );
        let slice = state.unlabeled.iter().find(|s| s.id == r.slice_id).ok_or_else(|| {
            Error::Consistency(format!("slice {} is not in the unlabeled set", r.slice_id))
        })?;
        ensure!(
            slice.shape() == r.an_mask.shape(),
            Validation,
            "pseudo-label for {} has shape {:?}, slice has {:?}",
            r.slice_id,
            r.an_mask.shape(),
            slice.shape()
        );
    }
    let (moving, staying): (Vec<_>, Vec<_>) = std::mem::take(&mut state.unlabeled)
        .into_iter()
        .partition(|s| ids.contains(s.id.as_str()));
    state.unlabeled = staying;
    for slice in moving {
        let mask = accepted
            .iter()
            .find(|r| r.slice_id == slice.id)
            .map(|r| r.an_mask.clone())
            .expect("id collected above");
        state.labeled.push(LabeledSample::new(slice, mask, Origin::Pseudo)?);
    }
    state.check_disjoint()?;
    Ok(state)
}
