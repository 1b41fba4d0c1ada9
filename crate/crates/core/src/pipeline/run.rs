use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::stages::{click_seed, evaluate_segmenter, stage1_infer, stage1_train, stage2_prompt_predict, stage3_refine};
use super::store::{PseudoEntry, RunState, RunStore};
use super::{expand_labeled_set, select_reliable, Helpers, PipelineConfig, SelectionRecord};
use crate::data::read_mask_npy;
use crate::data::{DatasetState, LabeledSample, Origin};
use crate::error::{ensure, Error, Result};
use crate::metrics::MetricReport;
use crate::models::Segmenter;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    NoAcceptance,
    NoImprovement,
}

/// What happened in one outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    /// Best validation DSC of this round's segmenter.
    pub val_dsc: Option<f64>,
    pub best_step: usize,
    pub val_curve: Vec<(usize, f64)>,
    /// Partition sizes the segmenter was trained on.
    pub labeled: usize,
    pub pseudo_labeled: usize,
    pub unlabeled: usize,
    /// Selection outcome; all zero when the loop stopped before selecting.
    pub candidates: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub stage2_skipped: usize,
    /// Test-split metrics of this round's segmenter.
    pub test: Option<MetricReport>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Segmenter of the iteration with the best validation DSC.
    pub model: Segmenter,
    pub best_iteration: usize,
    pub history: Vec<IterationSummary>,
    pub records: Vec<SelectionRecord>,
    pub state: DatasetState,
    pub stop: StopReason,
}

/// Runs the loop from scratch, persisting to `store` when given.
/// `on_iteration` sees each summary as soon as the iteration is complete.
pub fn run(
    state: DatasetState,
    cfg: &PipelineConfig,
    store: Option<&RunStore>,
    on_iteration: impl FnMut(&IterationSummary),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let progress = RunState::new(cfg.clone());
    if let Some(s) = store {
        s.save_state(&progress)?;
    }
    Driver::start(state, cfg, store, progress, Vec::new(), None, Helpers::default())?.go(on_iteration)
}

/// Continues a persisted run after its last completed iteration. `initial`
/// must be the partition the run started from.
pub fn resume(
    initial: DatasetState,
    store: &RunStore,
    on_iteration: impl FnMut(&IterationSummary),
) -> Result<RunOutcome> {
    let mut progress = store.load_state()?;
    progress.last_error = None;
    let cfg = progress.config.clone();
    cfg.validate()?;
    let state = replay(initial, &progress, store)?;
    let mut records = Vec::new();
    for k in 1..=progress.completed {
        records.extend(store.load_records(k)?);
    }
    let prev = match progress.completed {
        0 => None,
        k => Some(store.load_segmenter(k)?),
    };
    let helpers = if progress.completed > 0 && !cfg.pipeline.refresh_helpers {
        store.load_helpers(1)?
    } else {
        Helpers::default()
    };
    Driver::start(state, &cfg, Some(store), progress, records, prev, helpers)?.go(on_iteration)
}

/// Re-applies the persisted pseudo-label moves to the initial partition.
fn replay(mut state: DatasetState, progress: &RunState, store: &RunStore) -> Result<DatasetState> {
    ensure!(
        state.labeled.iter().all(|s| s.origin == Origin::Original),
        Consistency,
        "resume needs the initial partition, which has no pseudo-labeled slices"
    );
    let mut unlabeled: HashMap<String, _> = state.unlabeled.drain(..).map(|s| (s.id.clone(), s)).collect();
    for entry in &progress.pseudo {
        let slice = unlabeled.remove(&entry.slice_id).ok_or_else(|| {
            Error::Consistency(format!(
                "persisted pseudo-label {} is not an unlabeled slice of this corpus",
                entry.slice_id
            ))
        })?;
        let mask = read_mask_npy(&store.root().join(&entry.mask))?;
        state.labeled.push(LabeledSample::new(slice, mask, Origin::Pseudo)?);
    }
    let mut rest: Vec<_> = unlabeled.into_values().collect();
    rest.sort_by(|a, b| a.id.cmp(&b.id));
    state.unlabeled = rest;
    state.iteration = progress.completed;
    state.check_disjoint()?;
    Ok(state)
}

struct Driver<'a> {
    cfg: &'a PipelineConfig,
    store: Option<&'a RunStore>,
    state: DatasetState,
    progress: RunState,
    records: Vec<SelectionRecord>,
    prev: Option<Segmenter>,
    best: Option<Segmenter>,
    helpers: Helpers,
}

impl<'a> Driver<'a> {
    fn start(
        state: DatasetState,
        cfg: &'a PipelineConfig,
        store: Option<&'a RunStore>,
        progress: RunState,
        records: Vec<SelectionRecord>,
        prev: Option<Segmenter>,
        helpers: Helpers,
    ) -> Result<Self> {
        state.check_disjoint()?;
        let best = match (store, progress.best_iteration) {
            (Some(s), Some(k)) => Some(s.load_segmenter(k)?),
            _ => None,
        };
        Ok(Self {
            cfg,
            store,
            state,
            progress,
            records,
            prev,
            best,
            helpers,
        })
    }

    fn go(mut self, mut on_iteration: impl FnMut(&IterationSummary)) -> Result<RunOutcome> {
        while self.progress.stop.is_none() {
            let k = self.progress.completed + 1;
            if let Err(e) = self.iteration(k) {
                self.progress.last_error = Some(e.to_string());
                if let Some(s) = self.store {
                    s.save_state(&self.progress)?;
                }
                return Err(e);
            }
            on_iteration(self.progress.history.last().expect("iteration pushed a summary"));
        }
        let best_iteration = self.progress.best_iteration.expect("at least one iteration ran");
        Ok(RunOutcome {
            model: self.best.expect("best tracked with history"),
            best_iteration,
            history: self.progress.history,
            records: self.records,
            state: self.state,
            stop: self.progress.stop.expect("loop exits on stop"),
        })
    }

    fn iteration(&mut self, k: usize) -> Result<()> {
        let cfg = self.cfg;
        let p = &cfg.pipeline;
        let init = if p.warm_start { self.prev.as_ref() } else { None };
        let out = stage1_train(&self.state, cfg, init, k)?;
        let test = if self.state.test.is_empty() {
            None
        } else {
            Some(evaluate_segmenter(&out.model, &format!("iter {k}"), &self.state.test)?)
        };
        let pseudo_labeled = self.state.labeled.iter().filter(|s| s.origin == Origin::Pseudo).count();
        let mut summary = IterationSummary {
            iteration: k,
            val_dsc: out.val_dsc,
            best_step: out.best_step,
            val_curve: out.curve.clone(),
            labeled: self.state.labeled.len(),
            pseudo_labeled,
            unlabeled: self.state.unlabeled.len(),
            candidates: 0,
            accepted: 0,
            rejected: 0,
            stage2_skipped: 0,
            test,
        };

        let best_val = self
            .progress
            .history
            .iter()
            .filter_map(|h| h.val_dsc)
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        let improved = match (best_val, out.val_dsc) {
            (None, _) | (_, None) => true,
            (Some(b), Some(v)) => v > b,
        };
        if improved || self.best.is_none() {
            self.best = Some(out.model.clone());
            self.progress.best_iteration = Some(k);
        }
        self.progress.since_improvement = if improved { 0 } else { self.progress.since_improvement + 1 };
        let mut stop = if self.progress.since_improvement >= p.patience {
            Some(StopReason::NoImprovement)
        } else if k >= p.max_iterations {
            Some(StopReason::MaxIterations)
        } else {
            None
        };

        let mut records = Vec::new();
        if stop.is_none() {
            let (accepted, rejected) = self.select(&out.model, k)?;
            summary.candidates = accepted.len() + rejected.len();
            summary.accepted = accepted.len();
            summary.rejected = rejected.len();
            summary.stage2_skipped = accepted.iter().chain(&rejected).filter(|r| r.prompt.is_none()).count();
            let next = expand_labeled_set(std::mem::take(&mut self.state), &accepted)?;
            self.state = next;
            self.state.iteration = k;
            for r in &accepted {
                self.progress.pseudo.push(PseudoEntry {
                    slice_id: r.slice_id.clone(),
                    iteration: k,
                    mask: RunStore::pseudo_mask_rel(k, &r.slice_id),
                });
            }
            if accepted.is_empty() {
                stop = Some(StopReason::NoAcceptance);
            }
            records = accepted;
            records.extend(rejected);
            records.sort_by(|a, b| a.slice_id.cmp(&b.slice_id));
        }

        if let Some(s) = self.store {
            s.save_segmenter(k, &out.model, p.seed)?;
            if k == 1 || p.refresh_helpers {
                s.save_helpers(k, &self.helpers, p.seed)?;
            }
            s.save_records(k, &records)?;
            s.save_metrics(&summary)?;
        }
        self.records.extend(records);
        self.progress.history.push(summary);
        self.progress.completed = k;
        self.progress.stop = stop;
        if let Some(s) = self.store {
            s.save_state(&self.progress)?;
        }
        self.prev = Some(out.model);
        Ok(())
    }

    /// Stages 1 to 3 over every unlabeled slice, then the agreement gate.
    fn select(&mut self, model: &Segmenter, k: usize) -> Result<(Vec<SelectionRecord>, Vec<SelectionRecord>)> {
        let cfg = self.cfg;
        let p = &cfg.pipeline;
        let need = (p.use_ms && self.helpers.ms.is_none()) || (p.use_an && self.helpers.an.is_none());
        if need || (p.refresh_helpers && k > 1) {
            self.helpers = super::train_helpers(&self.state, cfg, k)?;
        }
        let proposals = stage1_infer(model, &self.state.unlabeled)?;
        let mut records = Vec::with_capacity(proposals.len());
        for (i, (slice, (id, ss))) in self.state.unlabeled.iter().zip(proposals).enumerate() {
            debug_assert_eq!(slice.id, id);
            let stage2 = match &self.helpers.ms {
                Some(ms) => stage2_prompt_predict(ms, slice, &ss, click_seed(p.seed, k, i))?,
                None => super::PromptOutcome {
                    mask: ss.clone(),
                    prompt: None,
                },
            };
            let an = match &self.helpers.an {
                Some(an) => stage3_refine(an, slice, &stage2.mask, k)?.mask,
                None => stage2.mask.clone(),
            };
            records.push(SelectionRecord::new(id, k, ss, stage2.mask, an, stage2.prompt)?);
        }
        Ok(select_reliable(records, p.beta, p.accept_empty_agreement))
    }
}
