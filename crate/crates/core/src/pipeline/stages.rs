use crate::data::{DatasetState, LabeledSample, Mask, PseudoLabel, Slice, Stage};
use crate::error::{ensure, Result};
use crate::metrics::MetricReport;
use crate::models::{
    fine_tune_promptable, sample_random_click, train_adapter, train_ssl, Adapter, PointPrompt, PointPromptNet,
    PromptableSegmenter, Segmenter, SegmenterConfig,
};
use crate::perturb::build_adaptation_training_set;

use super::{derive_seed, PipelineConfig};

const SEED_SS: u64 = 1;
const SEED_MS: u64 = 2;
const SEED_AN: u64 = 3;
const SEED_CLICK: u64 = 4;

/// Chunk size for batched inference.
const INFER_CHUNK: usize = 32;

/// Scores `model` on `samples` with thresholded predictions.
pub fn evaluate_segmenter(model: &Segmenter, name: &str, samples: &[LabeledSample]) -> Result<MetricReport> {
    let slices: Vec<&Slice> = samples.iter().map(|s| &s.slice).collect();
    let preds = predict_masks(model, &slices)?;
    MetricReport::evaluate(
        name,
        samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| (s.slice.id.as_str(), p, &s.mask)),
    )
}

fn predict_masks(model: &Segmenter, slices: &[&Slice]) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(INFER_CHUNK) {
        out.extend(model.predict_batch(chunk)?.into_iter().map(|p| p.to_mask()));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    /// Weights with the best validation DSC seen during training.
    pub model: Segmenter,
    pub best_step: usize,
    /// `None` when the validation split is empty (the final weights are kept).
    pub val_dsc: Option<f64>,
    /// `(step, validation DSC)` at every evaluation.
    pub curve: Vec<(usize, f64)>,
}

/// Trains the semi-supervised segmenter on the current labeled and unlabeled
/// slices, starting from `init` when given. Pseudo-labeled slices count the
/// same as original ones.
pub fn stage1_train(
    state: &DatasetState,
    cfg: &PipelineConfig,
    init: Option<&Segmenter>,
    iteration: usize,
) -> Result<Stage1Outcome> {
    ensure!(
        !state.labeled.is_empty(),
        Config,
        "stage 1 needs at least one labeled slice"
    );
    let seed = derive_seed(cfg.pipeline.seed, SEED_SS, iteration);
    let mut model = match init {
        Some(m) => m.clone(),
        None => Segmenter::new(
            SegmenterConfig {
                in_channels: 1,
                ..cfg.model
            },
            seed,
        )?,
    };
    let total = cfg.ssl.iterations;
    let every = cfg.pipeline.eval_every;
    let mut best: Option<(f64, usize, Segmenter)> = None;
    let mut curve = Vec::new();
    train_ssl(
        &mut model,
        &state.labeled,
        &state.unlabeled,
        &cfg.ssl,
        &cfg.loss,
        cfg.pipeline.warmup_fraction,
        seed,
        |m, stats| {
            if state.validation.is_empty() || (stats.step % every != 0 && stats.step != total) {
                return Ok(());
            }
            let dsc = evaluate_segmenter(m, "validation", &state.validation)?.summary.dsc.mean;
            curve.push((stats.step, dsc));
            if best.as_ref().is_none_or(|(b, _, _)| dsc > *b) {
                best = Some((dsc, stats.step, m.clone()));
            }
            Ok(())
        },
    )?;
    Ok(match best {
        Some((dsc, step, m)) => Stage1Outcome {
            model: m,
            best_step: step,
            val_dsc: Some(dsc),
            curve,
        },
        None => Stage1Outcome {
            model,
            best_step: total,
            val_dsc: None,
            curve,
        },
    })
}

/// Thresholded inference-mode prediction for every unlabeled slice.
pub fn stage1_infer(model: &Segmenter, unlabeled: &[Slice]) -> Result<Vec<(String, Mask)>> {
    let slices: Vec<&Slice> = unlabeled.iter().collect();
    let masks = predict_masks(model, &slices)?;
    Ok(unlabeled.iter().map(|s| s.id.clone()).zip(masks).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptOutcome {
    pub mask: Mask,
    /// `None` when the SS mask was empty and prompting was skipped.
    pub prompt: Option<PointPrompt>,
}

impl PromptOutcome {
    pub fn skipped(&self) -> bool {
        self.prompt.is_none()
    }
}

/// Prompts MS with one random click inside `ss_mask`. An empty `ss_mask`
/// passes through unchanged.
pub fn stage2_prompt_predict(
    ms: &dyn PromptableSegmenter,
    slice: &Slice,
    ss_mask: &Mask,
    seed: u64,
) -> Result<PromptOutcome> {
    ensure!(
        slice.shape() == ss_mask.shape(),
        Validation,
        "slice {} has shape {:?} but its SS mask has {:?}",
        slice.id,
        slice.shape(),
        ss_mask.shape()
    );
    if ss_mask.is_empty() {
        return Ok(PromptOutcome {
            mask: ss_mask.clone(),
            prompt: None,
        });
    }
    let prompt = sample_random_click(ss_mask, seed)?;
    Ok(PromptOutcome {
        mask: ms.predict(slice, &prompt)?.to_mask(),
        prompt: Some(prompt),
    })
}

/// AN refinement of the stage-2 mask.
pub fn stage3_refine(an: &Adapter, slice: &Slice, ms_mask: &Mask, iteration: usize) -> Result<PseudoLabel> {
    Ok(PseudoLabel {
        slice_id: slice.id.clone(),
        mask: an.refine(slice, ms_mask)?.to_mask(),
        stage: Stage::AN,
        agreement_dsc: None,
        iteration,
    })
}

/// The frozen stage-2 and stage-3 networks; either may be disabled.
#[derive(Clone, Debug, Default)]
pub struct Helpers {
    pub ms: Option<PointPromptNet>,
    pub an: Option<Adapter>,
}

/// Fine-tunes MS and trains AN on the labeled tumor slices. Only originally
/// labeled slices are used unless `refresh_helpers` is set.
pub fn train_helpers(state: &DatasetState, cfg: &PipelineConfig, iteration: usize) -> Result<Helpers> {
    let p = &cfg.pipeline;
    if !p.use_ms && !p.use_an {
        return Ok(Helpers::default());
    }
    let d_sam: Vec<LabeledSample> = if p.refresh_helpers {
        state.labeled.iter().filter(|s| !s.mask.is_empty()).cloned().collect()
    } else {
        state.labeled_tumor_samples().cloned().collect()
    };
    ensure!(
        !d_sam.is_empty(),
        Validation,
        "the labeled set has no tumor slices to train the refinement networks on"
    );
    let backbone = SegmenterConfig {
        in_channels: 2,
        ..cfg.model
    };
    let ms = if p.use_ms {
        let seed = derive_seed(p.seed, SEED_MS, iteration);
        let mut ms = PointPromptNet::new(backbone, seed)?;
        fine_tune_promptable(&mut ms, &d_sam, &cfg.ms, p.click_policy, &cfg.loss, seed)?;
        Some(ms)
    } else {
        None
    };
    let an = if p.use_an {
        let seed = derive_seed(p.seed, SEED_AN, iteration);
        let set = build_adaptation_training_set(&d_sam, p.an_replication, &cfg.perturb, seed)?;
        let mut an = Adapter::new(backbone, seed)?;
        train_adapter(&mut an, &set, &cfg.an, &cfg.loss, seed)?;
        Some(an)
    } else {
        None
    };
    Ok(Helpers { ms, an })
}

/// Seed for the stage-2 click on the `index`-th unlabeled slice.
pub fn click_seed(base: u64, iteration: usize, index: usize) -> u64 {
    derive_seed(derive_seed(base, SEED_CLICK, iteration), SEED_CLICK, index)
}
