use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use clap::Args;
use image::GrayImage;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use tumorseg::data::{
    clip_and_normalize, filter_small_tumors, generate_synthetic_corpus_with, load_corpus, load_nifti_pairs,
    make_partition, read_nifti_volume, save_corpus, volume_to_slices, write_mask_npy, LabeledSample, Manifest, Mask,
    PartitionName, Slice, MANIFEST_FILE,
};
use tumorseg::metrics::{render_table, MetricReport};
use tumorseg::models::{Adapter, PointPromptNet, Segmenter};
use tumorseg::pipeline::{
    self, click_seed, stage2_prompt_predict, stage3_refine, IterationSummary, RunState, RunStore, StopReason,
    STATE_FILE,
};
use tumorseg::{Error, Result};

use crate::config::Config;
use crate::plots;
use crate::ConfigArgs;

pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.toml";
pub const TABLE_FILE: &str = "table.txt";

fn load_config(args: &ConfigArgs, extra: Vec<String>) -> Result<Config> {
    let env: Vec<(String, String)> = std::env::vars().collect();
    let mut sets = args.sets.clone();
    sets.extend(extra);
    Config::load(args.config.as_deref(), &env, &sets)
}

fn overrides(pairs: &[(&str, Option<String>)]) -> Vec<String> {
    pairs
        .iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| format!("{k}={v}")))
        .collect()
}

/// Refuses to overwrite an existing corpus unless `force` is set.
fn prepare_corpus_dir(out: &Path, force: bool) -> Result<()> {
    if out.join(MANIFEST_FILE).exists() {
        if !force {
            return Err(Error::Validation(format!(
                "{} already holds a corpus; pass --force to overwrite",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn print_counts(manifest: &Manifest, out: &Path) {
    let counts: BTreeMap<String, usize> = manifest
        .counts()
        .into_iter()
        .map(|(k, v)| (format!("{k:?}").to_lowercase(), v))
        .collect();
    let tumor_free = manifest.entries.iter().filter(|e| !e.has_tumor).count();
    println!(
        "{}",
        serde_json::json!({
            "corpus": out,
            "slices": manifest.entries.len(),
            "tumor_free": tumor_free,
            "partitions": counts,
        })
    );
}

pub fn synth(out: &Path, n: Option<usize>, size: Option<usize>, seed: Option<u64>, force: bool, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(
        args,
        overrides(&[
            ("synth.n", n.map(|v| v.to_string())),
            ("synth.size", size.map(|v| v.to_string())),
            ("synth.seed", seed.map(|v| v.to_string())),
        ]),
    )?;
    prepare_corpus_dir(out, force)?;
    let s = &cfg.synth;
    let corpus = generate_synthetic_corpus_with(s.n, s.size, s.size, s.seed, &s.generator);
    let state = make_partition(corpus.clone(), cfg.partition, s.seed)?;
    let manifest = Manifest::from_state("synthetic", s.seed, &state);
    save_corpus(out, &corpus, &manifest)?;
    print_counts(&manifest, out);
    Ok(())
}

/// One volume that failed preprocessing.
#[derive(Debug, Serialize)]
pub struct FileError {
    pub volume: String,
    pub error: String,
    pub message: String,
}

fn preprocess_volume(
    stem: &str,
    image: &Path,
    label: &Path,
    cfg: &crate::config::PreprocessSection,
) -> Result<Vec<(Slice, Mask)>> {
    let volume = read_nifti_volume(image)?;
    let raw = read_nifti_volume(label)?;
    let tumor = raw.mapv(|v| u8::from(v.round() as i64 == i64::from(cfg.tumor_label)));
    let organ = raw.mapv(|v| v.round() as i64 != 0);
    let normalized = clip_and_normalize(&volume, cfg.window_lo, cfg.window_hi)?;
    let planes = volume_to_slices(stem, &normalized, Some(&tumor))?;
    let mut out = Vec::new();
    for (z, (slice, mask)) in planes.into_iter().enumerate() {
        if cfg.organ_planes_only && !organ.index_axis(ndarray::Axis(2), z).iter().any(|&o| o) {
            continue;
        }
        let mask = filter_small_tumors(&mask.expect("labels were given"), cfg.min_tumor_pixels);
        let slice = Slice::new(slice.id.clone(), slice.image().to_owned(), !mask.is_empty())?;
        out.push((slice, mask));
    }
    Ok(out)
}

pub fn preprocess(input: &Path, out: &Path, seed: Option<u64>, force: bool, args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = load_config(args, overrides(&[("preprocess.seed", seed.map(|v| v.to_string()))]))?;
    let pairs = load_nifti_pairs(input)?;
    prepare_corpus_dir(out, force)?;
    let mut corpus = Vec::new();
    let mut failures = Vec::new();
    for pair in &pairs {
        match preprocess_volume(&pair.stem, &pair.image, &pair.label, &cfg.preprocess) {
            Ok(slices) => corpus.extend(slices),
            Err(e) => failures.push(FileError {
                volume: pair.stem.clone(),
                error: e.kind().to_string(),
                message: e.to_string(),
            }),
        }
    }
    if !failures.is_empty() {
        return Err(CliError {
            kind: "validation".into(),
            message: format!("{} of {} volumes could not be preprocessed", failures.len(), pairs.len()),
            files: failures,
        });
    }
    if corpus.is_empty() {
        return Err(Error::Validation("preprocessing produced no slices".into()).into());
    }
    let state = make_partition(corpus.clone(), cfg.partition, cfg.preprocess.seed)?;
    let manifest = Manifest::from_state(format!("nifti:{}", input.display()), cfg.preprocess.seed, &state);
    save_corpus(out, &corpus, &manifest)?;
    print_counts(&manifest, out);
    Ok(())
}

/// Failure reported by the binary; `files` lists per-volume problems.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub files: Vec<FileError>,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
            files: Vec::new(),
        }
    }
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Run directory name under `--out`.
    #[arg(long, default_value = "run")]
    pub name: String,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Overrides `pipeline.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue the run in the run directory after its last completed iteration.
    #[arg(long, conflicts_with_all = ["force", "config", "sets", "seed"])]
    pub resume: bool,
    /// Replace an existing run of the same name.
    #[arg(long)]
    pub force: bool,
}

/// One row of [`RunManifest::iterations`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub val_dsc: Option<f64>,
    pub test_dsc: Option<f64>,
    pub labeled: usize,
    pub pseudo_labeled: usize,
    pub unlabeled: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub stage2_skipped: usize,
    pub finished_at: String,
}

impl IterationRow {
    fn new(s: &IterationSummary) -> Self {
        Self {
            iteration: s.iteration,
            val_dsc: s.val_dsc,
            test_dsc: s.test.as_ref().map(|t| t.summary.dsc.mean),
            labeled: s.labeled,
            pseudo_labeled: s.pseudo_labeled,
            unlabeled: s.unlabeled,
            accepted: s.accepted,
            rejected: s.rejected,
            stage2_skipped: s.stage2_skipped,
            finished_at: now(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub pipeline: u64,
    pub partition: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub code_version: String,
    pub corpus: PathBuf,
    pub config: Config,
    pub seeds: Seeds,
    pub started_at: String,
    pub updated_at: String,
    pub finished_at: Option<String>,
    pub best_iteration: Option<usize>,
    pub stop: Option<StopReason>,
    pub iterations: Vec<IterationRow>,
}

fn now() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    write_text(&dir.join(RUN_MANIFEST_FILE), &(serde_json::to_string_pretty(m)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Stage-1-only row (the first iteration) and the selected iteration's row.
pub fn final_reports(history: &[IterationSummary], best: usize) -> Vec<MetricReport> {
    let mut out = Vec::new();
    if let Some(mut r) = history.first().and_then(|h| h.test.clone()) {
        r.method = "Stage 1 only".into();
        out.push(r);
    }
    if let Some(mut r) = history.iter().find(|h| h.iteration == best).and_then(|h| h.test.clone()) {
        r.method = format!("Full pipeline (iteration {best})");
        out.push(r);
    }
    out
}

pub fn run(args: &RunArgs) -> Result<()> {
    let dir = args.out.join(&args.name);
    let (corpus_manifest, samples) = load_corpus(&args.corpus)?;
    let (initial, _hidden) = corpus_manifest.to_state(samples)?;
    let (store, mut manifest) = if args.resume {
        let store = RunStore::open(&dir)?;
        let manifest: RunManifest = read_json(&dir.join(RUN_MANIFEST_FILE))?;
        (store, manifest)
    } else {
        let cfg = load_config(&args.cfg, overrides(&[("pipeline.seed", args.seed.map(|v| v.to_string()))]))?;
        let store = RunStore::create(&dir, args.force)?;
        write_text(&dir.join(CONFIG_SNAPSHOT_FILE), &cfg.to_toml()?)?;
        let started = now();
        let manifest = RunManifest {
            name: args.name.clone(),
            code_version: format!("tumorseg {}", env!("CARGO_PKG_VERSION")),
            corpus: args.corpus.clone(),
            seeds: Seeds {
                pipeline: cfg.pipeline.seed,
                partition: corpus_manifest.partition_seed,
            },
            config: cfg,
            started_at: started.clone(),
            updated_at: started,
            finished_at: None,
            best_iteration: None,
            stop: None,
            iterations: Vec::new(),
        };
        write_run_manifest(&dir, &manifest)?;
        (store, manifest)
    };

    let pending: RefCell<Option<Error>> = RefCell::new(None);
    let manifest_cell = RefCell::new(&mut manifest);
    let on_iteration = |s: &IterationSummary| {
        if let Some(test) = &s.test {
            println!("iteration {} (validation DSC {})", s.iteration, fmt_opt(s.val_dsc));
            print!("{}", render_table(std::slice::from_ref(test)));
        }
        let mut m = manifest_cell.borrow_mut();
        m.iterations.retain(|r| r.iteration != s.iteration);
        m.iterations.push(IterationRow::new(s));
        m.updated_at = now();
        if let Err(e) = write_run_manifest(&dir, &m) {
            pending.borrow_mut().get_or_insert(e);
        }
    };
    let outcome = if args.resume {
        pipeline::resume(initial, &store, on_iteration)
    } else {
        let cfg = manifest_cell.borrow().config.pipeline_config();
        pipeline::run(initial, &cfg, Some(&store), on_iteration)
    };
    if let Some(e) = pending.into_inner() {
        return Err(e);
    }
    let outcome = outcome?;
    let manifest = manifest_cell.into_inner();
    manifest.best_iteration = Some(outcome.best_iteration);
    manifest.stop = Some(outcome.stop);
    manifest.finished_at = Some(now());
    manifest.updated_at = manifest.finished_at.clone().unwrap_or_default();
    write_run_manifest(&dir, manifest)?;

    let table = render_table(&final_reports(&outcome.history, outcome.best_iteration));
    write_text(&dir.join(TABLE_FILE), &table)?;
    println!(
        "stopped after iteration {} ({:?}); best iteration {}",
        outcome.history.len(),
        outcome.stop,
        outcome.best_iteration
    );
    print!("{table}");
    plots::render_all(&dir, &outcome.history)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

pub fn report(run_dir: &Path) -> Result<()> {
    let state: RunState = read_json(&run_dir.join(STATE_FILE))?;
    if state.history.is_empty() {
        return Err(Error::Validation(format!("{} has no completed iterations", run_dir.display())));
    }
    let paths = plots::render_all(run_dir, &state.history)?;
    let reports: Vec<MetricReport> = state
        .history
        .iter()
        .filter_map(|h| {
            h.test.clone().map(|mut r| {
                r.method = format!("iteration {}", h.iteration);
                r
            })
        })
        .collect();
    if !reports.is_empty() {
        print!("{}", render_table(&reports));
    }
    if let Some(best) = state.best_iteration {
        print!("{}", render_table(&final_reports(&state.history, best)));
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Segmenter checkpoint file, or a run directory (uses its best iteration).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// labeled, unlabeled, validation or test. Unlabeled slices are scored against their hidden masks.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Skip the prompted refinement stage.
    #[arg(long)]
    pub no_ms: bool,
    /// Skip the adaptation stage.
    #[arg(long)]
    pub no_an: bool,
    /// Promptable segmenter checkpoint (defaults to the run's when `--checkpoint` is a run directory).
    #[arg(long)]
    pub ms: Option<PathBuf>,
    /// Adaptation network checkpoint (defaults to the run's when `--checkpoint` is a run directory).
    #[arg(long)]
    pub an: Option<PathBuf>,
    /// Seed for the prompt clicks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write predicted masks (`.npy`) and image/truth/prediction PNG strips here.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

struct Models {
    segmenter: Segmenter,
    ms: Option<PointPromptNet>,
    an: Option<Adapter>,
}

fn load_models(args: &EvaluateArgs) -> Result<Models> {
    let (seg_path, ms_default, an_default) = if args.checkpoint.is_dir() {
        let state: RunState = read_json(&args.checkpoint.join(STATE_FILE))?;
        let best = state
            .best_iteration
            .ok_or_else(|| Error::Validation(format!("{} has no completed iterations", args.checkpoint.display())))?;
        let ck = |k: usize, name: &str| args.checkpoint.join(format!("iter_{k}/checkpoints/{name}.json"));
        let helper = |name: &str| [ck(best, name), ck(1, name)].into_iter().find(|p| p.exists());
        (ck(best, "segmenter"), helper("ms"), helper("an"))
    } else {
        (args.checkpoint.clone(), None, None)
    };
    let pick = |skip: bool, explicit: &Option<PathBuf>, default: Option<PathBuf>, flag: &str| -> Result<Option<PathBuf>> {
        if skip {
            return Ok(None);
        }
        explicit.clone().or(default).map(Some).ok_or_else(|| {
            Error::Validation(format!("no {flag} checkpoint found; pass --{flag} <path> or --no-{flag}"))
        })
    };
    let ms = pick(args.no_ms, &args.ms, ms_default, "ms")?;
    let an = pick(args.no_an, &args.an, an_default, "an")?;
    Ok(Models {
        segmenter: Segmenter::load(&seg_path)?,
        ms: ms.as_deref().map(PointPromptNet::load).transpose()?,
        an: an.as_deref().map(Adapter::load).transpose()?,
    })
}

/// Table row name for the enabled stages.
pub fn method_name(ms: bool, an: bool) -> &'static str {
    match (ms, an) {
        (false, false) => "SS",
        (true, false) => "SS+MS",
        (false, true) => "SS+AN",
        (true, true) => "SS+MS+AN",
    }
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let split: PartitionName = args.split.parse()?;
    let models = load_models(args)?;
    let (manifest, samples) = load_corpus(&args.corpus)?;
    let (state, mut hidden) = manifest.to_state(samples)?;
    let samples: Vec<LabeledSample> = match split {
        PartitionName::Labeled => state.labeled,
        PartitionName::Validation => state.validation,
        PartitionName::Test => state.test,
        PartitionName::Unlabeled => state
            .unlabeled
            .into_iter()
            .map(|s| {
                let mask = hidden.remove(&s.id).expect("every unlabeled slice keeps its hidden mask");
                LabeledSample::new(s, mask, tumorseg::data::Origin::Original)
            })
            .collect::<Result<_>>()?,
    };
    if samples.is_empty() {
        return Err(Error::Validation(format!("split `{}` is empty", args.split)));
    }

    let mut preds = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut mask = models.segmenter.segment(&s.slice)?;
        if let Some(ms) = &models.ms {
            mask = stage2_prompt_predict(ms, &s.slice, &mask, click_seed(args.seed, 0, i))?.mask;
        }
        if let Some(an) = &models.an {
            mask = stage3_refine(an, &s.slice, &mask, 0)?.mask;
        }
        preds.push(mask);
    }
    let method = method_name(models.ms.is_some(), models.an.is_some());
    let report = MetricReport::evaluate(
        method,
        samples.iter().zip(&preds).map(|(s, p)| (s.slice.id.as_str(), p, &s.mask)),
    )?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_text(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    if let Some(dir) = &args.dump {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (s, pred) in samples.iter().zip(&preds) {
            write_mask_npy(&dir.join(format!("{}_pred.npy", s.slice.id)), pred)?;
            write_mask_npy(&dir.join(format!("{}_gt.npy", s.slice.id)), &s.mask)?;
            let png = dir.join(format!("{}.png", s.slice.id));
            triptych(s.slice.image(), &s.mask, pred)
                .save(&png)
                .map_err(|e| Error::Validation(format!("cannot write {}: {e}", png.display())))?;
        }
    }
    Ok(())
}

/// Image, ground truth and prediction side by side with a 2-pixel gap.
fn triptych(image: ArrayView2<'_, f32>, gt: &Mask, pred: &Mask) -> GrayImage {
    let (h, w) = image.dim();
    let gap = 2;
    let mut out = GrayImage::new((3 * w + 2 * gap) as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = |v: u8| image::Luma([v]);
            out.put_pixel(c as u32, r as u32, px((image[[r, c]].clamp(0.0, 1.0) * 255.0).round() as u8));
            out.put_pixel((w + gap + c) as u32, r as u32, px(if gt.get(r, c) { 255 } else { 0 }));
            out.put_pixel((2 * (w + gap) + c) as u32, r as u32, px(if pred.get(r, c) { 255 } else { 0 }));
        }
    }
    out
}
