use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array3;
use nifti::writer::WriterOptions;
use serde_json::Value;
use tumorseg::data::{read_manifest, read_mask_npy, Mask, PartitionName};

const BIN: &str = env!("CARGO_BIN_EXE_tumorseg");

/// Training schedule small enough for a test: a few seconds per run.
const TINY: &[&str] = &[
    "--set",
    "ssl.iterations=30",
    "--set",
    "ms.iterations=10",
    "--set",
    "an.iterations=10",
    "--set",
    "pipeline.eval_every=10",
    "--set",
    "pipeline.max_iterations=2",
    "--set",
    "pipeline.patience=5",
    "--set",
    "pipeline.an_replication=2",
    "--set",
    "model.base_channels=4",
    "--set",
    "model.depth=2",
];

fn tumorseg(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("TUMORSEG_")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// The JSON error object printed on stderr by a failing command.
fn err(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(1), "expected failure, stdout: {}", String::from_utf8_lossy(&out.stdout));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has a line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {stderr}"))
}

fn synth(dir: &Path, out: &str, n: usize, size: usize, seed: u64) {
    ok(&tumorseg(
        dir,
        &["synth", "--out", out, "--n", &n.to_string(), "--size", &size.to_string(), "--seed", &seed.to_string()],
        &[],
    ));
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_writes_paired_files_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "c", 200, 64, 3);
    let all = files(&tmp.path().join("c"));
    let images = all.keys().filter(|p| p.to_string_lossy().ends_with("_image.npy")).count();
    let masks = all.keys().filter(|p| p.to_string_lossy().ends_with("_mask.npy")).count();
    assert_eq!((images, masks), (200, 200));
    assert!(all.contains_key(Path::new("manifest.json")));

    let m = read_manifest(&tmp.path().join("c")).unwrap();
    assert_eq!(m.entries.len(), 200);
    assert!(m.entries.iter().all(|e| e.shape == [64, 64]));
    let free = m.entries.iter().filter(|e| !e.has_tumor).count();
    assert_eq!(free, 40);
    let counts = m.counts();
    // 200 slices: 40 test; of the 160 left, 16 validation, 16 labeled, 128 unlabeled.
    assert_eq!(counts[&PartitionName::Test], 40);
    assert_eq!(counts[&PartitionName::Validation], 16);
    assert_eq!(counts[&PartitionName::Labeled], 16);
    assert_eq!(counts[&PartitionName::Unlabeled], 128);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "a", 40, 32, 9);
    synth(tmp.path(), "b", 40, 32, 9);
    synth(tmp.path(), "c", 40, 32, 10);
    let a = files(&tmp.path().join("a"));
    assert_eq!(a, files(&tmp.path().join("b")));
    assert_ne!(a, files(&tmp.path().join("c")));
}

#[test]
fn synth_refuses_existing_output_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "c", 20, 16, 0);
    let e = err(&tumorseg(tmp.path(), &["synth", "--out", "c", "--n", "20", "--size", "16"], &[]));
    assert_eq!(e["error"], "validation");
    ok(&tumorseg(tmp.path(), &["synth", "--out", "c", "--n", "25", "--size", "16", "--force"], &[]));
    assert_eq!(read_manifest(&tmp.path().join("c")).unwrap().entries.len(), 25);
}

#[test]
fn config_errors_are_json() {
    let tmp = tempfile::tempdir().unwrap();
    let e = err(&tumorseg(tmp.path(), &["synth", "--out", "c", "--set", "pipeline.betta=0.5"], &[]));
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("pipeline.betta"));

    let e = err(&tumorseg(tmp.path(), &["synth", "--out", "c"], &[("TUMORSEG_PIPELINE__BETA", "1.5")]));
    assert_eq!(e["error"], "config");

    let e = err(&tumorseg(tmp.path(), &["frobnicate"], &[]));
    assert_eq!(e["error"], "usage");
    assert!(!tmp.path().join("c").exists());
}

#[test]
fn env_and_set_layers_apply_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("cfg.toml"), "[synth]\nn = 31\nsize = 16\n").unwrap();
    let run = |extra: &[&str], env: &[(&str, &str)]| {
        let _ = fs::remove_dir_all(tmp.path().join("c"));
        let mut args = vec!["synth", "--out", "c", "--config", "cfg.toml"];
        args.extend_from_slice(extra);
        ok(&tumorseg(tmp.path(), &args, env));
        read_manifest(&tmp.path().join("c")).unwrap().entries.len()
    };
    assert_eq!(run(&[], &[]), 31);
    assert_eq!(run(&[], &[("TUMORSEG_SYNTH__N", "32")]), 32);
    assert_eq!(run(&["--set", "synth.n=33"], &[("TUMORSEG_SYNTH__N", "32")]), 33);
    assert_eq!(run(&["--n", "34", "--set", "synth.n=33"], &[]), 34);
}

fn write_nifti(path: &Path, data: &Array3<f32>) {
    WriterOptions::new(path).write_nifti(data).unwrap();
}

/// A 24x24x3 volume: plane 0 outside the organ, plane 1 with a 99-pixel
/// lesion, plane 2 with a 100-pixel lesion.
fn write_volume(root: &Path, stem: &str) {
    let mut img = Array3::<f32>::from_elem((24, 24, 3), -100.0);
    let mut lab = Array3::<f32>::zeros((24, 24, 3));
    img[[0, 0, 1]] = 300.0;
    for z in 1..3 {
        for r in 0..24 {
            for c in 0..24 {
                lab[[r, c, z]] = 1.0;
            }
        }
    }
    for i in 0..99 {
        lab[[2 + i / 11, 2 + i % 11, 1]] = 2.0;
    }
    for i in 0..100 {
        lab[[2 + i / 10, 2 + i % 10, 2]] = 2.0;
    }
    write_nifti(&root.join("images").join(format!("{stem}.nii")), &img);
    write_nifti(&root.join("labels").join(format!("{stem}.nii")), &lab);
}

#[test]
fn preprocess_windows_filters_and_partitions() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    fs::create_dir_all(raw.join("images")).unwrap();
    fs::create_dir_all(raw.join("labels")).unwrap();
    for i in 0..10 {
        write_volume(&raw, &format!("vol{i}"));
    }
    ok(&tumorseg(tmp.path(), &["preprocess", "--input", "raw", "--out", "c"], &[]));
    let (manifest, samples) = tumorseg::data::load_corpus(&tmp.path().join("c")).unwrap();
    assert_eq!(samples.len(), 20, "the plane without organ is dropped");
    let counts = manifest.counts();
    assert_eq!(counts[&PartitionName::Test], 4);
    for (slice, mask) in &samples {
        let img = slice.image();
        assert_eq!(img[[1, 1]], 0.0);
        if slice.id.ends_with("_z1") {
            assert_eq!(img[[0, 0]], 1.0);
            assert!(mask.is_empty(), "99-pixel lesion removed");
        } else {
            assert_eq!(mask.count(), 100, "100-pixel lesion kept");
        }
    }

    let e = err(&tumorseg(tmp.path(), &["preprocess", "--input", "raw", "--out", "c"], &[]));
    assert_eq!(e["error"], "validation");
}

#[test]
fn preprocess_reports_each_bad_volume() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    fs::create_dir_all(raw.join("images")).unwrap();
    fs::create_dir_all(raw.join("labels")).unwrap();
    write_volume(&raw, "good");
    for stem in ["bad1", "bad2"] {
        fs::write(raw.join("images").join(format!("{stem}.nii")), b"not a volume").unwrap();
        fs::write(raw.join("labels").join(format!("{stem}.nii")), b"not a volume").unwrap();
    }
    let e = err(&tumorseg(tmp.path(), &["preprocess", "--input", "raw", "--out", "c"], &[]));
    let bad: Vec<&str> = e["files"].as_array().unwrap().iter().map(|f| f["volume"].as_str().unwrap()).collect();
    assert_eq!(bad, ["bad1", "bad2"]);
    assert!(!tmp.path().join("c").join("manifest.json").exists());
}

#[test]
fn preprocess_without_labels_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir_all(tmp.path().join("raw/images")).unwrap();
    let e = err(&tumorseg(tmp.path(), &["preprocess", "--input", "raw", "--out", "c"], &[]));
    assert_eq!(e["error"], "validation");
    assert!(e["message"].as_str().unwrap().contains("labels"));
}

fn run_args<'a>(name: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec!["run", "--corpus", "c", "--name", name];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    args
}

#[test]
fn run_persists_artifacts_and_prints_tables() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "c", 60, 32, 1);
    let stdout = ok(&tumorseg(tmp.path(), &run_args("r", &[]), &[]));
    for col in ["DSC", "JAC", "SE", "SP", "PRE"] {
        assert!(stdout.contains(col), "{stdout}");
    }
    assert!(stdout.contains("Stage 1 only"));
    let dir = tmp.path().join("runs/r");
    for f in [
        "config.toml",
        "manifest.json",
        "state.json",
        "table.txt",
        "plots/dsc_curve.svg",
        "plots/labeled_growth.svg",
        "iter_1/selection_records.jsonl",
        "iter_1/metrics.json",
        "iter_1/checkpoints/segmenter.json",
        "iter_1/checkpoints/ms.json",
        "iter_1/checkpoints/an.json",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    assert!(!dir.join("run.lock").exists());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["ssl"]["iterations"], 30);
    assert_eq!(manifest["iterations"].as_array().unwrap().len(), 2);
    assert!(manifest["finished_at"].is_string());

    // The snapshot alone reproduces the run.
    let out = ok(&tumorseg(
        tmp.path(),
        &["run", "--corpus", "c", "--name", "again", "--config", "runs/r/config.toml"],
        &[],
    ));
    assert!(out.contains("Stage 1 only"));
    for k in 1..=2 {
        let rec = format!("iter_{k}/selection_records.jsonl");
        assert_eq!(fs::read(dir.join(&rec)).unwrap(), fs::read(tmp.path().join("runs/again").join(&rec)).unwrap());
    }
    assert_eq!(
        fs::read(dir.join("table.txt")).unwrap(),
        fs::read(tmp.path().join("runs/again/table.txt")).unwrap()
    );

    let report = ok(&tumorseg(tmp.path(), &["report", "--run", "runs/r"], &[]));
    assert!(report.contains("dsc_curve.svg"));
    let svg = fs::read_to_string(dir.join("plots/labeled_growth.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn run_refuses_existing_locked_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "c", 40, 32, 2);
    ok(&tumorseg(tmp.path(), &run_args("r", &["--set", "pipeline.max_iterations=1"]), &[]));
    let e = err(&tumorseg(tmp.path(), &run_args("r", &[]), &[]));
    assert!(e["message"].as_str().unwrap().contains("--force"));

    fs::write(tmp.path().join("runs/r/run.lock"), "1\n").unwrap();
    let e = err(&tumorseg(tmp.path(), &["run", "--corpus", "c", "--name", "r", "--resume"], &[]));
    assert!(e["message"].as_str().unwrap().contains("locked"));
    fs::remove_file(tmp.path().join("runs/r/run.lock")).unwrap();

    let out = ok(&tumorseg(tmp.path(), &["run", "--corpus", "c", "--name", "r", "--resume"], &[]));
    assert!(out.contains("best iteration 1"));
    ok(&tumorseg(tmp.path(), &run_args("r", &["--force"]), &[]));
    assert!(tmp.path().join("runs/r/iter_2").exists());
}

/// Brute-force confusion counts: (tp, fp, fn, tn).
fn oracle_counts(pred: &Mask, gt: &Mask) -> [f64; 4] {
    let (h, w) = gt.shape();
    let mut c = [0.0; 4];
    for r in 0..h {
        for col in 0..w {
            let i = match (pred.get(r, col), gt.get(r, col)) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            c[i] += 1.0;
        }
    }
    c
}

/// Both masks empty scores 1 on every overlap metric; any other 0/0 is 0.
fn ratio(num: f64, den: f64, both_empty: bool) -> f64 {
    match (den == 0.0, both_empty) {
        (false, _) => num / den,
        (true, true) => 1.0,
        (true, false) => 0.0,
    }
}

#[test]
fn evaluate_matches_oracle_on_dumped_masks() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "c", 40, 32, 4);
    ok(&tumorseg(tmp.path(), &run_args("r", &[]), &[]));
    let stdout = ok(&tumorseg(
        tmp.path(),
        &["evaluate", "--checkpoint", "runs/r", "--corpus", "c", "--split", "unlabeled", "--out", "e.json", "--dump", "dump"],
        &[],
    ));
    assert!(stdout.contains("SS+MS+AN"));
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("e.json")).unwrap()).unwrap();
    let rows = report["per_slice"].as_array().unwrap();
    let unlabeled = read_manifest(&tmp.path().join("c")).unwrap().counts()[&PartitionName::Unlabeled];
    assert_eq!(rows.len(), unlabeled);
    for row in rows {
        let id = row["id"].as_str().unwrap();
        let pred = read_mask_npy(&tmp.path().join(format!("dump/{id}_pred.npy"))).unwrap();
        let gt = read_mask_npy(&tmp.path().join(format!("dump/{id}_gt.npy"))).unwrap();
        assert!(tmp.path().join(format!("dump/{id}.png")).exists());
        let [tp, fp, fn_, tn] = oracle_counts(&pred, &gt);
        let empty = tp + fp + fn_ == 0.0;
        let want = [
            ("dsc", ratio(2.0 * tp, 2.0 * tp + fp + fn_, empty)),
            ("jac", ratio(tp, tp + fp + fn_, empty)),
            ("se", ratio(tp, tp + fn_, empty)),
            ("sp", ratio(tn, tn + fp, false)),
            ("pre", ratio(tp, tp + fp, empty)),
        ];
        for (k, v) in want {
            let got = row[k].as_f64().unwrap();
            assert!((got - v).abs() < 1e-12, "{id} {k}: {got} vs {v}");
        }
    }
}

#[test]
fn evaluate_ablation_rows_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "c", 40, 32, 5);
    ok(&tumorseg(tmp.path(), &run_args("r", &[]), &[]));
    let seg = "runs/r/iter_1/checkpoints/segmenter.json";
    let eval = |extra: &[&str]| {
        let mut args = vec!["evaluate", "--checkpoint", "runs/r", "--corpus", "c"];
        args.extend_from_slice(extra);
        tumorseg(tmp.path(), &args, &[])
    };
    for (flags, row) in [
        (&["--no-ms", "--no-an"][..], "SS "),
        (&["--no-an"][..], "SS+MS "),
        (&["--no-ms"][..], "SS+AN "),
        (&[][..], "SS+MS+AN "),
    ] {
        let out = ok(&eval(flags));
        assert!(out.lines().nth(1).unwrap().starts_with(row), "{out}");
    }

    // A bare checkpoint has no helpers unless they are named.
    let e = err(&tumorseg(tmp.path(), &["evaluate", "--checkpoint", seg, "--corpus", "c"], &[]));
    assert!(e["message"].as_str().unwrap().contains("--no-ms"));
    ok(&tumorseg(
        tmp.path(),
        &["evaluate", "--checkpoint", seg, "--corpus", "c", "--an", "runs/r/iter_1/checkpoints/an.json", "--no-ms"],
        &[],
    ));

    let e = err(&eval(&["--split", "training"]));
    assert_eq!(e["error"], "validation");

    let manifest = fs::read_to_string(tmp.path().join("c/manifest.json")).unwrap();
    fs::write(tmp.path().join("c/manifest.json"), manifest.replace("\"validation\"", "\"test\"")).unwrap();
    let e = err(&eval(&["--split", "val"]));
    assert_eq!(e["error"], "validation");
    assert!(e["message"].as_str().unwrap().contains("empty"));
}
