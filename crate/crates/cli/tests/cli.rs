use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use warpforge::dataset;
use warpforge::io;
use warpforge::Image;

fn warpforge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warpforge"))
        .args(args)
        .current_dir(cwd)
        .env("WARPFORGE_THREADS", "2")
        .output()
        .expect("spawn warpforge")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, acc);
            } else {
                acc.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv(path: impl AsRef<Path>) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const SMALL: &[&str] = &["--size", "48", "--map-size", "64"];

fn synth(cwd: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&warpforge(&args, cwd));
}

#[test]
fn synth_is_deterministic_and_echoes_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    let flags = [
        "--n", "4", "--seed", "1", "--bp", "2.5", "--rp", "6", "--labels", "12",
    ];
    synth(dir.path(), "a", &flags);
    synth(dir.path(), "b", &flags);
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert_eq!(a.len(), 1 + 4 * 3);
    assert_eq!(a, b);

    let m = dataset::read_manifest(&dir.path().join("a")).unwrap();
    assert_eq!(m.samples.len(), 4);
    assert_eq!(m.spec.n, 4);
    assert_eq!(m.spec.seed, 1);
    assert_eq!(m.spec.svf.strength_bound, 2.5);
    assert_eq!(m.spec.svf.coarse_res, 6);
    assert_eq!(m.spec.modality, None);
    match &m.spec.source {
        dataset::Source::LabelMaps(lp) => {
            assert_eq!(lp.n_labels, 12);
            assert_eq!(lp.crop, 48);
            assert_eq!(lp.map_h, 64);
        }
        other => panic!("unexpected source {other:?}"),
    }
}

#[test]
fn multimodal_synth_adds_remapped_moving_images() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "rec", &["--n", "2", "--modality", "recolor"]);
    synth(dir.path(), "col", &["--n", "2", "--modality", "colorize"]);
    for (name, ext) in [("rec", "pgm"), ("col", "ppm")] {
        let root = dir.path().join(name);
        let m = dataset::read_manifest(&root).unwrap();
        for e in &m.samples {
            let rel = e.moving_multimodal.as_ref().expect("multimodal entry");
            assert!(rel.ends_with(ext), "{rel}");
            assert!(root.join(rel).is_file());
        }
    }
    synth(dir.path(), "mono", &["--n", "1"]);
    assert!(!dir
        .path()
        .join("mono/pair_0000/moving_multimodal.pgm")
        .exists());
}

#[test]
fn registering_an_image_onto_itself_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "d", &["--n", "1"]);
    let out = warpforge(
        &[
            "register",
            "--fixed",
            "d/pair_0000/fixed.pgm",
            "--moving",
            "d/pair_0000/fixed.pgm",
            "--out",
            "r",
        ],
        dir.path(),
    );
    ok(&out);
    let report = read_json(dir.path().join("r/metrics.json"));
    let cc = report["after"]["cc"].as_f64().unwrap();
    assert!((cc - 1.0).abs() < 1e-6, "cc {cc}");
    for f in ["warped.pgm", "field.wft", "config.json"] {
        assert!(dir.path().join("r").join(f).is_file(), "{f}");
    }
    let field = io::read_field(dir.path().join("r/field.wft")).unwrap();
    assert_eq!((field.height(), field.width()), (48, 48));
}

#[test]
fn registration_recovers_a_synthetic_pair() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "d", &["--n", "1", "--seed", "4"]);
    let out = warpforge(
        &[
            "register",
            "--fixed",
            "d/pair_0000/fixed.pgm",
            "--moving",
            "d/pair_0000/moving.pgm",
            "--out",
            "r",
        ],
        dir.path(),
    );
    ok(&out);
    let report = read_json(dir.path().join("r/metrics.json"));
    let before = report["before"]["cc"].as_f64().unwrap();
    let after = report["after"]["cc"].as_f64().unwrap();
    assert!(after >= 0.95 && after > before, "{before} -> {after}");
    assert!(report["iterations"].as_u64().unwrap() > 0);
    assert_eq!(
        report["config"],
        read_json(dir.path().join("r/config.json"))
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "d", &["--n", "1"]);
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"alpha": 0.5, "iters_per_level": 3, "similarity": "intensity_mse"}"#,
    )
    .unwrap();
    let args = [
        "register",
        "--fixed",
        "d/pair_0000/fixed.pgm",
        "--moving",
        "d/pair_0000/moving.pgm",
        "--out",
        "r",
        "--config",
        "cfg.json",
        "--iters",
        "2",
        "--parametrization",
        "displacement",
    ];
    ok(&warpforge(&args, dir.path()));
    let cfg = read_json(dir.path().join("r/config.json"));
    assert_eq!(cfg["alpha"], 0.5);
    assert_eq!(cfg["iters_per_level"], 2);
    assert_eq!(cfg["similarity"], "intensity_mse");
    assert_eq!(cfg["parametrization"], "displacement");
    assert_eq!(cfg["levels"], 3);
}

#[test]
fn invalid_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    io::write_image(
        &Image::filled(8, 8, 1, 0.5).unwrap(),
        dir.path().join("a.pgm"),
    )
    .unwrap();
    io::write_image(
        &Image::filled(8, 9, 1, 0.5).unwrap(),
        dir.path().join("b.pgm"),
    )
    .unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"alpha": 1, "typo": 2}"#).unwrap();
    let cases: [&[&str]; 6] = [
        &[
            "register", "--fixed", "a.pgm", "--moving", "b.pgm", "--out", "r",
        ],
        &[
            "register",
            "--fixed",
            "a.pgm",
            "--moving",
            "missing.pgm",
            "--out",
            "r",
        ],
        &[
            "register", "--fixed", "a.pgm", "--moving", "a.pgm", "--out", "r", "--config",
            "bad.json",
        ],
        &[
            "register", "--fixed", "a.pgm", "--moving", "a.pgm", "--out", "r", "--step", "0",
        ],
        &["eval", "--data", "nowhere", "--out", "e"],
        &[
            "synth",
            "--out",
            "s",
            "--n",
            "1",
            "--size",
            "64",
            "--map-size",
            "32",
        ],
    ];
    for args in cases {
        let out = warpforge(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    let out = Command::new(env!("CARGO_BIN_EXE_warpforge"))
        .args(["synth", "--out", "s", "--n", "1"])
        .current_dir(dir.path())
        .env("WARPFORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("r").exists());
}

#[test]
fn eval_of_an_empty_dataset_is_a_bare_header() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "d", &["--n", "0"]);
    let out = warpforge(&["eval", "--data", "d", "--out", "e"], dir.path());
    ok(&out);
    let text = fs::read_to_string(dir.path().join("e/eval.csv")).unwrap();
    assert_eq!(
        text.lines().collect::<Vec<_>>(),
        ["pair,cc_before,mi_before,cc,mi,folding_percent,mse,n_pixels,cc_table,mi_table"]
    );
}

fn num(cell: &str) -> f64 {
    cell.parse()
        .unwrap_or_else(|_| panic!("not a number: {cell}"))
}

#[test]
fn eval_summary_is_the_row_mean_and_truth_beats_identity() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "d", &["--n", "4", "--seed", "9"]);
    for field in ["identity", "truth"] {
        ok(&warpforge(
            &["eval", "--data", "d", "--out", field, "--field", field],
            dir.path(),
        ));
    }
    let identity = csv(dir.path().join("identity/eval.csv"));
    let truth = csv(dir.path().join("truth/eval.csv"));
    assert_eq!(identity.len(), 1 + 4 + 1);
    for t in [&identity, &truth] {
        let rows = &t[1..5];
        let mean = &t[5];
        assert_eq!(mean[0], "mean");
        for col in [1, 2, 3, 4, 5, 6] {
            let m = rows.iter().map(|r| num(&r[col])).sum::<f64>() / 4.0;
            assert!(
                (num(&mean[col]) - m).abs() < 2e-6,
                "column {col}: {} vs {m}",
                mean[col]
            );
        }
        let table = &mean[8];
        assert!(
            table.starts_with(&format!("{:.4}(", num(&mean[3]))),
            "{table}"
        );
    }
    for (i, t) in identity[1..5].iter().zip(&truth[1..5]) {
        assert!(
            num(&i[3]) < num(&t[3]),
            "pair {}: {} vs {}",
            i[0],
            i[3],
            t[3]
        );
        assert_eq!(i[1], t[1]);
        assert_eq!(num(&t[5]), 0.0);
    }
}

#[test]
fn eval_output_does_not_depend_on_the_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "d", &["--n", "3", "--modality", "colorize"]);
    let mut tables = Vec::new();
    for threads in ["1", "3"] {
        let out = Command::new(env!("CARGO_BIN_EXE_warpforge"))
            .args([
                "eval",
                "--data",
                "d",
                "--out",
                threads,
                "--multimodal",
                "--iters",
                "10",
            ])
            .current_dir(dir.path())
            .env("WARPFORGE_THREADS", threads)
            .output()
            .unwrap();
        ok(&out);
        tables.push(fs::read(dir.path().join(threads).join("eval.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
}

const SPEC: &str = r#"{
  "domains": [{"name": "labels", "kind": "label_maps", "map_h": 64, "map_w": 64, "crop": 48}],
  "n": 2,
  "seed": 5,
  "modalities": ["none", "recolor"],
  "config": {"iters_per_level": 15}
}"#;

#[test]
fn experiment_reproduces_eval_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), SPEC).unwrap();
    for out in ["x1", "x2"] {
        ok(&warpforge(
            &["experiment", "--spec", "spec.json", "--out", out],
            dir.path(),
        ));
    }
    assert_eq!(tree(&dir.path().join("x1")), tree(&dir.path().join("x2")));

    let x = dir.path().join("x1");
    let resolved = read_json(x.join("spec.json"));
    assert_eq!(resolved["repetitions"], 1);
    assert_eq!(resolved["config"]["alpha"], 0.01);

    // The same data and engine through the standalone commands.
    synth(dir.path(), "d", &["--n", "2", "--seed", "5"]);
    assert_eq!(
        fs::read(dir.path().join("d/pair_0001/moving.pgm")).unwrap(),
        fs::read(x.join("labels/rep_0/none/data/pair_0001/moving.pgm")).unwrap()
    );
    ok(&warpforge(
        &["eval", "--data", "d", "--out", "e", "--iters", "15"],
        dir.path(),
    ));
    assert_eq!(
        fs::read(dir.path().join("e/eval.csv")).unwrap(),
        fs::read(x.join("labels/rep_0/none/feature_mse/eval.csv")).unwrap()
    );

    let comparison = csv(x.join("comparison.csv"));
    assert_eq!(comparison.len(), 3);
    let sims: Vec<&str> = comparison[1..].iter().map(|r| r[3].as_str()).collect();
    assert_eq!(sims, ["intensity_mse", "feature_mse"]);
    assert!(comparison[1..].iter().all(|r| r[11] == "ok"));

    let overlays = x.join("labels/rep_0/recolor/feature_mse/overlays");
    for name in ["pair_0000_checkerboard.ppm", "pair_0001_difference.ppm"] {
        let img = io::read_image(overlays.join(name)).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (48, 48, 3));
    }
}

#[test]
fn failed_runs_are_recorded_and_exit_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let spec = format!(
        r#"{{"domains": [
              {{"name": "void", "kind": "image_dir", "path": {:?}}},
              {{"name": "labels", "kind": "label_maps", "map_h": 40, "map_w": 40, "crop": 32}}
            ],
            "n": 1, "modalities": ["none"], "config": {{"iters_per_level": 5}}}}"#,
        empty.to_string_lossy()
    );
    fs::write(dir.path().join("spec.json"), spec).unwrap();
    let out = warpforge(
        &["experiment", "--spec", "spec.json", "--out", "x"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4));
    let report = read_json(dir.path().join("x/report.json"));
    assert_eq!(report["failures"], 1);
    assert!(report["runs"][0]["error"].is_string());
    assert!(report["runs"][1]["error"].is_null());
    assert!(dir
        .path()
        .join("x/labels/rep_0/none/feature_mse/eval.csv")
        .is_file());
}

#[test]
fn invalid_experiment_specs_are_rejected_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let specs = [
        r#"{"domains": [{"name": "a", "kind": "label_maps"}], "repetitions": 0}"#,
        r#"{"domains": [{"name": "a", "kind": "image_dir", "path": "does/not/exist"}]}"#,
        r#"{"domains": [{"name": "../up", "kind": "label_maps"}]}"#,
        r#"{"domains": []}"#,
        r#"{"domains": [{"name": "a", "kind": "label_maps"}], "unknown": 1}"#,
    ];
    for (i, s) in specs.iter().enumerate() {
        let name = format!("s{i}.json");
        fs::write(dir.path().join(&name), s).unwrap();
        let out = warpforge(&["experiment", "--spec", &name, "--out", "x"], dir.path());
        assert_eq!(out.status.code(), Some(2), "{s}");
    }
    assert!(!dir.path().join("x").exists());
}
