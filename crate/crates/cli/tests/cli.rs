use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use milseg::inference::{prepare, read_prob_maps};
use milseg::mask::LabelMask;
use milseg::pnm;
use milseg::segnet::{build_network_scaled, load_checkpoint};
use milseg_cli::RunConfig;
use tempfile::TempDir;

const TINY: &str = "\
image_size = 32
train_per_class = 3
val_per_class = 2
stem_channels = 4,6
stem_kernels = 3,3
stem_pools = 2,0
head_channels = 6
head_kernels = 3,1
batch_size = 4
epochs = 2
init_gain = 2.449
dropout = 0
learning_rate = 0.003
";

fn milseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milseg")).args(args).output().expect("run milseg")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a config with `extra` appended (later keys win) and returns its path.
fn config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("{TINY}dataset = {}\n{extra}", s(&dir.join("data")))).unwrap();
    path
}

fn gen_data(dir: &Path, cfg: &Path) {
    ok(&milseg(&["gen-data", "--config", s(cfg), "--out", s(&dir.join("data"))]));
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn config_echo_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "run.conf", "prior = ilp\n");
    gen_data(dir.path(), &cfg);
    let echoed = fs::read_to_string(dir.path().join("data/config.txt")).unwrap();
    let parsed = RunConfig::parse(&echoed).unwrap();
    assert_eq!(parsed, RunConfig::parse(&fs::read_to_string(&cfg).unwrap()).unwrap());
    assert_eq!(parsed.to_text(), echoed);
}

#[test]
fn gen_data_is_deterministic_and_counted() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "run.conf", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&milseg(&["gen-data", "--config", s(&cfg), "--out", s(&a)]));
    ok(&milseg(&["gen-data", "--config", s(&cfg), "--out", s(&b)]));
    assert_eq!(tree(&a), tree(&b));

    let labels = milseg_cli::dataset::read_labels(&a.join("train")).unwrap();
    assert_eq!(labels.len(), 4 * 3);
    for k in 0..4 {
        assert_eq!(labels.iter().filter(|&&l| l == k).count(), 3);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("val/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 8);
    assert_eq!(manifest["per_class"]["2"], 2);

    let train = milseg_cli::dataset::read_dataset(&a.join("train")).unwrap();
    let val = milseg_cli::dataset::read_dataset(&a.join("val")).unwrap();
    assert!(val.iter().all(|v| train.iter().all(|t| t.image != v.image)));
    for sample in &train {
        let m = sample.ground_truth();
        assert!((0..m.height()).all(|y| (0..m.width()).all(|x| [0, sample.label as u8].contains(&m.get(y, x)))));
    }
}

#[test]
fn zero_rate_checkpoint_equals_initialization() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "run.conf", "learning_rate = 0\nmax_steps = 1\n");
    gen_data(dir.path(), &cfg);
    let out = dir.path().join("run");
    ok(&milseg(&["train", "--config", s(&cfg), "--out", s(&out)]));
    let (spec, params) = load_checkpoint(&out.join("model.ckpt")).unwrap();
    let parsed = RunConfig::parse(&fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(spec, parsed.network_spec().unwrap());
    assert_eq!(params.flatten(), build_network_scaled(&spec, 2.449).unwrap().flatten());
}

#[test]
fn first_loss_is_near_uniform_guess() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "run.conf", "init_gain = 1\nmax_steps = 1\n");
    gen_data(dir.path(), &cfg);
    let out = dir.path().join("run");
    ok(&milseg(&["train", "--config", s(&cfg), "--out", s(&out)]));
    let log = fs::read_to_string(out.join("loss.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,examples_seen,lr,mean_loss"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[1], "4");
    let loss: f64 = first[3].parse().unwrap();
    assert!((loss - 4f64.ln()).abs() < 0.2, "first loss {loss}");
}

#[test]
fn training_is_reproducible_and_thread_independent() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "run.conf", "");
    gen_data(dir.path(), &cfg);
    let runs: Vec<PathBuf> = ["1", "2", "2"]
        .iter()
        .enumerate()
        .map(|(i, threads)| {
            let out = dir.path().join(format!("run{i}"));
            ok(&milseg(&["train", "--config", s(&cfg), "--out", s(&out), "--threads", threads]));
            out
        })
        .collect();
    for f in ["model.ckpt", "loss.csv"] {
        let first = fs::read(runs[0].join(f)).unwrap();
        for r in &runs[1..] {
            assert_eq!(first, fs::read(r.join(f)).unwrap(), "{f} differs");
        }
    }
    let other = dir.path().join("other");
    ok(&milseg(&["train", "--config", s(&cfg), "--out", s(&other), "--seed", "7"]));
    assert_ne!(fs::read(runs[0].join("model.ckpt")).unwrap(), fs::read(other.join("model.ckpt")).unwrap());
}

#[test]
fn infer_matches_library_pipeline() {
    let dir = TempDir::new().unwrap();
    let cfg_path = config(dir.path(), "run.conf", "max_steps = 3\n");
    gen_data(dir.path(), &cfg_path);
    let run = dir.path().join("run");
    ok(&milseg(&["train", "--config", s(&cfg_path), "--out", s(&run)]));
    let cfg = RunConfig::parse(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    let (spec, params) = load_checkpoint(&run.join("model.ckpt")).unwrap();
    let images = dir.path().join("data/val/images");

    for prior in ["none", "ilp", "ilp+sppxl"] {
        let pred = dir.path().join(format!("pred-{prior}"));
        ok(&milseg(&[
            "infer", "--config", s(&cfg_path), "--out", s(&pred), "--checkpoint", s(&run.join("model.ckpt")),
            "--input", s(&images), "--prior", prior, "--dump-probs",
        ]));
        let mut ic = cfg.inference_config().unwrap();
        ic.prior = prior.parse().unwrap();
        for i in 0..8 {
            let image = pnm::read_image(&images.join(format!("{i:05}.ppm"))).unwrap();
            let expected = prepare(&image, &params, &spec, &ic, None).unwrap();
            let got = pnm::read_mask(&pred.join(format!("{i:05}.pgm"))).unwrap();
            assert_eq!(got, expected.labels(None).unwrap(), "{prior} image {i}");
            let probs = read_prob_maps(fs::File::open(pred.join(format!("{i:05}.probs"))).unwrap()).unwrap();
            assert_eq!(probs, expected.probs);
        }
    }

    let boxes = dir.path().join("boxes.txt");
    fs::write(&boxes, "# x0,y0,x1,y1,score\n2,2,20,20,0.9\n10,10,31,31,0.4\n").unwrap();
    let pred = dir.path().join("pred-bb");
    ok(&milseg(&[
        "infer", "--config", s(&cfg_path), "--out", s(&pred), "--checkpoint", s(&run.join("model.ckpt")),
        "--input", s(&images.join("00001.ppm")), "--prior", "ilp+bb", "--proposals", s(&boxes),
    ]));
    assert!(pred.join("00001.pgm").exists());
    ok(&milseg(&[
        "gridsearch", "--config", s(&cfg_path), "--out", s(&run), "--data", s(&dir.path().join("data/val")),
    ]));
    let t = milseg_cli::report::read_thresholds(&run.join("thresholds.json"), 3).unwrap();
    assert!(t.values().iter().all(|d| cfg.threshold_grid.contains(d)));
    ok(&milseg(&[
        "infer", "--config", s(&cfg_path), "--out", s(&pred), "--checkpoint", s(&run.join("model.ckpt")),
        "--input", s(&images), "--prior", "ilp+bb", "--naive-proposals", "20",
        "--thresholds", s(&run.join("thresholds.json")),
    ]));
    ok(&milseg(&[
        "eval", "--config", s(&cfg_path), "--out", s(&pred), "--pred", s(&pred),
        "--gt", s(&dir.path().join("data/val")),
    ]));
    assert!(pred.join("metrics.json").exists());
}

fn write_masks(dir: &Path, masks: &[(&str, &[u8])]) {
    fs::create_dir_all(dir).unwrap();
    for (name, values) in masks {
        let mut m = LabelMask::new(2, 2);
        for (i, &v) in values.iter().enumerate() {
            m.set(i / 2, i % 2, v);
        }
        pnm::write_mask(&dir.join(format!("{name}.pgm")), &m).unwrap();
    }
}

#[test]
fn eval_scores_hand_counted_masks() {
    let dir = TempDir::new().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    write_masks(&pred, &[("a", &[0, 1, 1, 1]), ("b", &[0, 0, 0, 0])]);
    write_masks(&gt, &[("a", &[0, 0, 1, 1]), ("b", &[0, 0, 0, 1])]);
    let cfg = dir.path().join("c.conf");
    fs::write(&cfg, "foreground_classes = 1\n").unwrap();
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    ok(&milseg(&["eval", "--config", s(&cfg), "--out", s(&out), "--pred", s(&pred), "--gt", s(&gt)]));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    // Background: tp 4, fp 1, fn 1. Class 1: tp 2, fp 1, fn 1.
    assert!((m["ap"]["0"].as_f64().unwrap() - 4.0 / 6.0).abs() < 1e-12);
    assert!((m["ap"]["1"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!((m["mAP"].as_f64().unwrap() - (4.0 / 6.0 + 0.5) / 2.0).abs() < 1e-12);
    assert!((m["per_class_accuracy"]["0"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert!((m["per_class_accuracy"]["1"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);

    write_masks(&gt, &[("c", &[0, 0, 0, 0])]);
    let out = milseg(&["eval", "--config", s(&cfg), "--out", s(&dir.path().join("o2")), "--pred", s(&pred), "--gt", s(&gt)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains('c'));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "epochz = 3\n").unwrap();
    assert_eq!(milseg(&["gen-data", "--config", s(&bad)]).status.code(), Some(1));
    assert_eq!(milseg(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(milseg(&["gen-data", "--config", s(&dir.path().join("missing.conf"))]).status.code(), Some(3));

    let cfg = config(dir.path(), "run.conf", "");
    let missing = dir.path().join("nothing.ckpt");
    let infer = |extra: &[&str]| {
        let mut args = vec!["infer", "--config", s(&cfg), "--out", s(dir.path()), "--input", s(dir.path())];
        args.extend_from_slice(extra);
        milseg(&args).status.code()
    };
    assert_eq!(infer(&["--checkpoint", s(&missing)]), Some(3));
    assert_eq!(infer(&["--prior", "ilp+everything"]), Some(1));

    gen_data(dir.path(), &cfg);
    let run = dir.path().join("run");
    ok(&milseg(&["train", "--config", s(&cfg), "--out", s(&run), "--seed", "1"]));
    let images = dir.path().join("data/val/images");
    let ckpt = run.join("model.ckpt");
    let infer = |extra: &[&str]| {
        let mut args = vec!["infer", "--config", s(&cfg), "--out", s(dir.path()), "--input", s(&images), "--checkpoint", s(&ckpt)];
        args.extend_from_slice(extra);
        milseg(&args).status.code()
    };
    assert_eq!(infer(&["--prior", "ilp+bb"]), Some(1), "proposal prior without proposals");
    let other = config(dir.path(), "other.conf", "foreground_classes = 5\n");
    let code = milseg(&["infer", "--config", s(&other), "--out", s(dir.path()), "--input", s(&images), "--checkpoint", s(&ckpt)])
        .status
        .code();
    assert_eq!(code, Some(1), "checkpoint/config mismatch");

    let diverge = config(dir.path(), "diverge.conf", "learning_rate = 1e200\nmomentum = 0\n");
    let out = dir.path().join("diverged");
    let res = milseg(&["train", "--config", s(&diverge), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
    let (_, params) = load_checkpoint(&out.join("model.ckpt")).unwrap();
    assert!(params.is_finite());
}
