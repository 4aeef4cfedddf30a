use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use indexnet_cli::image::Image;
use indexnet_core::synthdata::SyntheticDataset;

fn indexnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_indexnet")).args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--set", "model.stages=2",
    "--set", "model.channels=4,8",
    "--set", "train.steps=8",
    "--set", "train.batch=2",
    "--set", "train.crop=16",
    "--set", "train.log_every=1",
    "--set", "train.checkpoint_every=3",
    "--set", "data.train_count=12",
    "--set", "data.size=24",
    "--quiet",
];

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let o = indexnet(&args, dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn usage_errors_exit_with_one_and_help_with_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&indexnet(&["--help"], d)), 0);
    assert_eq!(code(&indexnet(&["train", "--help"], d)), 0);
    assert_eq!(code(&indexnet(&[], d)), 1);
    assert_eq!(code(&indexnet(&["frobnicate"], d)), 1);
    assert_eq!(code(&indexnet(&["gen-data", "--count", "2"], d)), 1);
    assert_eq!(code(&indexnet(&["gen-data", "--count", "two", "--out", "x"], d)), 1);
    assert_eq!(code(&indexnet(&["train", "--config", "missing.cfg"], d)), 1);
    assert_eq!(code(&indexnet(&["train", "--set", "model.colour=red"], d)), 1);
    assert_eq!(code(&indexnet(&["gradcheck", "--family", "nope"], d)), 1);
    assert_eq!(code(&indexnet(&["bench", "--size", "big"], d)), 1);
    fs::write(d.join("bad.cfg"), "model.pooling = m2o\nnonsense\n").unwrap();
    let o = indexnet(&["train", "--config", "bad.cfg"], d);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = indexnet(&["gradcheck", "--family", "ops"], dir.path());
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let bad = indexnet(&["gradcheck", "--family", "ops", "--inject-fault"], dir.path());
    assert_eq!(code(&bad), 2);
    assert!(stdout(&bad).contains("FAIL injected fault"));
}

#[test]
fn generated_files_match_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        assert_eq!(code(&indexnet(&["gen-data", "--seed", "9", "--count", "3", "--size", "20", "--out", out], d)), 0);
    }
    let ds = SyntheticDataset::new(9, 3, 20);
    for i in 0..3 {
        let s = ds.sample(i).unwrap();
        for (suffix, expect) in [("image.ppm", &s.image), ("trimap.pgm", &s.trimap), ("alpha.pgm", &s.alpha), ("fg.ppm", &s.fg), ("bg.ppm", &s.bg)] {
            let name = format!("{i:05}_{suffix}");
            assert_eq!(fs::read(d.join("a").join(&name)).unwrap(), fs::read(d.join("b").join(&name)).unwrap());
            assert_eq!(&Image::read(&d.join("a").join(&name)).unwrap().data, expect, "{name}");
        }
    }
}

#[test]
fn ground_truth_predictions_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&indexnet(&["gen-data", "--count", "3", "--size", "24", "--out", "data"], d)), 0);
    fs::create_dir(d.join("gt")).unwrap();
    for i in 0..3 {
        fs::copy(d.join(format!("data/{i:05}_alpha.pgm")), d.join(format!("gt/{i:05}_pred.pgm"))).unwrap();
    }
    let o = indexnet(&["eval", "--predictions", "gt", "--data", "data", "--report", "r.csv"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(d.join("r.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    for line in report.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        for v in &cols[1..6] {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{line}");
        }
    }
}

#[test]
fn resumed_training_writes_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train(d, "full", &[]);
    train(d, "split", &["--stop-after", "5"]);
    let log_before = fs::read_to_string(d.join("split/metrics.log")).unwrap();
    train(d, "split", &["--resume", "split/last.idxn"]);
    let log_after = fs::read_to_string(d.join("split/metrics.log")).unwrap();
    assert!(log_after.starts_with(&log_before));

    let full = fs::read(d.join("full/last.idxn")).unwrap();
    assert_eq!(full, fs::read(d.join("split/last.idxn")).unwrap());
    assert_eq!(fs::read(d.join("full/step000003.idxn")).unwrap(), fs::read(d.join("split/step000003.idxn")).unwrap());
    assert_eq!(
        fs::read_to_string(d.join("full/metrics.log")).unwrap(),
        log_after,
        "one log line per step in both runs"
    );
}

#[test]
fn inference_and_index_maps_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train(d, "run", &[]);
    assert_eq!(code(&indexnet(&["gen-data", "--count", "2", "--size", "24", "--out", "data"], d)), 0);
    let img = ["--image", "data/00001_image.ppm", "--trimap", "data/00001_trimap.pgm"];

    let mut args = vec!["infer", "--checkpoint", "run/last.idxn", "--out", "a.pgm"];
    args.extend_from_slice(&img);
    assert_eq!(code(&indexnet(&args, d)), 0);
    let alpha = Image::read(&d.join("a.pgm")).unwrap();
    let trimap = Image::read(&d.join("data/00001_trimap.pgm")).unwrap();
    assert_eq!((alpha.width, alpha.height, alpha.channels), (24, 24, 1));
    for (a, t) in alpha.data.iter().zip(&trimap.data) {
        if *t == 0 || *t == 255 {
            assert_eq!(a, t);
        }
    }

    let mut args = vec!["inspect-indices", "--checkpoint", "run/last.idxn", "--outdir", "maps"];
    args.extend_from_slice(&img);
    assert_eq!(code(&indexnet(&args, d)), 0);
    assert_eq!(Image::read(&d.join("maps/stage0_decoder.pgm")).unwrap().width, 24);
    assert_eq!(Image::read(&d.join("maps/stage1_decoder.pgm")).unwrap().width, 12);

    let o = indexnet(&["eval", "--checkpoint", "run/last.idxn", "--data", "data", "--report", "e.csv", "--save-preds", "p"], d);
    assert_eq!(code(&o), 0);
    let o = indexnet(&["eval", "--predictions", "p", "--data", "data", "--report", "f.csv"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(d.join("e.csv")).unwrap(), fs::read(d.join("f.csv")).unwrap());
}

#[test]
fn corrupted_or_mismatched_checkpoints_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train(d, "run", &[]);
    assert_eq!(code(&indexnet(&["gen-data", "--count", "1", "--size", "16", "--out", "data"], d)), 0);
    let mut bytes = fs::read(d.join("run/last.idxn")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(d.join("run/bad.idxn"), bytes).unwrap();
    let infer = |ck: &str, extra: &[&str]| {
        let mut args = vec!["infer", "--checkpoint", ck, "--image", "data/00000_image.ppm", "--trimap", "data/00000_trimap.pgm", "--out", "x.pgm"];
        args.extend_from_slice(extra);
        indexnet(&args, d)
    };
    let o = infer("run/bad.idxn", &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("CRC"));

    // a checkpoint of a different architecture
    fs::write(d.join("other.cfg"), "model.stages = 2\nmodel.channels = 4,6\n").unwrap();
    assert_eq!(code(&infer("run/last.idxn", &["--config", "other.cfg"])), 2);
    assert_eq!(code(&infer("run/missing.idxn", &[])), 1);
}

#[test]
fn bench_reports_time_and_peak_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.cfg"), "model.stages = 2\nmodel.channels = 4,8\n").unwrap();
    let o = indexnet(&["bench", "--config", "small.cfg", "--size", "64x48,33x17", "--iters", "2"], d);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 2);
    for line in out.lines() {
        let peak: usize = line.split_whitespace().find_map(|f| f.strip_prefix("peak_bytes=")).unwrap().parse().unwrap();
        assert!(peak > 0, "{line}");
    }
    let o = indexnet(&["bench", "--config", "small.cfg", "--size", "64x64", "--budget-mb", "0"], d);
    assert_eq!(code(&o), 2);
}
