use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use safin::checkpoint::load_checkpoint;
use safin::trainer::{TrainConfig, TrainState};

fn safin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safin"))
        .args(args)
        .output()
        .expect("spawn safin")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn corpus(dir: &Path) -> PathBuf {
    let out = dir.join("corpus");
    let o = safin(&["gen-corpus", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

fn train(corpus: &Path, ckpt: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--content",
        p(corpus),
        "--style",
        p(corpus),
        "--out",
        p(ckpt),
        "--image-size",
        "16",
        "--batch-size",
        "2",
    ];
    args.extend_from_slice(extra);
    safin(&args)
}

fn reconstruction_rmse(o: &Output) -> f64 {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("reconstruction_rmse\t"))
        .expect("rmse line")
        .parse()
        .unwrap()
}

#[test]
fn gen_corpus_writes_eight_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let mut names: Vec<_> = fs::read_dir(&c).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 8);
    assert_eq!(names[0], "synth_00.png");
}

#[test]
fn train_prints_one_tsv_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    let o = train(&c, &ckpt, &["--steps", "3", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 3);
    for (k, line) in lines.iter().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 4);
        assert_eq!(f[0], (k + 1).to_string());
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse().unwrap()).collect();
        assert!((v[2] - (v[0] + 10.0 * v[1])).abs() < 1e-9 * v[2].abs().max(1.0));
    }
    assert!(ckpt.is_file());
}

#[test]
fn zero_learning_rate_keeps_seeded_weights() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    let o = train(&c, &ckpt, &["--steps", "1", "--lr", "0", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let saved = load_checkpoint(&ckpt).unwrap();
    let fresh = TrainState::new(&TrainConfig {
        seed: 9,
        image_size: 16,
        batch_size: 2,
        learning_rate: 0.0,
        ..TrainConfig::default()
    })
    .unwrap();
    assert_eq!(saved.net.learnables, fresh.net.learnables);
    assert_eq!(saved.net.encoder, fresh.net.encoder);
    assert_eq!(saved.step, 1);
}

#[test]
fn same_seed_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let run = |name: &str| train(&c, &dir.path().join(name), &["--steps", "4", "--seed", "12"]);
    let (a, b) = (run("a.ckpt"), run("b.ckpt"));
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(fs::read(dir.path().join("a.ckpt")).unwrap(), fs::read(dir.path().join("b.ckpt")).unwrap());
    let other = train(&c, &dir.path().join("c.ckpt"), &["--steps", "4", "--seed", "13"]);
    assert_ne!(a.stdout, other.stdout);
}

#[test]
fn bad_train_arguments_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let ckpt = dir.path().join("m.ckpt");

    let o = safin(&["train", "--content", p(&c), "--steps", "1", "--out", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--style"), "{}", stderr(&o));

    let missing = dir.path().join("nowhere");
    let o = safin(&["train", "--content", p(&c), "--style", p(&missing), "--steps", "1", "--out", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--style"), "{}", stderr(&o));

    for extra in [&["--steps", "0"][..], &["--steps", "1", "--image-size", "24"], &["--steps", "1", "--lr", "-1"], &["--steps", "1", "--frobnicate"]] {
        let o = train(&c, &ckpt, extra);
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", stderr(&o));
    }
    assert!(!ckpt.exists());
}

#[test]
fn empty_corpus_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = train(&empty, &ckpt, &["--steps", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!ckpt.exists());
}

#[test]
fn stylize_is_deterministic_and_keeps_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(train(&c, &ckpt, &["--steps", "2"]).status.code(), Some(0));
    let content = c.join("synth_01.png");
    let style = c.join("synth_06.png");
    let run = |out: &Path| safin(&["stylize", "--content", p(&content), "--style", p(&style), "--ckpt", p(&ckpt), "--out", p(out)]);
    let (o1, o2) = (dir.path().join("o1.png"), dir.path().join("o2.png"));
    let r = run(&o1);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    assert!(reconstruction_rmse(&r).is_finite());
    assert_eq!(run(&o2).status.code(), Some(0));
    assert_eq!(fs::read(&o1).unwrap(), fs::read(&o2).unwrap());
    let img = image::open(&o1).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));
}

#[test]
fn stylize_rejects_bad_checkpoints_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(train(&c, &ckpt, &["--steps", "1"]).status.code(), Some(0));
    let bytes = fs::read(&ckpt).unwrap();
    let img = c.join("synth_00.png");

    let truncated = dir.path().join("t.ckpt");
    fs::write(&truncated, &bytes[..bytes.len() / 3]).unwrap();
    let mut flipped = bytes.clone();
    flipped[0] = b'X';
    let wrong_magic = dir.path().join("v.ckpt");
    fs::write(&wrong_magic, &flipped).unwrap();

    for (k, bad) in [&truncated, &wrong_magic, &dir.path().join("absent.ckpt")].into_iter().enumerate() {
        let out = dir.path().join(format!("out{k}.png"));
        let o = safin(&["stylize", "--content", p(&img), "--style", p(&img), "--ckpt", p(bad), "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
        assert!(!out.exists());
    }
}

#[test]
fn verify_suites_and_exit_codes() {
    let o = safin(&["verify", "--suite", "wavelet"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("wavelet PASS"));
    let o = safin(&["verify", "--suite", "grad"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    assert_eq!(safin(&["verify", "--suite", "everything"]).status.code(), Some(2));
    assert_eq!(safin(&["verify"]).status.code(), Some(0));
}

#[test]
fn wavelet_roundtrip_command() {
    let o = safin(&["wavelet-roundtrip", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().last().unwrap().starts_with("PASS"));
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let o = safin(&["wavelet-roundtrip", "--input", p(&c.join("synth_07.png"))]);
    assert_eq!(o.status.code(), Some(0));
}

/// Training for reconstruction (no style term, content == style) moves the
/// stylized output toward the input.
#[test]
fn reconstruction_training_reduces_pixel_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let run = |ckpt: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--content", p(&c), "--style", p(&c), "--out", p(ckpt), "--lambda-s", "0", "--seed", "5"];
        args.extend_from_slice(extra);
        let o = safin(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    let (base, trained) = (dir.path().join("base.ckpt"), dir.path().join("trained.ckpt"));
    run(&base, &["--steps", "1", "--lr", "0"]);
    run(&trained, &["--steps", "150", "--lr", "3e-3"]);

    let mean_rmse = |ckpt: &Path| {
        let mut total = 0.0;
        for k in 0..8 {
            let img = c.join(format!("synth_{k:02}.png"));
            let out = dir.path().join("rec.png");
            let o = safin(&["stylize", "--content", p(&img), "--style", p(&img), "--ckpt", p(ckpt), "--out", p(&out)]);
            assert_eq!(o.status.code(), Some(0));
            total += reconstruction_rmse(&o);
        }
        total / 8.0
    };
    let (before, after) = (mean_rmse(&base), mean_rmse(&trained));
    assert!(after < 0.9 * before, "rmse {before} -> {after}");
}
