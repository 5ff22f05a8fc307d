use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layerseg::checkpoint::Checkpoint;
use layerseg::dataset::read_dataset;
use layerseg_cli::commands::{self, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};
use layerseg_cli::render::load_gray;
use layerseg_cli::{Common, RunConfig};

const TINY: &str = r#"
[synth]
surfaces = 3
height = 32
width = 32
max_amplitude = 2.0
labeled_fraction = 0.3
samples = 20
val_samples = 4
test_samples = 4
per_volume = 5

[train]
batch_labeled = 2
batch_unlabeled = 2
iterations = 4
val_every = 2
learning_rate = 0.001
delta = 4

[train.model]
height = 32
width = 32
surfaces = 3
stages = 2
base_channels = 4
style_dim = 4
decoder_channels = 4
film_hidden = 8
"#;

fn layerseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = layerseg(args);
    assert!(
        out.status.success(),
        "layerseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny config file and a corpus generated from it.
fn tiny_corpus(root: &Path) -> (PathBuf, PathBuf) {
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    ok(&["synth", "--config", s(&config), "--out", s(&data)]);
    (config, data)
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    out.sort();
    out
}

fn dataset_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for split in ["train", "val", "test"] {
        for f in files(&root.join(split)) {
            let name = format!("{split}/{}", f.file_name().unwrap().to_string_lossy());
            out.push((name, fs::read(f).unwrap()));
        }
    }
    out
}

#[test]
fn synth_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    ok(&[
        "synth",
        "--config",
        s(&config),
        "--seed",
        "7",
        "--out",
        s(&a),
    ]);
    ok(&[
        "synth",
        "--config",
        s(&config),
        "--seed",
        "7",
        "--out",
        s(&b),
    ]);
    ok(&[
        "synth",
        "--config",
        s(&config),
        "--seed",
        "8",
        "--out",
        s(&c),
    ]);
    assert_eq!(dataset_bytes(&a), dataset_bytes(&b));
    assert_ne!(dataset_bytes(&a), dataset_bytes(&c));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert!(!manifest["outputs"].as_array().unwrap().is_empty());
}

#[test]
fn default_synth_writes_the_standard_corpus_into_a_new_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/not/yet/there");
    commands::synth(&Common::new(&out)).unwrap();
    let train = read_dataset(&out.join("train")).unwrap();
    assert_eq!((train.height, train.width, train.surfaces), (64, 128, 4));
    assert_eq!(train.len(), 200);
    assert_eq!(train.num_labeled(), 30);
    let snapshot = fs::read_to_string(out.join("config.toml")).unwrap();
    assert_eq!(
        RunConfig::from_toml_str(&snapshot, Path::new("config.toml")).unwrap(),
        RunConfig::default()
    );
}

#[test]
fn train_eval_segment_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = tiny_corpus(dir.path());
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&run),
    ]);
    for f in [
        LAST_CHECKPOINT,
        BEST_CHECKPOINT,
        TRAIN_LOG,
        "validation.csv",
        "priors.toml",
        "config.toml",
        "run_manifest.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(
        fs::read_to_string(run.join(TRAIN_LOG))
            .unwrap()
            .lines()
            .count(),
        1 + 4
    );
    let ckpt = run.join(BEST_CHECKPOINT);

    let eval_dir = dir.path().join("eval");
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&eval_dir),
    ]);
    let report = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 3 + 1);
    assert!(report.lines().last().unwrap().starts_with("mean,"));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), report);
    let test = read_dataset(&data.join("test")).unwrap();
    assert_eq!(files(&eval_dir.join("overlays")).len(), test.len());

    let seg_dir = dir.path().join("seg");
    ok(&[
        "segment",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&seg_dir),
    ]);
    let csvs = files(&seg_dir.join("surfaces"));
    assert_eq!(csvs.len(), test.len());
    let first = fs::read_to_string(&csvs[0]).unwrap();
    assert_eq!(first.lines().count(), 3);
    assert!(first.lines().all(|l| l.split(',').count() == 32));

    let inspect = dir.path().join("inspect");
    let id = test.samples[1].id.clone();
    ok(&[
        "inspect-factors",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--sample",
        &id,
        "--out",
        s(&inspect),
    ]);
    let pngs: Vec<PathBuf> = files(&inspect)
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    assert_eq!(pngs.len(), 3 + 1 + 1);
    let mut coverage = vec![0u32; 32 * 32];
    for k in 1..=3 {
        let (w, h, px) = load_gray(&inspect.join(format!("factor_{k}.png"))).unwrap();
        assert_eq!((w, h), (32, 32));
        assert!(px.iter().all(|&v| v == 0 || v == 255));
        for (c, &v) in coverage.iter_mut().zip(&px) {
            *c += v as u32;
        }
    }
    assert!(coverage.iter().all(|&c| c <= 255));
    let (_, _, texture) = load_gray(&inspect.join("texture.png")).unwrap();
    assert!(texture.iter().all(|&v| v == 0 || v == 255));
}

#[test]
fn ablation_flags_reach_the_training_config() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = tiny_corpus(dir.path());
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--ablate",
        "no-texture",
        "--ablate",
        "no-self-losses",
    ]);
    let snapshot = RunConfig::load(&run.join("config.toml")).unwrap();
    assert!(snapshot.train.disable_texture_head);
    assert!(snapshot.train.disable_self_losses);
    assert!(!snapshot.train.supervised_only);
    let ck = Checkpoint::load(&run.join(LAST_CHECKPOINT)).unwrap();
    assert!(!ck.header.model.texture_head);
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = tiny_corpus(dir.path());
    let longer = dir.path().join("longer.toml");
    fs::write(&longer, TINY.replace("iterations = 4", "iterations = 6")).unwrap();

    let straight = dir.path().join("straight");
    ok(&[
        "train",
        "--config",
        s(&longer),
        "--data",
        s(&data),
        "--out",
        s(&straight),
    ]);

    let resumed = dir.path().join("resumed");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&resumed),
    ]);
    let again = layerseg(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&resumed),
    ]);
    assert!(
        !again.status.success(),
        "re-running into a finished run must fail"
    );
    ok(&[
        "train",
        "--config",
        s(&longer),
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--resume",
    ]);

    for f in [TRAIN_LOG, "validation.csv", LAST_CHECKPOINT] {
        assert_eq!(
            fs::read(straight.join(f)).unwrap(),
            fs::read(resumed.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn surface_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = tiny_corpus(dir.path());
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&run),
    ]);
    let four = dir.path().join("four.toml");
    fs::write(&four, TINY.replacen("surfaces = 3", "surfaces = 4", 1)).unwrap();
    let other = dir.path().join("other");
    ok(&["synth", "--config", s(&four), "--out", s(&other)]);
    let out = layerseg(&[
        "eval",
        "--checkpoint",
        s(&run.join(LAST_CHECKPOINT)),
        "--data",
        s(&other),
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn errors_exit_non_zero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let out = layerseg(&[
        "synth",
        "--config",
        s(&missing),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nitertions = 3\n").unwrap();
    let out = layerseg(&[
        "synth",
        "--config",
        s(&bad),
        "--out",
        s(&dir.path().join("y")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("itertions"));

    let out = layerseg(&[
        "train",
        "--data",
        s(&dir.path().join("nowhere")),
        "--out",
        s(&dir.path().join("z")),
    ]);
    assert!(!out.status.success());

    let out = layerseg(&["eval", "--out", s(dir.path())]);
    assert!(!out.status.success());
}
