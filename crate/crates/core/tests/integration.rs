//! End-to-end runs of the `tide` binary on a tiny world, plus a few
//! library-level training properties.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tide::config::ExperimentConfig;
use tide::eval::{evaluate_table, read_sweep_csv};
use tide::sae::SaeModel;
use tide::train::{init_params, smooth, SparsityKind, SparsitySchedule, TrainConfig, Trainer};

fn tide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tide"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= in output:\n{stdout}"))
}

/// A config for the tiny world with short training, written into `dir`.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut c = ExperimentConfig::default();
    c.model = common::tiny_world();
    c.dataset.extract.count = 48;
    c.train.n = 32;
    c.train.k_final = 4;
    // explicit, so runs of different lengths share one schedule
    c.train.sparsity_schedule = Some(SparsitySchedule {
        kind: SparsityKind::GeometricDecay,
        k_start: 16,
        k_final: 4,
        warmup_steps: 50,
    });
    c.train.max_steps = 200;
    c.train.batch_tokens = 64;
    c.train.log_every = 50;
    c.train.modulator_embed_dim = 8;
    c.train.modulator_hidden_dim = 8;
    c.analyze.max_timestep = 99;
    c.ablate.seeds = vec![0, 1];
    c.ablate.sampled_rate = tide::train::Rate::new(1, 4).unwrap();
    c.eval.downstream_spec.count = 4;
    let p = dir.join("tiny.toml");
    std::fs::write(&p, c.to_toml().unwrap()).unwrap();
    p
}

struct Setup {
    cfg: PathBuf,
    data: PathBuf,
    root: PathBuf,
}

fn setup(name: &str) -> Setup {
    let root = common::scratch(name);
    let cfg = tiny_config(&root);
    let data = root.join("data");
    std::fs::create_dir_all(&data).unwrap();
    let out = ok(&tide(&["gen", "--config", s(&cfg), "--out", s(&data)]));
    assert_eq!(value(&out, "records"), "48");
    Setup { cfg, data, root }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_a_valid_dataset() {
    let st = setup("it-gen");
    let (m, records) = tide::dump::load_records(&st.data).unwrap();
    assert_eq!(records.len(), 48);
    assert_eq!(m.total_records, 48);
    assert!(st.data.join("resolved_config.toml").exists());
}

#[test]
fn gen_into_missing_dir_fails() {
    let root = common::scratch("it-gen-missing");
    let cfg = tiny_config(&root);
    let out = tide(&["gen", "--config", s(&cfg), "--out", s(&root.join("nope"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn seed_flag_is_recorded() {
    let root = common::scratch("it-seed");
    let cfg = tiny_config(&root);
    let data = root.join("data");
    std::fs::create_dir_all(&data).unwrap();
    ok(&tide(&[
        "gen",
        "--config",
        s(&cfg),
        "--out",
        s(&data),
        "--seed",
        "42",
    ]));
    let resolved = ExperimentConfig::load(&data.join("resolved_config.toml")).unwrap();
    assert_eq!(resolved.seed, Some(42));
    assert_eq!(resolved.dataset.extract.seed, 42);
    assert_eq!(resolved.train.seed, 42);
    assert!(resolved.tool_version.is_some());
}

#[test]
fn train_eval_and_resume() {
    let st = setup("it-train");
    let run = st.root.join("run");
    let out = ok(&tide(&[
        "train",
        "--config",
        s(&st.cfg),
        "--data",
        s(&st.data),
        "--out",
        s(&run),
        "--steps",
        "100",
    ]));
    assert_eq!(value(&out, "step"), "100");
    let out = ok(&tide(&[
        "train",
        "--config",
        s(&st.cfg),
        "--data",
        s(&st.data),
        "--out",
        s(&run),
        "--steps",
        "200",
        "--resume",
    ]));
    assert_eq!(value(&out, "step"), "200");

    // an uninterrupted run lands on the same bytes
    let straight = st.root.join("straight");
    ok(&tide(&[
        "train",
        "--config",
        s(&st.cfg),
        "--data",
        s(&st.data),
        "--out",
        s(&straight),
        "--steps",
        "200",
    ]));
    for f in ["model.ckpt", "model.ckpt.log.csv"] {
        assert!(
            std::fs::read(run.join(f)).unwrap() == std::fs::read(straight.join(f)).unwrap(),
            "{f} differs after resume"
        );
    }

    let out = ok(&tide(&[
        "eval",
        "--config",
        s(&st.cfg),
        "--data",
        s(&st.data),
        "--out",
        s(&run),
        "--downstream",
    ]));
    let mse: f64 = value(&out, "mse").parse().unwrap();
    let cos: f64 = value(&out, "cosine").parse().unwrap();
    assert!(mse.is_finite() && mse >= 0.0);
    assert!(cos > 0.0 && cos <= 1.0);
    assert_eq!(value(&out, "k"), "4");
    assert!(value(&out, "downstream_loss").parse::<f64>().unwrap() > 0.0);
    assert!(run.join("eval.json").exists());
}

#[test]
fn train_variants_from_flags() {
    let st = setup("it-variants");
    let plain = st.root.join("plain");
    ok(&tide(&[
        "train",
        "--config",
        s(&st.cfg),
        "--data",
        s(&st.data),
        "--out",
        s(&plain),
        "--steps",
        "20",
        "--temporal",
        "false",
    ]));
    let m = SaeModel::load(&plain.join("model.ckpt")).unwrap();
    assert!(m.modulator.is_none());
    let r = ExperimentConfig::load(&plain.join("resolved_config.toml")).unwrap();
    assert!(!r.train.temporal);

    let l1 = st.root.join("l1");
    ok(&tide(&[
        "train",
        "--config",
        s(&st.cfg),
        "--data",
        s(&st.data),
        "--out",
        s(&l1),
        "--steps",
        "20",
        "--baseline-l1",
        "0.01",
    ]));
    let m = SaeModel::load(&l1.join("model.ckpt")).unwrap();
    assert_eq!(m.l1, Some(0.01));
}

#[test]
fn sweep_resumes_by_key() {
    let st = setup("it-sweep");
    let mut c = ExperimentConfig::load(&st.cfg).unwrap();
    c.train.max_steps = 40;
    c.sweep = Some(tide::eval::SweepGrid {
        latent_multipliers: vec![1, 2],
        k_values: vec![2],
        repeats: 2,
    });
    let cfg = st.root.join("sweep.toml");
    std::fs::write(&cfg, c.to_toml().unwrap()).unwrap();
    let out_dir = st.root.join("out");
    let out = ok(&tide(&[
        "sweep",
        "--config",
        s(&cfg),
        "--data",
        s(&st.data),
        "--out",
        s(&out_dir),
    ]));
    assert_eq!(value(&out, "ran"), "4");
    let rows = read_sweep_csv(&out_dir.join("sweep.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    let out = ok(&tide(&[
        "sweep",
        "--config",
        s(&cfg),
        "--data",
        s(&st.data),
        "--out",
        s(&out_dir),
    ]));
    assert_eq!((value(&out, "ran"), value(&out, "skipped")), ("0", "4"));
    assert_eq!(read_sweep_csv(&out_dir.join("sweep.csv")).unwrap(), rows);
}

#[test]
fn ablate_writes_the_grid() {
    let st = setup("it-ablate");
    let val = st.root.join("val");
    std::fs::create_dir_all(&val).unwrap();
    ok(&tide(&[
        "gen",
        "--config",
        s(&st.cfg),
        "--out",
        s(&val),
        "--split",
        "val",
        "--count",
        "16",
    ]));
    let out_dir = st.root.join("out");
    let out = ok(&tide(&[
        "ablate",
        "--config",
        s(&st.cfg),
        "--data",
        s(&st.data),
        "--val-data",
        s(&val),
        "--out",
        s(&out_dir),
    ]));
    assert_eq!(
        out.lines()
            .filter(|l| l.contains("steps_to_threshold="))
            .count(),
        4
    );
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 2);
}

#[test]
fn analyze_and_edit() {
    let st = setup("it-analyze");
    let run = st.root.join("run");
    ok(&tide(&[
        "train",
        "--config",
        s(&st.cfg),
        "--data",
        s(&st.data),
        "--out",
        s(&run),
    ]));
    let out = ok(&tide(&[
        "analyze",
        "--config",
        s(&st.cfg),
        "--data",
        s(&st.data),
        "--out",
        s(&run),
        "--class",
        "1",
    ]));
    let p: f64 = value(&out, "precision").parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    for f in ["concept.json", "mask.json", "mask.pgm"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let pgm = std::fs::read(run.join("mask.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5 4 4 255\n"));

    let spec = st.root.join("edit.toml");
    std::fs::write(
        &spec,
        "renormalize = true\n[op]\nop = \"erase\"\nindices = [0, 3]\n",
    )
    .unwrap();
    let out = ok(&tide(&[
        "edit",
        "--config",
        s(&st.cfg),
        "--out",
        s(&run),
        "--spec",
        s(&spec),
    ]));
    assert_eq!(value(&out, "tokens_touched"), "16");
    assert!(run.join("edit.json").exists());

    std::fs::write(&spec, "[op]\nop = \"invert\"\nindices = [999]\n").unwrap();
    let bad = tide(&[
        "edit",
        "--config",
        s(&st.cfg),
        "--out",
        s(&run),
        "--spec",
        s(&spec),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("999"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let root = common::scratch("it-badcfg");
    let cfg = root.join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rte = 0.1\n").unwrap();
    let out = tide(&["gen", "--config", s(&cfg), "--out", s(&root)]);
    assert_eq!(out.status.code(), Some(2));
}

// ---------------------------------------------------------------- library

fn tiny_table(name: &str, count: usize) -> tide::dump::TokenTable {
    let root = common::scratch(name);
    let m = common::generate(&common::tiny_world(), &root, count, "train", 0, 1);
    common::table(&m)
}

#[test]
fn trained_beats_untrained() {
    let table = tiny_table("it-beats", 64);
    let cfg = TrainConfig {
        n: 32,
        k_final: 4,
        max_steps: 500,
        batch_tokens: 64,
        modulator_embed_dim: 8,
        modulator_hidden_dim: 8,
        log_every: 0,
        ..Default::default()
    };
    let untrained = SaeModel {
        params: init_params(table.dim, 32, 0),
        modulator: None,
        k_final: 4,
        l1: None,
        meta: None,
    };
    let mut tr = Trainer::new(cfg, &table, 100).unwrap();
    tr.run_until(500).unwrap();
    let a = evaluate_table(&untrained, &table, 4, "train", None).unwrap();
    let b = evaluate_table(&tr.model(), &table, 4, "train", None).unwrap();
    assert!(b.mse < a.mse, "trained {} vs untrained {}", b.mse, a.mse);
}

/// Fixed-k training with the default learning rate: the 100-step smoothed
/// loss, sampled at the end of each window, rises in at most 5% of windows.
#[test]
fn smoothed_loss_is_non_increasing() {
    let table = tiny_table("it-smooth", 128);
    for seed in 0..3 {
        let steps = 3000;
        let cfg = TrainConfig {
            n: 32,
            k_final: 4,
            sparsity_schedule: Some(SparsitySchedule::constant(4)),
            max_steps: steps,
            batch_tokens: 64,
            modulator_embed_dim: 8,
            modulator_hidden_dim: 8,
            seed,
            log_every: 0,
            ..Default::default()
        };
        let mut tr = Trainer::new(cfg, &table, 100).unwrap();
        tr.run_until(steps).unwrap();
        let losses: Vec<f64> = tr.log.history.iter().map(|s| s.loss).collect();
        let sm = smooth(&losses, 100);
        let ends: Vec<f64> = sm.iter().skip(99).step_by(100).copied().collect();
        let rises = ends.windows(2).filter(|w| w[1] > w[0]).count();
        let windows = ends.len() - 1;
        assert!(
            rises as f64 <= 0.05 * windows as f64,
            "seed {seed}: smoothed loss rose in {rises} of {windows} windows"
        );
    }
}
