//! Shared fixtures for the integration and acceptance suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tide::activation_gen::{
    extract_activations, ExtractConfig, Extractor, TimestepSpec, World, WorldConfig,
};
use tide::dump::{TokenTable, MANIFEST_FILE};
use tide::train::load_table;

/// A scratch directory under cargo's per-target temp dir, emptied first.
pub fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

/// Small model for fast tests: depth 3, 16 tokens of width 8, T = 100.
pub fn tiny_world() -> WorldConfig {
    let mut w = WorldConfig::default();
    w.dit.depth = 3;
    w.dit.token_count = 16;
    w.dit.model_dim = 8;
    w.dit.heads = 2;
    w.dit.cond_dim = 4;
    w.dit.temb_dim = 8;
    w.dit.patch_rank = 4;
    w.dit.steps = 100;
    w.source.class_count = 3;
    w.source.object_min_side = 1;
    w.source.object_max_side = 2;
    w.source.max_cross_cosine = 0.9;
    w
}

/// Extract `count` samples with uniform timesteps at the penultimate block
/// into `out`, returning the manifest path.
pub fn generate(
    world: &WorldConfig,
    out: &Path,
    count: usize,
    split: &str,
    seed: u64,
    workers: usize,
) -> PathBuf {
    generate_with(
        world,
        out,
        count,
        split,
        seed,
        workers,
        TimestepSpec::default(),
    )
}

pub fn generate_with(
    world: &WorldConfig,
    out: &Path,
    count: usize,
    split: &str,
    seed: u64,
    workers: usize,
    timesteps: TimestepSpec,
) -> PathBuf {
    std::fs::create_dir_all(out).unwrap();
    let w = World::build(world).unwrap();
    let hooks = [w.penultimate_hook()];
    let cfg = ExtractConfig {
        count,
        timesteps,
        split: split.into(),
        seed,
        ..Default::default()
    };
    let ex = Extractor {
        source: &w.source,
        sched: &w.sched,
        params: &w.dit,
        hooks: &hooks,
        config: &cfg,
    };
    extract_activations(&ex, out, workers).unwrap();
    out.join(MANIFEST_FILE)
}

pub fn table(manifest: &Path) -> TokenTable {
    load_table(manifest, None).unwrap().1
}
