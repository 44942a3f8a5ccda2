//! Command-line front end: one subcommand per stage, a TOML config file,
//! and flags that override it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::activation_gen::{extract_activations, prepare_sample, Extractor, HookSpec, World};
use crate::analysis::{
    concept_records, export_mask, mask_precision, pool_concept_with, query_records,
    token_similarity_with, topk_mask, MaskFormat,
};
use crate::config::ExperimentConfig;
use crate::dump::{load_records, manifest_path, ActivationRecord};
use crate::edit::{edit_in_pipeline, EditSpec};
use crate::error::{Result, TideError};
use crate::eval::{
    ablation_compare, downstream_diffusion_loss, evaluate_table, run_sweep, DownstreamCtx,
    Substitution, Variant,
};
use crate::rng;
use crate::sae::SaeModel;
use crate::train::{load_table, resolve_steps, train, TOOL_VERSION};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Parser)]
#[command(
    name = "tide",
    version,
    about = "Temporal-aware TopK sparse autoencoders on toy DiT activations"
)]
pub struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed; overrides every section's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an activation dataset from the toy DiT.
    Gen {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Train an SAE on a dataset.
    Train {
        #[command(flatten)]
        io: DataArgs,
        /// Use the temporal modulator (`--temporal false` trains a plain SAE).
        #[arg(long)]
        temporal: Option<bool>,
        /// Train the ReLU + l1 baseline with this penalty.
        #[arg(long)]
        baseline_l1: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        layer: Option<u16>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Reconstruction metrics, optionally with downstream loss.
    Eval {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        downstream: bool,
    },
    /// Scaling sweep over latent size and k.
    Sweep {
        #[command(flatten)]
        io: DataArgs,
    },
    /// Sampling x temporal ablation grid.
    Ablate {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long)]
        val_data: Option<PathBuf>,
    },
    /// Concept pooling and a token mask for one class.
    Analyze {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long)]
        class: Option<u16>,
        /// Highest timestep used for pooling and querying.
        #[arg(long)]
        timestep: Option<u32>,
    },
    /// Apply a latent edit inside the toy DiT forward pass.
    Edit {
        #[command(flatten)]
        io: DataArgs,
        /// Edit spec as a TOML file.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

/// Parse arguments, run, print output, and return the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn need(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| {
        TideError::config(format!(
            "missing {what} (set it in [paths] or pass --{what})"
        ))
    })
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| TideError::io_at(p, e))
}

fn write_resolved(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut c = cfg.clone();
    c.tool_version = Some(TOOL_VERSION.to_string());
    let p = dir.join(RESOLVED_CONFIG);
    fs::write(&p, c.to_toml()?).map_err(|e| TideError::io_at(&p, e))
}

fn hook_of(model: &SaeModel, world: &World) -> HookSpec {
    model
        .meta
        .as_ref()
        .and_then(|m| m.hook.clone())
        .unwrap_or_else(|| world.penultimate_hook())
}

/// Execute a parsed command and return what it prints.
pub fn run(cli: Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    if cli.out.is_some() {
        cfg.paths.out = cli.out.clone();
    }
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            *slot = v.clone();
        }
    };
    match &cli.command {
        Command::Gen { count, split } => {
            if let Some(c) = count {
                cfg.dataset.extract.count = *c;
            }
            if let Some(s) = split {
                cfg.dataset.extract.split = s.clone();
            }
        }
        Command::Train {
            io,
            temporal,
            baseline_l1,
            steps,
            n,
            k,
            layer,
            resume,
        } => {
            set(&mut cfg.paths.data, &io.data);
            set(&mut cfg.paths.checkpoint, &io.checkpoint);
            let t = &mut cfg.train;
            if let Some(v) = temporal {
                t.temporal = *v;
            }
            if baseline_l1.is_some() {
                t.baseline_l1 = *baseline_l1;
            }
            if let Some(v) = steps {
                t.max_steps = *v;
            }
            if let Some(v) = n {
                t.n = *v;
            }
            if let Some(v) = k {
                t.k_final = *v;
            }
            if layer.is_some() {
                t.layer = *layer;
            }
            t.resume |= *resume;
        }
        Command::Eval { io, k, downstream } => {
            set(&mut cfg.paths.data, &io.data);
            set(&mut cfg.paths.checkpoint, &io.checkpoint);
            if let Some(k) = k {
                cfg.eval.k = *k;
            }
            cfg.eval.downstream |= *downstream;
        }
        Command::Sweep { io } => {
            set(&mut cfg.paths.data, &io.data);
        }
        Command::Ablate { io, val_data } => {
            set(&mut cfg.paths.data, &io.data);
            set(&mut cfg.paths.val_data, val_data);
        }
        Command::Analyze {
            io,
            class,
            timestep,
        } => {
            set(&mut cfg.paths.data, &io.data);
            set(&mut cfg.paths.checkpoint, &io.checkpoint);
            if let Some(c) = class {
                cfg.analyze.class = *c;
            }
            if let Some(t) = timestep {
                cfg.analyze.max_timestep = *t;
            }
        }
        Command::Edit { io, spec } => {
            set(&mut cfg.paths.checkpoint, &io.checkpoint);
            if let Some(p) = spec {
                let text = fs::read_to_string(p).map_err(|e| TideError::io_at(p, e))?;
                let s: EditSpec = toml::from_str(&text)
                    .map_err(|e| TideError::config(format!("{}: {}", p.display(), e.message())))?;
                cfg.edit.spec = Some(s);
            }
        }
    }
    cfg.resolve();
    match cli.command {
        Command::Gen { .. } => cmd_gen(&cfg),
        Command::Train { .. } => cmd_train(&cfg),
        Command::Eval { .. } => cmd_eval(&cfg),
        Command::Sweep { .. } => cmd_sweep(&cfg),
        Command::Ablate { .. } => cmd_ablate(&cfg),
        Command::Analyze { .. } => cmd_analyze(&cfg),
        Command::Edit { .. } => cmd_edit(&cfg),
    }
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<String> {
    let out = need(&cfg.paths.out, "out")?;
    let world = World::build(&cfg.model)?;
    let hooks = if cfg.dataset.hooks.is_empty() {
        vec![world.penultimate_hook()]
    } else {
        cfg.dataset.hooks.clone()
    };
    let ex = Extractor {
        source: &world.source,
        sched: &world.sched,
        params: &world.dit,
        hooks: &hooks,
        config: &cfg.dataset.extract,
    };
    let m = extract_activations(&ex, &out, cfg.train.workers)?;
    write_resolved(&out, cfg)?;
    Ok(format!(
        "manifest={}\nrecords={}\nshards={}\n",
        out.join(crate::dump::MANIFEST_FILE).display(),
        m.total_records,
        m.shards.len()
    ))
}

fn checkpoint_path(cfg: &ExperimentConfig) -> Result<PathBuf> {
    match (&cfg.paths.checkpoint, &cfg.paths.out) {
        (Some(c), _) => Ok(c.clone()),
        (None, Some(o)) => Ok(o.join(CHECKPOINT_FILE)),
        (None, None) => Err(TideError::config(
            "missing checkpoint (pass --checkpoint or --out)",
        )),
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<String> {
    let data = need(&cfg.paths.data, "data")?;
    let out = need(&cfg.paths.out, "out")?;
    ensure_dir(&out)?;
    let ckpt = checkpoint_path(cfg)?;
    write_resolved(&out, cfg)?;
    let log = train(&cfg.train, &data, &ckpt)?;
    let last = log.history.last();
    Ok(format!(
        "checkpoint={}\nstep={}\nfinal_mse={:.6e}\nfinal_cos={:.6}\nrevived={}\n",
        ckpt.display(),
        last.map(|s| s.step).unwrap_or(0),
        last.map(|s| s.mse).unwrap_or(f64::NAN),
        last.map(|s| s.cos).unwrap_or(f64::NAN),
        log.revived
    ))
}

fn key_values(v: &serde_json::Value) -> String {
    let mut s = String::new();
    if let Some(map) = v.as_object() {
        for (k, val) in map {
            let shown = match val {
                serde_json::Value::Null => "none".to_string(),
                serde_json::Value::String(x) => x.clone(),
                other => other.to_string(),
            };
            let _ = writeln!(s, "{k}={shown}");
        }
    }
    s
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<String> {
    let data = need(&cfg.paths.data, "data")?;
    let ckpt = checkpoint_path(cfg)?;
    let model = SaeModel::load(&ckpt)?;
    let layer = cfg.eval.layer.or_else(|| {
        model
            .meta
            .as_ref()
            .and_then(|m| m.hook.as_ref())
            .map(|h| h.layer_index as u16)
    });
    let (m, table) = load_table(&manifest_path(&data), layer)?;
    let mut rep = evaluate_table(&model, &table, cfg.eval.k, &m.split, None)?;
    if cfg.eval.downstream {
        let world = World::build(&cfg.model)?;
        let hook = hook_of(&model, &world);
        let d = downstream_diffusion_loss(
            &world.dit,
            &world.sched,
            &world.source,
            Substitution::Model(&model, rep.k),
            &hook,
            &cfg.eval.downstream_spec,
            None,
        )?;
        rep.downstream_loss = Some(d.loss_sub);
        rep.downstream_baseline = Some(d.loss_base);
    }
    if let Some(out) = &cfg.paths.out {
        ensure_dir(out)?;
        write_resolved(out, cfg)?;
        let p = out.join("eval.json");
        fs::write(&p, serde_json::to_string_pretty(&rep)? + "\n")
            .map_err(|e| TideError::io_at(&p, e))?;
    }
    Ok(key_values(&serde_json::to_value(&rep)?))
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<String> {
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| TideError::config("sweep needs a [sweep] section"))?;
    let data = need(&cfg.paths.data, "data")?;
    let out = need(&cfg.paths.out, "out")?;
    ensure_dir(&out)?;
    write_resolved(&out, cfg)?;
    let (m, table) = load_table(&manifest_path(&data), cfg.train.layer)?;
    let steps = resolve_steps(&cfg.train, &m);
    let world;
    let samples;
    let ctx = if cfg.eval.downstream {
        world = World::build(&cfg.model)?;
        samples = crate::eval::downstream_samples(
            &world.source,
            &world.sched,
            &cfg.eval.downstream_spec,
        )?;
        let hook = match (cfg.train.layer, m.provenance.layer_taps.as_slice()) {
            (Some(l), _) => HookSpec::block_output(l as usize),
            (None, [one]) => one.clone(),
            _ => world.penultimate_hook(),
        };
        Some(DownstreamCtx {
            dit: &world.dit,
            samples: &samples,
            hook,
        })
    } else {
        None
    };
    let csv = out.join("sweep.csv");
    let res = run_sweep(grid, &cfg.train, &table, steps, &csv, ctx.as_ref())?;
    let mut s = format!(
        "csv={}\nran={}\nskipped={}\nfailed={}\n",
        csv.display(),
        res.rows.len(),
        res.skipped,
        res.failures.len()
    );
    for (key, msg) in &res.failures {
        let _ = writeln!(s, "failure n={} k={} seed={}: {msg}", key.0, key.1, key.2);
    }
    Ok(s)
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<String> {
    let data = need(&cfg.paths.data, "data")?;
    let val = need(&cfg.paths.val_data, "val-data")?;
    let out = need(&cfg.paths.out, "out")?;
    ensure_dir(&out)?;
    write_resolved(&out, cfg)?;
    let (m, train_t) = load_table(&manifest_path(&data), cfg.train.layer)?;
    let (_, val_t) = load_table(&manifest_path(&val), cfg.train.layer)?;
    let steps = resolve_steps(&cfg.train, &m);
    let table = ablation_compare(
        &cfg.train,
        &train_t,
        &val_t,
        steps,
        &cfg.ablate.seeds,
        cfg.ablate.sampled_rate,
    )?;
    let csv = out.join("ablation.csv");
    table.write_csv(&csv)?;
    let mut s = format!("csv={}\n", csv.display());
    for v in [Variant::Sae, Variant::Tide] {
        for sampling in [false, true] {
            let med = |f: fn(&crate::eval::AblationRow) -> f64| {
                table.median_of(v, sampling, f).unwrap_or(f64::NAN)
            };
            let _ = writeln!(
                s,
                "{v:?} sampling={sampling} val_mse={:.6e} val_cos={:.6} steps_to_threshold={}",
                med(|r| r.val_mse),
                med(|r| r.val_cos),
                med(|r| r.steps_to_threshold as f64)
            );
        }
    }
    Ok(s)
}

fn analysis_records(cfg: &ExperimentConfig, model: &SaeModel) -> Result<Vec<ActivationRecord>> {
    let data = need(&cfg.paths.data, "data")?;
    let (_, records) = load_records(&manifest_path(&data))?;
    let layer = model
        .meta
        .as_ref()
        .and_then(|m| m.hook.as_ref())
        .map(|h| h.layer_index as u16);
    let layer = layer.or_else(|| records.first().map(|r| r.header.layer_index));
    Ok(records
        .into_iter()
        .filter(|r| {
            Some(r.header.layer_index) == layer && r.header.timestep <= cfg.analyze.max_timestep
        })
        .collect())
}

pub fn cmd_analyze(cfg: &ExperimentConfig) -> Result<String> {
    let out = need(&cfg.paths.out, "out")?;
    let ckpt = checkpoint_path(cfg)?;
    let model = SaeModel::load(&ckpt)?;
    let a = &cfg.analyze;
    let records = analysis_records(cfg, &model)?;
    let pool = concept_records(&records, a.class);
    let queries = query_records(&records, a.class);
    if pool.is_empty() || queries.is_empty() {
        return Err(TideError::usage(format!(
            "class {} has {} pooling and {} query records at t <= {}; need at least one of each",
            a.class,
            pool.len(),
            queries.len(),
            a.max_timestep
        )));
    }
    let qi = a.query.unwrap_or(queries.len() - 1);
    if qi >= queries.len() {
        return Err(TideError::usage(format!(
            "query {qi} out of range 0..{}",
            queries.len()
        )));
    }
    let query = queries[qi];
    let concept = pool_concept_with(&model, &pool, a.k, &format!("class-{}", a.class))?;
    let scores = token_similarity_with(&model, query, &concept)?;
    let class_tokens = query
        .labels
        .as_ref()
        .map(|l| l.iter().filter(|&&c| c == a.class).count());
    let mask_k = a.mask_k.or(class_tokens).unwrap_or(8.min(scores.len()));
    let mask = topk_mask(&scores, mask_k)?;
    let side = (scores.len() as f64).sqrt().round() as usize;
    let geometry = if side * side == scores.len() {
        (side, side)
    } else {
        (1, scores.len())
    };
    ensure_dir(&out)?;
    write_resolved(&out, cfg)?;
    concept.save(&out.join("concept.json"))?;
    for f in &a.formats {
        let name = match f {
            MaskFormat::Json => "mask.json",
            MaskFormat::Pgm => "mask.pgm",
        };
        export_mask(&mask, geometry, &out.join(name), *f)?;
    }
    let mut s = format!(
        "concept_records={}\nquery_sample={}\nmask_k={}\nselected={:?}\n",
        concept.support_count, query.header.sample_id, mask.k, mask.selected
    );
    if let Some(l) = &query.labels {
        let _ = writeln!(s, "precision={:.4}", mask_precision(&mask, l, a.class));
    }
    Ok(s)
}

pub fn cmd_edit(cfg: &ExperimentConfig) -> Result<String> {
    let out = need(&cfg.paths.out, "out")?;
    let spec = cfg
        .edit
        .spec
        .as_ref()
        .ok_or_else(|| TideError::config("edit needs a spec ([edit.spec] or --spec)"))?;
    let ckpt = checkpoint_path(cfg)?;
    let model = SaeModel::load(&ckpt)?;
    let world = World::build(&cfg.model)?;
    let e = &cfg.edit;
    if e.class as usize >= world.source.config.class_count {
        return Err(TideError::config(format!(
            "edit class {} out of range",
            e.class
        )));
    }
    world.sched.check_t(e.timestep)?;
    let mut r = rng::substream(e.sample_seed, "edit-sample");
    let latent = world.source.sample(&mut r, Some(e.class));
    let sample = prepare_sample(&world.source, &world.sched, latent, e.timestep, &mut r)?;
    let hook = hook_of(&model, &world);
    let res = edit_in_pipeline(&world.dit, &model, &hook, spec, &sample, e.k)?;
    ensure_dir(&out)?;
    write_resolved(&out, cfg)?;
    let summary = serde_json::json!({
        "tokens_touched": res.result.tokens_touched,
        "effect_norm": res.effect_norm(),
        "renorm_skipped": res.result.renorm_skipped,
        "layer": hook.layer_index,
        "timestep": e.timestep,
        "pre_norms": res.result.pre_norms,
        "post_norms": res.result.post_norms,
    });
    let p = out.join("edit.json");
    fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n")
        .map_err(|e| TideError::io_at(&p, e))?;
    Ok(format!(
        "tokens_touched={}\neffect_norm={:.6e}\nrenorm_skipped={}\nsummary={}\n",
        res.result.tokens_touched,
        res.effect_norm(),
        res.result.renorm_skipped,
        p.display()
    ))
}
