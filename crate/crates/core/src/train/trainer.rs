//! The training loop: batch, optional token sampling, scheduled k,
//! forward/backward, Adam step, dead-latent revival, logging, checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{sparsity_at, TrainConfig};
use super::grad::{forward_backward, SparsityMode};
use super::optim::{optimizer_step, AdamConfig, OptimState};
use super::revival::{detect_and_revive, DeadLatentTracker, WorstToken, WorstTokens};
use super::sampling::BatchStream;
use crate::dump::{load_records, manifest_path, validate_dataset, Manifest, TokenTable};
use crate::error::{Result, TideError};
use crate::linalg::all_finite;
use crate::rng;
use crate::sae::checkpoint::{Reader, Writer};
use crate::sae::{
    load_adaln_table, relu_l1_forward, tide_forward, CheckpointMeta, SaeCheckpoint, SaeModel,
    SaeParams, TemporalModulator,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
const STATE_MAGIC: &[u8; 8] = b"TIDESTA1";
/// High-error tokens pushed into the revival buffer per step.
const WORST_PER_STEP: usize = 4;

/// Decoder columns from a seeded Gaussian, normalized; encoder = decoder
/// transposed; zero bias.
pub fn init_params(f: usize, n: usize, seed: u64) -> SaeParams<f32> {
    if n < f {
        log::warn!("latent size n = {n} is below input dim f = {f}");
    }
    let mut r = rng::substream(seed, "sae-init");
    let mut p = SaeParams::<f32>::zeros(f, n);
    p.w_dec = rng::normal_vec(&mut r, n * f, 1.0);
    p.normalize_decoder();
    p.w_enc = p.w_dec.clone();
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub mse: f64,
    pub cos: f64,
    pub k: usize,
    pub dead_frac: f64,
    pub wall_ms: u64,
}

/// Every step's statistics, plus the subset written to the CSV log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub history: Vec<StepLog>,
    pub rows: Vec<StepLog>,
    pub revived: u64,
}

impl TrainingLog {
    pub fn final_mse(&self) -> Option<f64> {
        self.history.last().map(|s| s.mse)
    }

    /// Trailing moving average of per-step MSE.
    pub fn smoothed_mse(&self, window: usize) -> Vec<f64> {
        smooth(
            &self.history.iter().map(|s| s.mse).collect::<Vec<_>>(),
            window,
        )
    }
}

/// Trailing moving average; entry `i` averages `[i + 1 - window, i]`.
pub fn smooth(v: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(v.len());
    let mut acc = 0.0;
    for i in 0..v.len() {
        acc += v[i];
        if i >= w {
            acc -= v[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

pub fn log_path_for(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

pub fn state_path_for(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".state");
    PathBuf::from(s)
}

/// Load a dataset's tokens, keeping only `layer` when given.
pub fn load_table(manifest: &Path, layer: Option<u16>) -> Result<(Manifest, TokenTable)> {
    let report = validate_dataset(manifest);
    if !report.all_pass() {
        return Err(TideError::data(format!(
            "dataset {} failed validation: {}",
            manifest.display(),
            report.problems().join("; ")
        )));
    }
    let (m, mut records) = load_records(manifest)?;
    let layers: std::collections::BTreeSet<u16> =
        records.iter().map(|r| r.header.layer_index).collect();
    match layer {
        Some(l) => {
            records.retain(|r| r.header.layer_index == l);
            if records.is_empty() {
                return Err(TideError::config(format!(
                    "dataset has no records for layer {l} (has {layers:?})"
                )));
            }
        }
        None if layers.len() > 1 => {
            return Err(TideError::config(format!(
                "dataset mixes layers {layers:?}; choose one with `layer`"
            )));
        }
        None => {}
    }
    let table = TokenTable::from_records(&records)?;
    Ok((m, table))
}

/// Diffusion step count from the manifest, then the config, then 1000.
pub fn resolve_steps(cfg: &TrainConfig, manifest: &Manifest) -> usize {
    if cfg.diffusion_steps > 0 {
        return cfg.diffusion_steps;
    }
    manifest
        .provenance
        .schedule
        .as_ref()
        .map(|s| s.steps)
        .unwrap_or(1000)
}

/// Owner of all mutable training state.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub params: SaeParams<f32>,
    pub modulator: Option<TemporalModulator<f32>>,
    pub opt: OptimState<f32>,
    pub tracker: DeadLatentTracker,
    pub worst: WorstTokens<f32>,
    pub step: u64,
    pub log: TrainingLog,
    stream: BatchStream<'a>,
    pool: Option<rayon::ThreadPool>,
    adam: AdamConfig,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(mut cfg: TrainConfig, table: &'a TokenTable, steps: usize) -> Result<Self> {
        if cfg.f == 0 {
            cfg.f = table.dim;
        }
        if cfg.f != table.dim {
            return Err(TideError::Dimension {
                what: "config f vs dataset dim",
                expected: cfg.f,
                got: table.dim,
            });
        }
        cfg.validate()?;
        if let Some(&t) = table.timesteps.iter().max() {
            if t as usize >= steps {
                return Err(TideError::config(format!(
                    "dataset timestep {t} exceeds T = {steps}"
                )));
            }
        }
        let params = init_params(cfg.f, cfg.n, cfg.seed);
        let modulator = if cfg.temporal {
            let m = match &cfg.adaln_table {
                Some(p) => {
                    let m = load_adaln_table(p)?;
                    if m.f != cfg.f || m.steps != steps {
                        return Err(TideError::config(format!(
                            "adaLN table has f = {}, T = {}; training needs f = {}, T = {steps}",
                            m.f, m.steps, cfg.f
                        )));
                    }
                    m
                }
                None => TemporalModulator::new(
                    cfg.f,
                    cfg.modulator_embed_dim,
                    cfg.modulator_hidden_dim,
                    steps,
                    cfg.seed,
                )?,
            };
            Some(m)
        } else {
            None
        };
        let pool = if cfg.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| TideError::config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        let adam = AdamConfig {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            epsilon: cfg.adam_epsilon,
            decoder_norm: cfg.decoder_norm,
        };
        Ok(Self {
            opt: OptimState::new(&params, modulator.as_ref()),
            tracker: DeadLatentTracker::new(cfg.n, 0),
            worst: WorstTokens::new(cfg.revival_buffer),
            step: 0,
            log: TrainingLog::default(),
            stream: BatchStream::new(table, cfg.token_sample_rate, cfg.seed),
            pool,
            adam,
            params,
            modulator,
            started: Instant::now(),
            cfg,
        })
    }

    pub fn mode_at(&self, step: u64) -> SparsityMode {
        match self.cfg.baseline_l1 {
            Some(l) => SparsityMode::L1(l),
            None => SparsityMode::TopK(sparsity_at(&self.cfg.schedule(), step)),
        }
    }

    /// Run one optimization step and return its statistics.
    pub fn step_once(&mut self) -> Result<StepLog> {
        let step = self.step;
        // Revival runs before a step rather than after one, so a finished
        // run never ends on freshly re-seeded, untrained latents.
        if step > 0 && step % self.cfg.revival_interval == 0 {
            let revived = detect_and_revive(
                &mut self.params,
                &mut self.tracker,
                step,
                self.cfg.dead_window,
                &mut self.worst,
                Some(&mut self.opt),
            );
            if !revived.is_empty() {
                log::debug!("step {step}: revived {} latents", revived.len());
            }
            self.log.revived += revived.len() as u64;
        }
        let mode = self.mode_at(step);
        let batch = self.stream.batch(step, self.cfg.batch_tokens);
        let (grads, stats) = forward_backward(
            &self.params,
            self.modulator.as_ref(),
            &batch.data,
            &batch.timesteps,
            mode,
            self.cfg.grad_chunk,
            self.pool.as_ref(),
        )
        .map_err(|e| match e {
            TideError::Numeric(m) => TideError::Numeric(format!("step {step}: {m}")),
            e => e,
        })?;
        if !all_finite(&grads.w_enc) || !all_finite(&grads.w_dec) || !all_finite(&grads.b_enc) {
            return Err(TideError::Numeric(format!(
                "step {step}: non-finite gradient (loss {}, mse {})",
                stats.loss, stats.mse
            )));
        }
        optimizer_step(
            &mut self.params,
            self.modulator.as_mut(),
            &mut self.opt,
            &grads,
            &self.adam,
        )?;
        self.tracker.record(&stats.active, step);

        // Buffer the worst tokens of this batch with residuals under the updated weights.
        let mut order: Vec<usize> = (0..stats.token_err.len()).collect();
        order.sort_by(|&a, &b| {
            stats.token_err[b]
                .total_cmp(&stats.token_err[a])
                .then(a.cmp(&b))
        });
        for &i in order.iter().take(WORST_PER_STEP) {
            let a = batch.token(i);
            let a_hat = match mode {
                SparsityMode::TopK(k) => {
                    tide_forward(
                        &self.params,
                        self.modulator.as_ref(),
                        a,
                        batch.timesteps[i] as usize,
                        k,
                    )?
                    .1
                }
                SparsityMode::L1(_) => relu_l1_forward(&self.params, a)?.1,
            };
            let residual: Vec<f32> = a.iter().zip(&a_hat).map(|(x, y)| x - y).collect();
            self.worst.push(WorstToken {
                err: stats.token_err[i],
                residual,
            });
        }

        self.step += 1;
        let k = match mode {
            SparsityMode::TopK(k) => k,
            SparsityMode::L1(_) => stats.l0.round() as usize,
        };
        let entry = StepLog {
            step: self.step,
            loss: stats.loss,
            mse: stats.mse,
            cos: stats.cos,
            k,
            dead_frac: self.tracker.dead_fraction(self.step, self.cfg.dead_window),
            wall_ms: if self.cfg.log_wall_time {
                self.started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        self.log.history.push(entry.clone());
        if self.cfg.log_every > 0
            && (self.step % self.cfg.log_every == 0 || self.step == self.cfg.max_steps)
        {
            self.log.rows.push(entry.clone());
        }
        Ok(entry)
    }

    pub fn run_until(&mut self, max_steps: u64) -> Result<()> {
        while self.step < max_steps {
            self.step_once()?;
        }
        Ok(())
    }

    /// Current weights as an inference model (no metadata).
    pub fn model(&self) -> SaeModel {
        SaeModel {
            params: self.params.clone(),
            modulator: self.modulator.clone(),
            k_final: self.cfg.k_final,
            l1: self.cfg.baseline_l1,
            meta: None,
        }
    }

    pub fn checkpoint(&self) -> SaeCheckpoint {
        SaeCheckpoint {
            params: self.params.clone(),
            modulator: self.modulator.clone(),
            k_final: self.cfg.k_final as u32,
        }
    }

    pub fn state_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(STATE_MAGIC);
        w.u64(self.step);
        w.u64(self.opt.step);
        w.u32(self.opt.tensors.len() as u32);
        for t in &self.opt.tensors {
            w.u64(t.m.len() as u64);
            w.f32s(&t.m);
            w.f32s(&t.v);
        }
        w.u64(self.tracker.last_active_step.len() as u64);
        for (&a, &c) in self
            .tracker
            .last_active_step
            .iter()
            .zip(&self.tracker.activation_counts)
        {
            w.u64(a);
            w.u64(c);
        }
        w.finish()
    }

    /// Restore the step counter, optimizer moments and tracker. The revival
    /// buffer restarts empty.
    pub fn restore_state(&mut self, ckpt: SaeCheckpoint, state: &[u8]) -> Result<()> {
        if ckpt.params.f != self.cfg.f || ckpt.params.n != self.cfg.n {
            return Err(TideError::config(format!(
                "resume checkpoint is {}x{}, config wants {}x{}",
                ckpt.params.f, ckpt.params.n, self.cfg.f, self.cfg.n
            )));
        }
        if ckpt.modulator.is_some() != self.modulator.is_some() {
            return Err(TideError::config(
                "resume checkpoint temporal flag differs from config",
            ));
        }
        let mut r = Reader::open(state, STATE_MAGIC)?;
        let step = r.u64()?;
        let opt_step = r.u64()?;
        let count = r.u32()? as usize;
        if count != self.opt.tensors.len() {
            return Err(TideError::Format(format!(
                "optimizer state has {count} tensors"
            )));
        }
        for t in self.opt.tensors.iter_mut() {
            let len = r.u64()? as usize;
            if len != t.m.len() {
                return Err(TideError::Format("optimizer tensor shape mismatch".into()));
            }
            t.m = r.f32s(len)?;
            t.v = r.f32s(len)?;
        }
        let n = r.u64()? as usize;
        if n != self.cfg.n {
            return Err(TideError::Format("tracker size mismatch".into()));
        }
        for j in 0..n {
            self.tracker.last_active_step[j] = r.u64()?;
            self.tracker.activation_counts[j] = r.u64()?;
        }
        r.done()?;
        self.params = ckpt.params;
        self.modulator = ckpt.modulator;
        self.step = step;
        self.opt.step = opt_step;
        Ok(())
    }

    /// Write checkpoint, metadata and optimizer state (each atomically).
    pub fn save(
        &self,
        path: &Path,
        dataset: Option<&Path>,
        hook: Option<crate::activation_gen::HookSpec>,
    ) -> Result<()> {
        self.checkpoint().save(path)?;
        let meta = CheckpointMeta {
            hook,
            step: self.step,
            k_final: self.cfg.k_final,
            temporal: self.modulator.is_some(),
            baseline_l1: self.cfg.baseline_l1,
            dataset: dataset.map(|d| d.display().to_string()),
            tool_version: TOOL_VERSION.to_string(),
        };
        meta.save_for(path)?;
        let sp = state_path_for(path);
        let tmp = sp.with_extension("state.tmp");
        fs::write(&tmp, self.state_bytes()).map_err(|e| TideError::io_at(&tmp, e))?;
        fs::rename(&tmp, &sp).map_err(|e| TideError::io_at(&sp, e))
    }
}

const LOG_HEADER: &str = "step,loss,mse,cos,k,dead_frac,wall_ms";

fn format_row(r: &StepLog) -> String {
    format!(
        "{},{:.9e},{:.9e},{:.9},{},{:.6},{}",
        r.step, r.loss, r.mse, r.cos, r.k, r.dead_frac, r.wall_ms
    )
}

/// Train on a dataset and write `<out>` (checkpoint), `<out>.json` (meta),
/// `<out>.state` (optimizer state) and `<out>.log.csv`. With `cfg.resume`
/// and an existing checkpoint, training continues from its step.
pub fn train(cfg: &TrainConfig, manifest: &Path, out_ckpt: &Path) -> Result<TrainingLog> {
    let mpath = manifest_path(manifest);
    let (m, table) = load_table(&mpath, cfg.layer)?;
    let steps = resolve_steps(cfg, &m);
    let mut trainer = Trainer::new(cfg.clone(), &table, steps)?;
    let hook = match (cfg.layer, m.provenance.layer_taps.as_slice()) {
        (Some(l), taps) => taps.iter().find(|h| h.layer_index == l as usize).cloned(),
        (None, [one]) => Some(one.clone()),
        _ => None,
    };

    if let Some(dir) = out_ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| TideError::io_at(dir, e))?;
    }
    let log_path = log_path_for(out_ckpt);
    let resuming = cfg.resume && out_ckpt.exists();
    if resuming {
        let ck = SaeCheckpoint::load(out_ckpt)?;
        let sp = state_path_for(out_ckpt);
        let state = fs::read(&sp).map_err(|e| TideError::io_at(&sp, e))?;
        trainer.restore_state(ck, &state)?;
        log::info!("resuming at step {}", trainer.step);
    } else {
        fs::write(&log_path, format!("{LOG_HEADER}\n"))
            .map_err(|e| TideError::io_at(&log_path, e))?;
    }

    let mut log_file = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| TideError::io_at(&log_path, e))?;
    let mut written = 0;
    let flush = |trainer: &Trainer<'_>, written: &mut usize, file: &mut fs::File| -> Result<()> {
        for r in &trainer.log.rows[*written..] {
            writeln!(file, "{}", format_row(r)).map_err(|e| TideError::io_at(&log_path, e))?;
        }
        *written = trainer.log.rows.len();
        Ok(())
    };

    while trainer.step < cfg.max_steps {
        trainer.step_once()?;
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
            flush(&trainer, &mut written, &mut log_file)?;
            trainer.save(out_ckpt, Some(&mpath), hook.clone())?;
        }
    }
    flush(&trainer, &mut written, &mut log_file)?;
    trainer.save(out_ckpt, Some(&mpath), hook)?;
    Ok(trainer.log)
}
