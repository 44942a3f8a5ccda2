//! Activation extraction: latent -> noise -> conditioning -> hooked forward
//! -> records on disk.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dit::{dit_forward, HookSpec, ToyDiTParams};
use super::schedule::{add_noise, DiffusionSample, NoiseSchedule};
use super::source::{SyntheticLatent, SyntheticLatentSource};
use crate::dump::{
    sha256_hex, write_record, ActivationRecord, Manifest, Provenance, ScheduleInfo, ShardEntry,
    MANIFEST_FILE, MANIFEST_FORMAT_VERSION,
};
use crate::error::{Result, TideError};
use crate::rng::{self, Rng};

/// How timesteps are chosen per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimestepSpec {
    /// `per_sample` independent draws, uniform over `[lo, hi)` (default `[0, T)`).
    Uniform {
        per_sample: usize,
        #[serde(default)]
        lo: Option<usize>,
        #[serde(default)]
        hi: Option<usize>,
    },
    /// The same fixed list for every sample.
    Fixed { values: Vec<usize> },
}

impl Default for TimestepSpec {
    fn default() -> Self {
        TimestepSpec::Uniform {
            per_sample: 1,
            lo: None,
            hi: None,
        }
    }
}

impl TimestepSpec {
    pub fn per_sample(&self) -> usize {
        match self {
            TimestepSpec::Uniform { per_sample, .. } => *per_sample,
            TimestepSpec::Fixed { values } => values.len(),
        }
    }

    fn validate(&self, steps: usize) -> Result<()> {
        match self {
            TimestepSpec::Uniform { per_sample, lo, hi } => {
                let (lo, hi) = (lo.unwrap_or(0), hi.unwrap_or(steps));
                if *per_sample == 0 || lo >= hi || hi > steps {
                    return Err(TideError::config(format!(
                        "uniform timestep spec invalid: per_sample={per_sample}, range [{lo}, {hi}) with T={steps}"
                    )));
                }
            }
            TimestepSpec::Fixed { values } => {
                if values.is_empty() {
                    return Err(TideError::config("fixed timestep list is empty"));
                }
                if let Some(t) = values.iter().find(|&&t| t >= steps) {
                    return Err(TideError::config(format!("timestep {t} >= T = {steps}")));
                }
            }
        }
        Ok(())
    }

    fn draw(&self, r: &mut Rng, steps: usize) -> Vec<usize> {
        match self {
            TimestepSpec::Uniform { per_sample, lo, hi } => {
                let (lo, hi) = (lo.unwrap_or(0), hi.unwrap_or(steps));
                (0..*per_sample).map(|_| r.gen_range(lo..hi)).collect()
            }
            TimestepSpec::Fixed { values } => values.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub count: usize,
    pub timesteps: TimestepSpec,
    pub samples_per_shard: usize,
    pub split: String,
    pub seed: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            count: 64,
            timesteps: TimestepSpec::default(),
            samples_per_shard: 256,
            split: "train".into(),
            seed: 0,
        }
    }
}

/// One noised sample plus the information needed to label and condition it.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub latent: SyntheticLatent,
    pub diffusion: DiffusionSample,
    pub cond: Vec<f32>,
}

/// Noise a latent at `t` and attach its class conditioning.
pub fn prepare_sample(
    source: &SyntheticLatentSource,
    sched: &NoiseSchedule,
    latent: SyntheticLatent,
    t: usize,
    r: &mut Rng,
) -> Result<PreparedSample> {
    let eps = rng::normal_vec(r, latent.z0.len(), 1.0);
    let diffusion = add_noise(&latent.z0, &eps, t, sched)?;
    let cond = source.class_cond[latent.object as usize].clone();
    Ok(PreparedSample {
        latent,
        diffusion,
        cond,
    })
}

/// Everything needed to extract a dataset.
pub struct Extractor<'a> {
    pub source: &'a SyntheticLatentSource,
    pub sched: &'a NoiseSchedule,
    pub params: &'a ToyDiTParams,
    pub hooks: &'a [HookSpec],
    pub config: &'a ExtractConfig,
}

/// Records of one sample/timestep pair, with the timestep used to noise it.
pub struct ExtractedStep {
    pub sample_id: u64,
    pub t: usize,
    pub records: Vec<ActivationRecord>,
}

impl<'a> Extractor<'a> {
    pub fn validate(&self) -> Result<()> {
        if self.config.count == 0 {
            return Err(TideError::config("extraction count must be >= 1"));
        }
        if self.config.samples_per_shard == 0 {
            return Err(TideError::config("samples_per_shard must be >= 1"));
        }
        if self.hooks.is_empty() {
            return Err(TideError::config("extraction needs at least one hook"));
        }
        for h in self.hooks {
            self.params.check_hook(h)?;
        }
        let cfg = &self.params.config;
        if self.source.token_count != cfg.token_count || self.source.dim != cfg.model_dim {
            return Err(TideError::config(
                "synthetic source shape differs from the toy DiT",
            ));
        }
        if self.sched.steps() != cfg.steps {
            return Err(TideError::config(format!(
                "schedule T = {} differs from the DiT's T = {}",
                self.sched.steps(),
                cfg.steps
            )));
        }
        self.config.timesteps.validate(self.sched.steps())
    }

    pub fn shard_count(&self) -> usize {
        self.config.count.div_ceil(self.config.samples_per_shard)
    }

    /// Generate one shard's records. Shard `s` draws from its own stream,
    /// keyed by seed, split name and `s`, so shards can be produced in any
    /// order and splits sharing a seed still differ.
    pub fn shard(&self, shard_index: usize) -> Result<Vec<ExtractedStep>> {
        let spc = self.config.samples_per_shard;
        let start = shard_index * spc;
        let end = (start + spc).min(self.config.count);
        let name = format!("extract-shard/{}", self.config.split);
        let mut r = rng::indexed(self.config.seed, &name, shard_index as u64);
        let cfg = &self.params.config;
        let mut out = Vec::new();
        for sample in start..end {
            let latent = self.source.sample(&mut r, None);
            let ts = self.config.timesteps.draw(&mut r, self.sched.steps());
            for t in ts {
                let prep = prepare_sample(self.source, self.sched, latent.clone(), t, &mut r)?;
                let (_, caps) =
                    dit_forward(self.params, &prep.diffusion.zt, &prep.cond, t, self.hooks)?;
                let records = caps
                    .into_iter()
                    .map(|c| {
                        ActivationRecord::new(
                            c.hook.layer_index as u16,
                            t as u32,
                            cfg.token_count,
                            cfg.model_dim,
                            sample as u64,
                            c.data,
                            Some(latent.token_labels.clone()),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push(ExtractedStep {
                    sample_id: sample as u64,
                    t: prep.diffusion.t,
                    records,
                });
            }
        }
        Ok(out)
    }
}

fn shard_name(i: usize) -> String {
    format!("shard-{i:05}.tideact")
}

fn write_shard(out: &Path, i: usize, steps: &[ExtractedStep]) -> Result<ShardEntry> {
    let name = shard_name(i);
    let path = out.join(&name);
    let mut buf = Vec::new();
    let mut records = 0u64;
    for s in steps {
        for rec in &s.records {
            write_record(&mut buf, rec)?;
            records += 1;
        }
    }
    let file = File::create(&path).map_err(|e| TideError::io_at(&path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(|e| TideError::io_at(&path, e))?;
    w.flush().map_err(|e| TideError::io_at(&path, e))?;
    Ok(ShardEntry {
        file: name,
        records,
        digest: sha256_hex(&buf),
    })
}

/// Extract a dataset into `out` (which must exist) and write its manifest
/// last. With `workers > 1` shards are generated on a thread pool; output
/// bytes are identical to the serial run.
pub fn extract_activations(ex: &Extractor<'_>, out: &Path, workers: usize) -> Result<Manifest> {
    ex.validate()?;
    let meta = fs::metadata(out).map_err(|e| TideError::io_at(out, e))?;
    if !meta.is_dir() {
        return Err(TideError::config(format!(
            "output path {} is not a directory",
            out.display()
        )));
    }
    let shards = ex.shard_count();
    let results: Vec<Result<ShardEntry>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| TideError::config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            (0..shards)
                .into_par_iter()
                .map(|i| ex.shard(i).and_then(|s| write_shard(out, i, &s)))
                .collect()
        })
    } else {
        (0..shards)
            .map(|i| ex.shard(i).and_then(|s| write_shard(out, i, &s)))
            .collect()
    };

    let mut entries = Vec::with_capacity(shards);
    let mut failure = None;
    for r in results {
        match r {
            Ok(e) if failure.is_none() => entries.push(e),
            Ok(_) => {}
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        seed: ex.config.seed,
        provenance: Provenance {
            model: "toy-dit".into(),
            layer_taps: ex.hooks.to_vec(),
            schedule: Some(ScheduleInfo {
                steps: ex.sched.steps(),
                beta_start: ex.sched.beta[0],
                beta_end: *ex.sched.beta.last().unwrap(),
                kind: format!("{:?}", ex.sched.kind).to_lowercase(),
            }),
            model_config: Some(serde_json::json!({
                "toy_dit": ex.params.config,
                "dit_seed": ex.params.seed,
                "source": ex.source.config,
                "timesteps": ex.config.timesteps,
            })),
        },
        token_count: ex.params.config.token_count as u32,
        dim: ex.params.config.model_dim as u32,
        labels: true,
        split: ex.config.split.clone(),
        total_records: entries.iter().map(|e| e.records).sum(),
        complete: failure.is_none(),
        shards: entries,
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation_gen::{init_toy_dit, ScheduleKind, SourceConfig, ToyDiTConfig};

    struct Fixture {
        source: SyntheticLatentSource,
        sched: NoiseSchedule,
        params: ToyDiTParams,
    }

    fn fixture() -> Fixture {
        let cfg = ToyDiTConfig {
            depth: 2,
            token_count: 16,
            model_dim: 8,
            heads: 2,
            cond_dim: 4,
            mlp_ratio: 2,
            temb_dim: 8,
            patch_rank: 4,
            steps: 1000,
            gate_init: 0.1,
        };
        let src = SourceConfig {
            class_count: 3,
            object_min_side: 1,
            object_max_side: 2,
            max_cross_cosine: 0.9,
            ..SourceConfig::default()
        };
        Fixture {
            source: SyntheticLatentSource::new(&src, 16, 8, 4, 1).unwrap(),
            sched: NoiseSchedule::new(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap(),
            params: init_toy_dit(&cfg, 2).unwrap(),
        }
    }

    #[test]
    fn timesteps_are_uniform_chi_square() {
        // 10^4 draws into 10 bins of width 100; chi^2 with 9 dof, p = 0.01 critical value 21.67.
        let spec = TimestepSpec::default();
        let mut r = rng::substream(1, "ts");
        let mut bins = [0usize; 10];
        for _ in 0..10_000 {
            let t = spec.draw(&mut r, 1000)[0];
            bins[t / 100] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = bins
            .iter()
            .map(|&b| (b as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 21.67, "chi2 = {chi2}");
    }

    #[test]
    fn stored_timestep_matches_noising_timestep() {
        let fx = fixture();
        let hooks = [HookSpec::block_output(0), HookSpec::block_output(1)];
        let cfg = ExtractConfig {
            count: 3,
            timesteps: TimestepSpec::Uniform {
                per_sample: 2,
                lo: None,
                hi: None,
            },
            samples_per_shard: 2,
            ..ExtractConfig::default()
        };
        let ex = Extractor {
            source: &fx.source,
            sched: &fx.sched,
            params: &fx.params,
            hooks: &hooks,
            config: &cfg,
        };
        let steps: Vec<ExtractedStep> = (0..ex.shard_count())
            .flat_map(|s| ex.shard(s).unwrap())
            .collect();
        assert_eq!(steps.len(), 6);
        for s in &steps {
            assert_eq!(s.records.len(), 2);
            for r in &s.records {
                assert_eq!(r.header.timestep as usize, s.t);
                assert_eq!(r.header.sample_id, s.sample_id);
                assert_eq!(r.labels.as_ref().unwrap().len(), 16);
            }
        }
    }

    #[test]
    fn single_record_manifest() {
        let fx = fixture();
        let dir = tempfile::tempdir().unwrap();
        let hooks = [HookSpec::block_output(0)];
        let cfg = ExtractConfig {
            count: 1,
            ..ExtractConfig::default()
        };
        let ex = Extractor {
            source: &fx.source,
            sched: &fx.sched,
            params: &fx.params,
            hooks: &hooks,
            config: &cfg,
        };
        let m = extract_activations(&ex, dir.path(), 1).unwrap();
        assert_eq!(m.total_records, 1);
        assert!(m.complete);
        assert!(crate::dump::validate_dataset(dir.path()).all_pass());
    }

    #[test]
    fn missing_output_dir_writes_nothing() {
        let fx = fixture();
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let hooks = [HookSpec::block_output(0)];
        let cfg = ExtractConfig::default();
        let ex = Extractor {
            source: &fx.source,
            sched: &fx.sched,
            params: &fx.params,
            hooks: &hooks,
            config: &cfg,
        };
        assert!(extract_activations(&ex, &missing, 1).is_err());
        assert!(!missing.exists());
    }
}
