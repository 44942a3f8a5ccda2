//! The frozen toy DiT, its noise schedule and the synthetic source, built
//! together from one seed.

use serde::{Deserialize, Serialize};

use rand::Rng as _;

use super::dit::{dit_readout_input, init_toy_dit, HookSpec, ToyDiTConfig, ToyDiTParams};
use super::extract::prepare_sample;
use super::schedule::{NoiseSchedule, ScheduleKind};
use super::source::{SourceConfig, SyntheticLatentSource};
use crate::error::{Result, TideError};
use crate::linalg::cholesky_solve;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub dit: ToyDiTConfig,
    /// Step count comes from `dit.steps`.
    pub schedule: ScheduleConfig,
    pub source: SourceConfig,
    pub seed: u64,
    /// Noised samples used to fit the output projection by least squares,
    /// so the frozen model actually predicts noise. 0 keeps the random
    /// projection.
    pub readout_fit_samples: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dit: ToyDiTConfig::default(),
            schedule: ScheduleConfig::default(),
            source: SourceConfig::default(),
            seed: 0,
            readout_fit_samples: 64,
        }
    }
}

/// Ridge strength relative to the mean diagonal of the Gram matrix.
const READOUT_RIDGE: f64 = 1e-4;

pub struct World {
    pub dit: ToyDiTParams,
    pub sched: NoiseSchedule,
    pub source: SyntheticLatentSource,
}

impl World {
    pub fn build(cfg: &WorldConfig) -> Result<Self> {
        let d = &cfg.dit;
        let mut dit = init_toy_dit(d, cfg.seed)?;
        let sched = NoiseSchedule::new(
            d.steps,
            cfg.schedule.beta_start,
            cfg.schedule.beta_end,
            cfg.schedule.kind,
        )?;
        let source = SyntheticLatentSource::new(
            &cfg.source,
            d.token_count,
            d.model_dim,
            d.cond_dim,
            cfg.seed,
        )?;
        if cfg.readout_fit_samples > 0 {
            fit_readout(&mut dit, &sched, &source, cfg.readout_fit_samples, cfg.seed)?;
        }
        Ok(Self { dit, sched, source })
    }

    /// Output of the second-to-last block.
    pub fn penultimate_hook(&self) -> HookSpec {
        HookSpec::block_output(self.dit.config.depth - 2)
    }
}

/// Least-squares fit of `w_out`, `b_out` to the true noise over freshly
/// drawn samples at uniform timesteps. Everything upstream is untouched, so
/// captured activations do not depend on it.
fn fit_readout(
    dit: &mut ToyDiTParams,
    sched: &NoiseSchedule,
    source: &SyntheticLatentSource,
    count: usize,
    seed: u64,
) -> Result<()> {
    let d = dit.config.model_dim;
    let p = d + 1; // bias as a constant feature
    let mut gram = vec![0.0f64; p * p];
    let mut rhs = vec![0.0f64; p * d];
    let mut r = rng::substream(seed, "readout-fit");
    let mut feat = vec![0.0f64; p];
    for _ in 0..count {
        let latent = source.sample(&mut r, None);
        let t = r.gen_range(0..sched.steps());
        let s = prepare_sample(source, sched, latent, t, &mut r)?;
        let (h, _) = dit_readout_input(dit, &s.diffusion.zt, &s.cond, t, &[], None)?;
        for (row, eps) in h.chunks_exact(d).zip(s.diffusion.eps.chunks_exact(d)) {
            for (f, &v) in feat.iter_mut().zip(row) {
                *f = v as f64;
            }
            feat[d] = 1.0;
            for i in 0..p {
                let fi = feat[i];
                for j in 0..=i {
                    gram[i * p + j] += fi * feat[j];
                }
                for (o, &e) in eps.iter().enumerate() {
                    rhs[i * d + o] += fi * e as f64;
                }
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[j * p + i] = gram[i * p + j];
        }
    }
    let ridge = READOUT_RIDGE * (0..p).map(|i| gram[i * p + i]).sum::<f64>() / p as f64;
    for i in 0..p {
        gram[i * p + i] += ridge;
    }
    // solution is p x d: row i holds input feature i's weight to every output
    cholesky_solve(&mut gram, p, &mut rhs, d).ok_or_else(|| {
        TideError::Numeric("readout fit: Gram matrix not positive definite".into())
    })?;
    for o in 0..d {
        for i in 0..d {
            dit.w_out[o * d + i] = rhs[i * d + o] as f32;
        }
        dit.b_out[o] = rhs[d * d + o] as f32;
    }
    Ok(())
}
