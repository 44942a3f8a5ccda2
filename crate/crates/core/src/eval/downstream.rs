//! Downstream diffusion loss with the hooked activation replaced by its
//! reconstruction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation_gen::{
    diffusion_loss, dit_forward, dit_forward_with, prepare_sample, HookSpec, Intervention,
    NoiseSchedule, PreparedSample, SyntheticLatentSource, TimestepSpec, ToyDiTParams,
};
use crate::error::{Result, TideError};
use crate::rng;
use crate::sae::SaeModel;

/// Which held-out samples to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSpec {
    pub count: usize,
    pub timesteps: TimestepSpec,
    pub seed: u64,
}

impl Default for DownstreamSpec {
    fn default() -> Self {
        Self {
            count: 64,
            timesteps: TimestepSpec::default(),
            // distinct from the default extraction seed so samples are held out
            seed: 0x5eed_0ff5,
        }
    }
}

/// What replaces the hooked activation.
#[derive(Debug, Clone, Copy)]
pub enum Substitution<'a> {
    /// Write the activation back unchanged.
    Identity,
    Zero,
    /// Per-token reconstruction at the sample's timestep with this `k`.
    Model(&'a SaeModel, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamResult {
    pub loss_sub: f64,
    pub loss_base: f64,
    pub samples: usize,
}

impl DownstreamResult {
    pub fn ratio(&self) -> f64 {
        self.loss_sub / self.loss_base
    }
}

/// Draw `spec.count` noised samples from the source.
pub fn downstream_samples(
    source: &SyntheticLatentSource,
    sched: &NoiseSchedule,
    spec: &DownstreamSpec,
) -> Result<Vec<PreparedSample>> {
    let mut r = rng::substream(spec.seed, "downstream");
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let latent = source.sample(&mut r, None);
        let ts = match &spec.timesteps {
            TimestepSpec::Fixed { values } => vec![values[i % values.len()]],
            TimestepSpec::Uniform { lo, hi, .. } => {
                use rand::Rng as _;
                vec![r.gen_range(lo.unwrap_or(0)..hi.unwrap_or(sched.steps()))]
            }
        };
        out.push(prepare_sample(source, sched, latent, ts[0], &mut r)?);
    }
    Ok(out)
}

fn substitute(sub: Substitution<'_>, act: &mut [f32], t: usize) -> Result<()> {
    match sub {
        Substitution::Identity => {
            let copy = act.to_vec();
            act.copy_from_slice(&copy);
        }
        Substitution::Zero => act.iter_mut().for_each(|v| *v = 0.0),
        Substitution::Model(m, k) => {
            let f = m.f();
            if act.len() % f != 0 {
                return Err(TideError::Dimension {
                    what: "hooked activation width",
                    expected: f,
                    got: act.len(),
                });
            }
            let mut scratch = Vec::new();
            let mut out = vec![0.0f32; f];
            for tok in act.chunks_exact_mut(f) {
                let pairs = m.encode_pairs(tok, t, k, &mut scratch)?;
                m.params.decode_sparse(&pairs, &mut out);
                tok.copy_from_slice(&out);
            }
        }
    }
    Ok(())
}

/// Mean epsilon-prediction loss over `samples`, vanilla and substituted.
pub fn downstream_loss_on(
    dit: &ToyDiTParams,
    samples: &[PreparedSample],
    hook: &HookSpec,
    sub: Substitution<'_>,
    pool: Option<&rayon::ThreadPool>,
) -> Result<DownstreamResult> {
    dit.check_hook(hook)?;
    if samples.is_empty() {
        return Err(TideError::usage(
            "downstream evaluation needs at least one sample",
        ));
    }
    if let Substitution::Model(m, _) = sub {
        if m.f() != dit.config.model_dim {
            return Err(TideError::config(format!(
                "SAE input dim {} differs from the model width {}",
                m.f(),
                dit.config.model_dim
            )));
        }
        if let Some(h) = m.meta.as_ref().and_then(|mm| mm.hook.as_ref()) {
            if h != hook {
                return Err(TideError::config(format!(
                    "SAE was trained on layer {} ({:?}), evaluation hook is layer {} ({:?})",
                    h.layer_index, h.capture_point, hook.layer_index, hook.capture_point
                )));
            }
        }
    }
    let one = |s: &PreparedSample| -> Result<(f64, f64)> {
        let t = s.diffusion.t;
        let (base, _) = dit_forward(dit, &s.diffusion.zt, &s.cond, t, &[])?;
        let mut apply = |act: &mut [f32]| substitute(sub, act, t);
        let iv = Intervention {
            hook: hook.clone(),
            apply: &mut apply,
        };
        let (pred, _) = dit_forward_with(dit, &s.diffusion.zt, &s.cond, t, &[], Some(iv))?;
        Ok((
            diffusion_loss(&pred, &s.diffusion.eps)?,
            diffusion_loss(&base, &s.diffusion.eps)?,
        ))
    };
    let per: Vec<Result<(f64, f64)>> = match pool {
        Some(p) => p.install(|| samples.par_iter().map(one).collect()),
        None => samples.iter().map(one).collect(),
    };
    let (mut sub_sum, mut base_sum) = (0.0, 0.0);
    for r in per {
        let (a, b) = r?;
        sub_sum += a;
        base_sum += b;
    }
    let n = samples.len() as f64;
    Ok(DownstreamResult {
        loss_sub: sub_sum / n,
        loss_base: base_sum / n,
        samples: samples.len(),
    })
}

/// Generate held-out samples and score a substitution.
pub fn downstream_diffusion_loss(
    dit: &ToyDiTParams,
    sched: &NoiseSchedule,
    source: &SyntheticLatentSource,
    sub: Substitution<'_>,
    hook: &HookSpec,
    spec: &DownstreamSpec,
    pool: Option<&rayon::ThreadPool>,
) -> Result<DownstreamResult> {
    let samples = downstream_samples(source, sched, spec)?;
    downstream_loss_on(dit, &samples, hook, sub, pool)
}
