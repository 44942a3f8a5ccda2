use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TideError};

/// A rational rate such as `1/16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Rate {
    pub num: u32,
    pub den: u32,
}

impl Rate {
    pub const ONE: Rate = Rate { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(TideError::config(format!(
                "rate {num}/{den} must satisfy 0 < rate <= 1"
            )));
        }
        Ok(Self { num, den })
    }

    /// `ceil(rate * n)`
    pub fn kept(&self, n: usize) -> usize {
        (n * self.num as usize).div_ceil(self.den as usize)
    }

    pub fn is_one(&self) -> bool {
        self.num == self.den
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl From<Rate> for String {
    fn from(r: Rate) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for Rate {
    type Error = TideError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for Rate {
    type Err = TideError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || TideError::config(format!("cannot parse rate '{s}' (expected e.g. 1/16)"));
        match s.trim().split_once('/') {
            Some((a, b)) => Rate::new(
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ),
            None => {
                let v: u32 = s.trim().parse().map_err(|_| bad())?;
                Rate::new(v, 1)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SparsityKind {
    Constant,
    LinearDecay,
    #[default]
    GeometricDecay,
}

/// Active-latent budget over training: decays from `k_start` to `k_final`
/// over `warmup_steps`, then stays at `k_final`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySchedule {
    pub kind: SparsityKind,
    pub k_start: usize,
    pub k_final: usize,
    pub warmup_steps: u64,
}

impl SparsitySchedule {
    pub fn constant(k: usize) -> Self {
        Self {
            kind: SparsityKind::Constant,
            k_start: k,
            k_final: k,
            warmup_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_final == 0 || self.k_start < self.k_final {
            return Err(TideError::config(format!(
                "sparsity schedule needs k_start ({}) >= k_final ({}) >= 1",
                self.k_start, self.k_final
            )));
        }
        Ok(())
    }
}

/// `k` at `step`, rounded to an integer and clamped to `[k_final, k_start]`.
pub fn sparsity_at(s: &SparsitySchedule, step: u64) -> usize {
    if s.kind == SparsityKind::Constant || step >= s.warmup_steps || s.k_start == s.k_final {
        return s.k_final;
    }
    let frac = step as f64 / s.warmup_steps as f64;
    let (ks, kf) = (s.k_start as f64, s.k_final as f64);
    let k = match s.kind {
        SparsityKind::LinearDecay => ks + (kf - ks) * frac,
        SparsityKind::GeometricDecay => ks * (kf / ks).powf(frac),
        SparsityKind::Constant => kf,
    };
    (k.round() as usize).clamp(s.k_final, s.k_start)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Latent (dictionary) size.
    pub n: usize,
    /// Input dimension; taken from the dataset when zero.
    pub f: usize,
    pub k_final: usize,
    /// Explicit schedule; when absent, geometric decay from `4 k_final`
    /// over the first 10% of `max_steps`.
    pub sparsity_schedule: Option<SparsitySchedule>,
    pub token_sample_rate: Rate,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub revival_interval: u64,
    pub dead_window: u64,
    pub seed: u64,
    pub temporal: bool,
    /// Switches to ReLU + l1 training with this penalty.
    pub baseline_l1: Option<f64>,
    pub decoder_norm: bool,
    pub modulator_embed_dim: usize,
    pub modulator_hidden_dim: usize,
    /// Diffusion step count; taken from the dataset manifest when zero.
    pub diffusion_steps: usize,
    /// Optional exporter adaLN table used to initialize the modulator.
    pub adaln_table: Option<PathBuf>,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Record wall-clock milliseconds in the log (breaks byte-identical logs).
    pub log_wall_time: bool,
    pub workers: usize,
    /// Tokens per gradient shard; fixes the reduction order.
    pub grad_chunk: usize,
    /// High-error tokens kept for revival.
    pub revival_buffer: usize,
    /// Train on records of this layer only (required for multi-layer dumps).
    pub layer: Option<u16>,
    /// Continue from the checkpoint and optimizer state at the output path.
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 1024,
            f: 0,
            k_final: 32,
            sparsity_schedule: None,
            token_sample_rate: Rate { num: 1, den: 16 },
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_tokens: 256,
            max_steps: 20_000,
            revival_interval: 500,
            dead_window: 1000,
            seed: 0,
            temporal: true,
            baseline_l1: None,
            decoder_norm: true,
            modulator_embed_dim: 64,
            modulator_hidden_dim: 64,
            diffusion_steps: 0,
            adaln_table: None,
            log_every: 100,
            checkpoint_every: 0,
            log_wall_time: false,
            workers: 1,
            grad_chunk: 64,
            revival_buffer: 256,
            layer: None,
            resume: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> SparsitySchedule {
        self.sparsity_schedule.unwrap_or_else(|| {
            let k_start = (4 * self.k_final).min(self.n).max(self.k_final);
            SparsitySchedule {
                kind: SparsityKind::GeometricDecay,
                k_start,
                k_final: self.k_final,
                warmup_steps: self.max_steps / 10,
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(TideError::config("n must be >= 1"));
        }
        if self.baseline_l1.is_none() && (self.k_final == 0 || self.k_final > self.n) {
            return Err(TideError::config(format!(
                "k_final = {} out of range 1..={}",
                self.k_final, self.n
            )));
        }
        let s = self.schedule();
        s.validate()?;
        if self.baseline_l1.is_none() && s.k_start > self.n {
            return Err(TideError::config(format!(
                "k_start {} exceeds n {}",
                s.k_start, self.n
            )));
        }
        if self.revival_interval == 0 {
            return Err(TideError::config("revival_interval must be > 0"));
        }
        if self.batch_tokens == 0 || self.grad_chunk == 0 {
            return Err(TideError::config(
                "batch_tokens and grad_chunk must be >= 1",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TideError::config("learning_rate must be > 0"));
        }
        if let Some(l) = self.baseline_l1 {
            if !(l >= 0.0) {
                return Err(TideError::config("baseline_l1 must be >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(TideError::config("adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}
