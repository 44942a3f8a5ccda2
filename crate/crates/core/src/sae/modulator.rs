//! Timestep-conditioned scale/shift applied to the SAE input:
//! `x_mod = x * (1 + scale(t)) + shift(t)`, where `(scale, shift)` is a
//! two-layer SiLU MLP of the sinusoidal timestep embedding.

use crate::activation_gen::timestep_embedding;
use crate::error::{check_dim, Result, TideError};
use crate::linalg::{matvec, silu, Real};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalModulator<T: Real> {
    pub f: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Diffusion step count `T`; embeddings are only defined for `t < T`.
    pub steps: usize,
    /// `hidden x embed`
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `2f x hidden`; rows `0..f` produce scale, rows `f..2f` shift.
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub enabled: bool,
}

/// Intermediate values of one modulator evaluation, kept for backprop.
#[derive(Debug, Clone)]
pub struct ModulatorEval<T: Real> {
    pub embed: Vec<T>,
    pub hidden_pre: Vec<T>,
    pub hidden: Vec<T>,
    /// `[scale; shift]`, length `2f`.
    pub out: Vec<T>,
}

impl<T: Real> ModulatorEval<T> {
    pub fn scale(&self) -> &[T] {
        &self.out[..self.out.len() / 2]
    }
    pub fn shift(&self) -> &[T] {
        &self.out[self.out.len() / 2..]
    }
}

impl<T: Real> TemporalModulator<T> {
    /// First layer random (`1/sqrt(fan_in)`), last layer zero: identity at init.
    pub fn new(
        f: usize,
        embed_dim: usize,
        hidden_dim: usize,
        steps: usize,
        seed: u64,
    ) -> Result<Self> {
        if embed_dim == 0 || embed_dim % 2 != 0 || hidden_dim == 0 || f == 0 || steps == 0 {
            return Err(TideError::config(format!(
                "temporal modulator dims invalid: f={f}, embed={embed_dim}, hidden={hidden_dim}, T={steps}"
            )));
        }
        let mut r = rng::substream(seed, "modulator");
        let w1 = rng::normal_vec_f64(
            &mut r,
            hidden_dim * embed_dim,
            1.0 / (embed_dim as f64).sqrt(),
        )
        .into_iter()
        .map(T::from_f64_lossy)
        .collect();
        Ok(Self {
            f,
            embed_dim,
            hidden_dim,
            steps,
            w1,
            b1: vec![T::zero(); hidden_dim],
            w2: vec![T::zero(); 2 * f * hidden_dim],
            b2: vec![T::zero(); 2 * f],
            enabled: true,
        })
    }

    /// Fully random modulator (both layers), used by gradient checks.
    pub fn random(
        f: usize,
        embed_dim: usize,
        hidden_dim: usize,
        steps: usize,
        seed: u64,
        out_scale: f64,
    ) -> Result<Self> {
        let mut m = Self::new(f, embed_dim, hidden_dim, steps, seed)?;
        let mut r = rng::substream(seed, "modulator-out");
        let g = out_scale / (hidden_dim as f64).sqrt();
        m.w2 = rng::normal_vec_f64(&mut r, 2 * f * hidden_dim, g)
            .into_iter()
            .map(T::from_f64_lossy)
            .collect();
        m.b1 = rng::normal_vec_f64(&mut r, hidden_dim, 0.1)
            .into_iter()
            .map(T::from_f64_lossy)
            .collect();
        m.b2 = rng::normal_vec_f64(&mut r, 2 * f, 0.1 * out_scale)
            .into_iter()
            .map(T::from_f64_lossy)
            .collect();
        Ok(m)
    }

    pub fn check_shapes(&self) -> Result<()> {
        check_dim(
            "modulator W1",
            self.hidden_dim * self.embed_dim,
            self.w1.len(),
        )?;
        check_dim("modulator b1", self.hidden_dim, self.b1.len())?;
        check_dim("modulator W2", 2 * self.f * self.hidden_dim, self.w2.len())?;
        check_dim("modulator b2", 2 * self.f, self.b2.len())
    }

    pub fn eval(&self, t: usize) -> Result<ModulatorEval<T>> {
        let embed: Vec<T> = timestep_embedding(t, self.embed_dim, self.steps)?;
        let mut hidden_pre = vec![T::zero(); self.hidden_dim];
        matvec(&self.w1, Some(&self.b1), &embed, &mut hidden_pre);
        let hidden: Vec<T> = hidden_pre.iter().map(|&v| silu(v)).collect();
        let mut out = vec![T::zero(); 2 * self.f];
        matvec(&self.w2, Some(&self.b2), &hidden, &mut out);
        Ok(ModulatorEval {
            embed,
            hidden_pre,
            hidden,
            out,
        })
    }

    pub fn scale_shift(&self, t: usize) -> Result<(Vec<T>, Vec<T>)> {
        let e = self.eval(t)?;
        Ok((e.scale().to_vec(), e.shift().to_vec()))
    }

    pub fn cast<U: Real>(&self) -> TemporalModulator<U> {
        let c = |v: &[T]| {
            v.iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect()
        };
        TemporalModulator {
            f: self.f,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            steps: self.steps,
            w1: c(&self.w1),
            b1: c(&self.b1),
            w2: c(&self.w2),
            b2: c(&self.b2),
            enabled: self.enabled,
        }
    }
}

/// Apply an evaluated modulation to one vector.
#[inline]
pub fn apply_modulation<T: Real>(x: &[T], scale: &[T], shift: &[T], out: &mut [T]) {
    for i in 0..x.len() {
        out[i] = x[i] * (T::one() + scale[i]) + shift[i];
    }
}

/// `x * (1 + scale(t)) + shift(t)`.
pub fn modulate<T: Real>(
    m: &TemporalModulator<T>,
    x: &[T],
    t: usize,
    steps: usize,
) -> Result<Vec<T>> {
    if !m.enabled {
        return Err(TideError::usage(
            "modulate called on a disabled temporal modulator",
        ));
    }
    if steps != m.steps {
        return Err(TideError::config(format!(
            "modulator built for T = {}, called with T = {steps}",
            m.steps
        )));
    }
    check_dim("modulator input", m.f, x.len())?;
    let e = m.eval(t)?;
    let mut out = vec![T::zero(); x.len()];
    apply_modulation(x, e.scale(), e.shift(), &mut out);
    Ok(out)
}
