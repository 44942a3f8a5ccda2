//! Adam with bias correction, followed by decoder-column renormalization.

use crate::error::{check_dim, Result};
use crate::linalg::Real;
use crate::sae::{SaeParams, TemporalModulator};

use super::grad::Grads;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decoder_norm: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decoder_norm: true,
        }
    }
}

/// First and second moments for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Real> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    /// Zero the moments of `range` (used after reviving a latent).
    pub fn reset(&mut self, range: std::ops::Range<usize>) {
        self.m[range.clone()]
            .iter_mut()
            .for_each(|x| *x = T::zero());
        self.v[range].iter_mut().for_each(|x| *x = T::zero());
    }
}

/// Optimizer state mirroring every trainable tensor. Tensor order:
/// `W_enc, b_enc, W_dec` then, with a modulator, `W1, b1, W2, b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Real> {
    pub step: u64,
    pub tensors: Vec<Moments<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(p: &SaeParams<T>, m: Option<&TemporalModulator<T>>) -> Self {
        let mut tensors = vec![
            Moments::zeros(p.w_enc.len()),
            Moments::zeros(p.b_enc.len()),
            Moments::zeros(p.w_dec.len()),
        ];
        if let Some(m) = m {
            for len in [m.w1.len(), m.b1.len(), m.w2.len(), m.b2.len()] {
                tensors.push(Moments::zeros(len));
            }
        }
        Self { step: 0, tensors }
    }
}

fn adam_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    mom: &mut Moments<T>,
    cfg: &AdamConfig,
    bc1: f64,
    bc2: f64,
) {
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let step = T::from_f64_lossy(cfg.lr / bc1);
    let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
    let eps = T::from_f64_lossy(cfg.epsilon);
    for i in 0..param.len() {
        let g = grad[i];
        let m = b1 * mom.m[i] + one_b1 * g;
        let v = b2 * mom.v[i] + one_b2 * g * g;
        mom.m[i] = m;
        mom.v[i] = v;
        param[i] -= step * m / ((v * inv_bc2).sqrt() + eps);
    }
}

/// One Adam step over all tensors; renormalizes decoder columns afterwards
/// when `cfg.decoder_norm` is set.
pub fn optimizer_step<T: Real>(
    p: &mut SaeParams<T>,
    m: Option<&mut TemporalModulator<T>>,
    opt: &mut OptimState<T>,
    grads: &Grads<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    check_dim("W_enc grad", p.w_enc.len(), grads.w_enc.len())?;
    check_dim("b_enc grad", p.b_enc.len(), grads.b_enc.len())?;
    check_dim("W_dec grad", p.w_dec.len(), grads.w_dec.len())?;
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    adam_update(
        &mut p.w_enc,
        &grads.w_enc,
        &mut opt.tensors[0],
        cfg,
        bc1,
        bc2,
    );
    adam_update(
        &mut p.b_enc,
        &grads.b_enc,
        &mut opt.tensors[1],
        cfg,
        bc1,
        bc2,
    );
    adam_update(
        &mut p.w_dec,
        &grads.w_dec,
        &mut opt.tensors[2],
        cfg,
        bc1,
        bc2,
    );
    if let (Some(m), Some(g)) = (m, grads.modulator.as_ref()) {
        check_dim("optimizer tensors", 7, opt.tensors.len())?;
        adam_update(&mut m.w1, &g.w1, &mut opt.tensors[3], cfg, bc1, bc2);
        adam_update(&mut m.b1, &g.b1, &mut opt.tensors[4], cfg, bc1, bc2);
        adam_update(&mut m.w2, &g.w2, &mut opt.tensors[5], cfg, bc1, bc2);
        adam_update(&mut m.b2, &g.b2, &mut opt.tensors[6], cfg, bc1, bc2);
    }
    if cfg.decoder_norm {
        p.normalize_decoder();
    }
    Ok(())
}
