//! Hand-derived forward/backward pass.
//!
//! Per token, with `x = a * (1 + s(t)) + h(t)` and `d = a_hat - a`:
//!
//! ```text
//! L_tok      = |d|^2 / f              (+ lambda * sum(l) for the l1 baseline)
//! dL/da_hat  = 2 d / (f N)
//! dW_dec[:,j] += g z_j                 for active j only
//! dpre_j      = W_dec[:,j] . g         (+ lambda / N)
//! dW_enc[j,:] += dpre_j x,  db_j += dpre_j
//! dx          = sum_j dpre_j W_enc[j,:]
//! ds = dx * a,  dh = dx                then through the modulator MLP
//! ```
//!
//! Pruned and non-positive latents receive exactly zero gradient. The batch
//! is split into fixed-size token chunks whose partial gradients are summed in
//! chunk order, so the result does not depend on how many threads ran them.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{check_dim, Result, TideError};
use crate::linalg::{axpy, dot, matvec_t, silu_grad, Real};
use crate::sae::{apply_modulation, topk_pairs, ModulatorEval, SaeParams, TemporalModulator};

/// How latents are selected in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsityMode {
    TopK(usize),
    /// ReLU code with an l1 penalty of this weight.
    L1(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulatorGrads<T: Real> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Real> ModulatorGrads<T> {
    pub fn zeros_like(m: &TemporalModulator<T>) -> Self {
        Self {
            w1: vec![T::zero(); m.w1.len()],
            b1: vec![T::zero(); m.b1.len()],
            w2: vec![T::zero(); m.w2.len()],
            b2: vec![T::zero(); m.b2.len()],
        }
    }
}

/// Gradients in the same layouts as [`SaeParams`] and [`TemporalModulator`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T: Real> {
    pub w_enc: Vec<T>,
    pub b_enc: Vec<T>,
    pub w_dec: Vec<T>,
    pub modulator: Option<ModulatorGrads<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(p: &SaeParams<T>, m: Option<&TemporalModulator<T>>) -> Self {
        Self {
            w_enc: vec![T::zero(); p.w_enc.len()],
            b_enc: vec![T::zero(); p.b_enc.len()],
            w_dec: vec![T::zero(); p.w_dec.len()],
            modulator: m.map(ModulatorGrads::zeros_like),
        }
    }
}

/// Forward statistics of one batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchStats {
    /// Mean objective (reconstruction plus any l1 term).
    pub loss: f64,
    /// Mean of `|a_hat - a|^2 / f`.
    pub mse: f64,
    /// Mean per-token cosine; zero reconstructions count as 0.
    pub cos: f64,
    pub l0: f64,
    /// Sorted, de-duplicated latents active on at least one token.
    pub active: Vec<u32>,
    /// Per-token `|a_hat - a|^2 / f`, in batch order.
    pub token_err: Vec<f64>,
}

/// Partial result for one chunk; rows are stored compactly.
struct Chunk<T: Real> {
    rows: Vec<u32>,
    enc: Vec<T>,
    dec: Vec<T>,
    b: Vec<T>,
    /// Per-timestep `d[scale; shift]`, only with a modulator.
    dmod: BTreeMap<u32, Vec<T>>,
    loss: f64,
    mse: f64,
    cos: f64,
    l0: f64,
    token_err: Vec<f64>,
}

fn run_chunk<T: Real>(
    p: &SaeParams<T>,
    evals: Option<&BTreeMap<u32, ModulatorEval<T>>>,
    data: &[T],
    ts: &[u32],
    mode: SparsityMode,
    inv_n: T,
) -> Chunk<T> {
    let f = p.f;
    let mut slot = vec![u32::MAX; p.n];
    let mut c = Chunk {
        rows: Vec::new(),
        enc: Vec::new(),
        dec: Vec::new(),
        b: Vec::new(),
        dmod: BTreeMap::new(),
        loss: 0.0,
        mse: 0.0,
        cos: 0.0,
        l0: 0.0,
        token_err: Vec::with_capacity(ts.len()),
    };
    let mut x = vec![T::zero(); f];
    let mut pre = vec![T::zero(); p.n];
    let mut a_hat = vec![T::zero(); f];
    let mut g = vec![T::zero(); f];
    let mut dx = vec![T::zero(); f];
    let mut scratch = Vec::new();
    let two_over_f = T::from_f64_lossy(2.0) / T::from_usize(f).unwrap();
    let f_t = T::from_usize(f).unwrap();

    for (ti, &t) in ts.iter().enumerate() {
        let a = &data[ti * f..(ti + 1) * f];
        match evals {
            Some(ev) => {
                let e = &ev[&t];
                apply_modulation(a, e.scale(), e.shift(), &mut x);
            }
            None => x.copy_from_slice(a),
        }
        p.pre_activations(&x, &mut pre);
        let active: Vec<(u32, T)> = match mode {
            SparsityMode::TopK(k) => topk_pairs(&pre, k, &mut scratch),
            SparsityMode::L1(_) => pre
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > T::zero())
                .map(|(j, v)| (j as u32, *v))
                .collect(),
        };
        p.decode_sparse(&active, &mut a_hat);

        let mut sq = T::zero();
        for i in 0..f {
            let d = a_hat[i] - a[i];
            sq += d * d;
            g[i] = two_over_f * d * inv_n;
        }
        let err = (sq / f_t).to_f64_lossy();
        c.token_err.push(err);
        c.mse += err;
        let l1_term = match mode {
            SparsityMode::L1(lambda) => {
                lambda * active.iter().map(|(_, v)| v.to_f64_lossy()).sum::<f64>()
            }
            SparsityMode::TopK(_) => 0.0,
        };
        c.loss += err + l1_term;
        c.l0 += active.len() as f64;
        let (na, nh) = (dot(a, a), dot(&a_hat, &a_hat));
        if na > T::zero() && nh > T::zero() {
            let cs = (dot(a, &a_hat) / (na.sqrt() * nh.sqrt())).to_f64_lossy();
            c.cos += cs.clamp(-1.0, 1.0);
        }

        let l1_grad = match mode {
            SparsityMode::L1(lambda) => T::from_f64_lossy(lambda) * inv_n,
            SparsityMode::TopK(_) => T::zero(),
        };
        dx.iter_mut().for_each(|v| *v = T::zero());
        for &(j, zj) in &active {
            let ju = j as usize;
            let s = if slot[ju] == u32::MAX {
                slot[ju] = c.rows.len() as u32;
                c.rows.push(j);
                c.enc.extend(std::iter::repeat(T::zero()).take(f));
                c.dec.extend(std::iter::repeat(T::zero()).take(f));
                c.b.push(T::zero());
                c.rows.len() - 1
            } else {
                slot[ju] as usize
            };
            axpy(zj, &g, &mut c.dec[s * f..(s + 1) * f]);
            let dpre = dot(p.dec_col(ju), &g) + l1_grad;
            axpy(dpre, &x, &mut c.enc[s * f..(s + 1) * f]);
            c.b[s] += dpre;
            if evals.is_some() {
                axpy(dpre, p.enc_row(ju), &mut dx);
            }
        }
        if evals.is_some() {
            let dm = c.dmod.entry(t).or_insert_with(|| vec![T::zero(); 2 * f]);
            for i in 0..f {
                dm[i] += dx[i] * a[i];
                dm[f + i] += dx[i];
            }
        }
    }
    c
}

/// Loss and gradients over a batch of `timesteps.len()` tokens stored
/// row-major in `data`. `chunk` fixes the reduction granularity; `pool`
/// runs chunks in parallel without changing the result.
pub fn forward_backward<T: Real>(
    p: &SaeParams<T>,
    m: Option<&TemporalModulator<T>>,
    data: &[T],
    timesteps: &[u32],
    mode: SparsityMode,
    chunk: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(Grads<T>, BatchStats)> {
    let n_tok = timesteps.len();
    if n_tok == 0 {
        return Err(TideError::usage(
            "forward_backward needs at least one token",
        ));
    }
    check_dim("token batch", n_tok * p.f, data.len())?;
    if let SparsityMode::TopK(k) = mode {
        if k == 0 || k > p.n {
            return Err(TideError::config(format!(
                "k = {k} out of range 1..={}",
                p.n
            )));
        }
    }
    let m = m.filter(|m| m.enabled);
    let evals = match m {
        Some(m) => {
            check_dim("modulator width", p.f, m.f)?;
            let mut ev = BTreeMap::new();
            for &t in timesteps {
                if let std::collections::btree_map::Entry::Vacant(e) = ev.entry(t) {
                    e.insert(m.eval(t as usize)?);
                }
            }
            Some(ev)
        }
        None => None,
    };

    let inv_n = T::one() / T::from_usize(n_tok).unwrap();
    let f = p.f;
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..n_tok).step_by(chunk).collect();
    let job = |&s: &usize| {
        let e = (s + chunk).min(n_tok);
        run_chunk(
            p,
            evals.as_ref(),
            &data[s * f..e * f],
            &timesteps[s..e],
            mode,
            inv_n,
        )
    };
    let chunks: Vec<Chunk<T>> = match pool {
        Some(pool) if starts.len() > 1 => pool.install(|| starts.par_iter().map(job).collect()),
        _ => starts.iter().map(job).collect(),
    };

    let mut grads = Grads::zeros_like(p, m);
    let mut stats = BatchStats::default();
    let mut seen = vec![false; p.n];
    let mut dmod: BTreeMap<u32, Vec<T>> = BTreeMap::new();
    for c in chunks {
        for (s, &j) in c.rows.iter().enumerate() {
            let ju = j as usize;
            seen[ju] = true;
            let src = s * f..(s + 1) * f;
            for (d, v) in grads.w_enc[ju * f..(ju + 1) * f]
                .iter_mut()
                .zip(&c.enc[src.clone()])
            {
                *d += *v;
            }
            for (d, v) in grads.w_dec[ju * f..(ju + 1) * f]
                .iter_mut()
                .zip(&c.dec[src])
            {
                *d += *v;
            }
            grads.b_enc[ju] += c.b[s];
        }
        for (t, v) in c.dmod {
            let acc = dmod.entry(t).or_insert_with(|| vec![T::zero(); 2 * f]);
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += *b);
        }
        stats.loss += c.loss;
        stats.mse += c.mse;
        stats.cos += c.cos;
        stats.l0 += c.l0;
        stats.token_err.extend(c.token_err);
    }
    let nf = n_tok as f64;
    stats.loss /= nf;
    stats.mse /= nf;
    stats.cos /= nf;
    stats.l0 /= nf;
    stats.active = (0..p.n as u32).filter(|&j| seen[j as usize]).collect();
    if !stats.loss.is_finite() {
        return Err(TideError::Numeric(format!(
            "non-finite loss {} over {n_tok} tokens",
            stats.loss
        )));
    }

    if let (Some(m), Some(ev), Some(mg)) = (m, evals.as_ref(), grads.modulator.as_mut()) {
        let h = m.hidden_dim;
        let mut dhidden = vec![T::zero(); h];
        for (t, dout) in &dmod {
            let e = &ev[t];
            for (r, &d) in dout.iter().enumerate() {
                axpy(d, &e.hidden, &mut mg.w2[r * h..(r + 1) * h]);
                mg.b2[r] += d;
            }
            matvec_t(&m.w2, dout, &mut dhidden);
            for q in 0..h {
                let dp = dhidden[q] * silu_grad(e.hidden_pre[q]);
                axpy(
                    dp,
                    &e.embed,
                    &mut mg.w1[q * m.embed_dim..(q + 1) * m.embed_dim],
                );
                mg.b1[q] += dp;
            }
        }
    }
    Ok((grads, stats))
}
