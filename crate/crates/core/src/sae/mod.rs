//! TopK sparse autoencoder with optional timestep modulation of its input.
//!
//! ```text
//! x     = modulate(a, t)              (identity when no modulator)
//! l     = ReLU(W_enc x + b_enc)
//! z     = TopK(l)
//! a_hat = W_dec z
//! ```
//!
//! The reconstruction target is always the raw activation `a`.

pub(crate) mod checkpoint;
mod model;
mod modulator;
mod params;
mod topk;

pub use checkpoint::{
    load_adaln_table, save_adaln_table, CheckpointMeta, SaeCheckpoint, ADALN_MAGIC, CKPT_MAGIC,
};
pub use model::SaeModel;
pub use modulator::{apply_modulation, modulate, ModulatorEval, TemporalModulator};
pub use params::SaeParams;
pub use topk::{topk, topk_pairs, LatentCode};

use crate::error::{check_dim, Result, TideError};
use crate::linalg::{all_finite, Real};

/// `ReLU(W_enc a + b_enc)`.
pub fn encode<T: Real>(p: &SaeParams<T>, a: &[T]) -> Result<Vec<T>> {
    check_dim("SAE input", p.f, a.len())?;
    if !all_finite(a) {
        return Err(TideError::data("non-finite SAE input"));
    }
    let mut l = vec![T::zero(); p.n];
    p.pre_activations(a, &mut l);
    l.iter_mut().for_each(|v| *v = v.max(T::zero()));
    Ok(l)
}

/// `W_dec z`, accumulated over the active indices only.
pub fn decode<T: Real>(p: &SaeParams<T>, z: &LatentCode<T>) -> Result<Vec<T>> {
    check_dim("latent code", p.n, z.n())?;
    let mut out = vec![T::zero(); p.f];
    p.decode_sparse(&z.pairs(), &mut out);
    Ok(out)
}

/// Decode a dense code that may have any support (used after edits).
pub fn decode_dense<T: Real>(p: &SaeParams<T>, z: &[T]) -> Result<Vec<T>> {
    check_dim("latent code", p.n, z.len())?;
    let pairs: Vec<(u32, T)> = z
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != T::zero())
        .map(|(j, v)| (j as u32, *v))
        .collect();
    let mut out = vec![T::zero(); p.f];
    p.decode_sparse(&pairs, &mut out);
    Ok(out)
}

/// Modulated encoder input (identity when the modulator is absent or disabled).
pub fn sae_input<T: Real>(m: Option<&TemporalModulator<T>>, a: &[T], t: usize) -> Result<Vec<T>> {
    match m {
        Some(m) if m.enabled => modulate(m, a, t, m.steps),
        _ => Ok(a.to_vec()),
    }
}

/// Full TIDE forward for one token.
pub fn tide_forward<T: Real>(
    p: &SaeParams<T>,
    m: Option<&TemporalModulator<T>>,
    a: &[T],
    t: usize,
    k: usize,
) -> Result<(LatentCode<T>, Vec<T>)> {
    let x = sae_input(m, a, t)?;
    let l = encode(p, &x)?;
    let code = topk(&l, k)?;
    let a_hat = decode(p, &code)?;
    Ok((code, a_hat))
}

/// ReLU baseline without TopK: returns `(l, W_dec l)`.
pub fn relu_l1_forward<T: Real>(p: &SaeParams<T>, a: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let l = encode(p, a)?;
    let a_hat = decode_dense(p, &l)?;
    Ok((l, a_hat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn random_params(f: usize, n: usize, seed: u64) -> SaeParams<f64> {
        let mut r = rng::substream(seed, "sae-test");
        SaeParams {
            f,
            n,
            w_enc: rng::normal_vec_f64(&mut r, n * f, 1.0),
            b_enc: rng::normal_vec_f64(&mut r, n, 0.3),
            w_dec: rng::normal_vec_f64(&mut r, n * f, 1.0),
        }
    }

    /// Naive triple-loop style oracle on the mathematical layouts.
    fn oracle_encode(p: &SaeParams<f64>, a: &[f64]) -> Vec<f64> {
        (0..p.n)
            .map(|j| {
                let mut s = p.b_enc[j];
                for i in 0..p.f {
                    s += p.w_enc[j * p.f + i] * a[i];
                }
                s.max(0.0)
            })
            .collect()
    }

    fn oracle_dense_decode(p: &SaeParams<f64>, z: &[f64]) -> Vec<f64> {
        (0..p.f)
            .map(|i| (0..p.n).map(|j| p.dec_at(i, j) * z[j]).sum())
            .collect()
    }

    #[test]
    fn encode_trivial_cases() {
        let p = SaeParams::<f64>::zeros(2, 3);
        assert_eq!(encode(&p, &[0.0, 0.0]).unwrap(), vec![0.0; 3]);
        let mut id = SaeParams::<f64>::zeros(2, 2);
        id.w_enc = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(encode(&id, &[1.0, -1.0]).unwrap(), vec![1.0, 0.0]);
        assert!(encode(&id, &[f64::NAN, 0.0]).is_err());
        assert!(encode(&id, &[1.0]).is_err());
    }

    #[test]
    fn encode_matches_oracle() {
        let p = random_params(8, 16, 1);
        let mut r = rng::substream(2, "x");
        for _ in 0..20 {
            let a = rng::normal_vec_f64(&mut r, 8, 1.0);
            let got = encode(&p, &a).unwrap();
            let want = oracle_encode(&p, &a);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decode_cases() {
        let p = random_params(5, 7, 3);
        let zero = LatentCode::from_dense(vec![0.0; 7]);
        assert_eq!(decode(&p, &zero).unwrap(), vec![0.0; 5]);
        let mut e = vec![0.0; 7];
        e[4] = 1.0;
        let col: Vec<f64> = (0..5).map(|i| p.dec_at(i, 4)).collect();
        assert_eq!(decode(&p, &LatentCode::from_dense(e)).unwrap(), col);
        let mut r = rng::substream(4, "z");
        for _ in 0..50 {
            let l = encode(&p, &rng::normal_vec_f64(&mut r, 5, 1.0)).unwrap();
            let code = topk(&l, 3).unwrap();
            let sparse = decode(&p, &code).unwrap();
            let dense = oracle_dense_decode(&p, &code.z);
            for (s, d) in sparse.iter().zip(&dense) {
                assert!((s - d).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tide_without_modulator_equals_plain_sae() {
        let p = random_params(6, 12, 5).cast::<f32>();
        let m = TemporalModulator::<f32>::new(6, 8, 8, 100, 1).unwrap();
        let mut r = rng::substream(6, "a");
        for t in [0usize, 37, 99] {
            let a = rng::normal_vec(&mut r, 6, 1.0);
            let plain = tide_forward(&p, None, &a, t, 3).unwrap();
            let zero_init = tide_forward(&p, Some(&m), &a, t, 3).unwrap();
            assert_eq!(plain, zero_init);
        }
    }

    #[test]
    fn hand_worked_f4_n8_k2() {
        // Encoder rows: e_0..e_3, -e_0..-e_3. Decoder = encoder transposed
        // scaled by 2. a = (3, -1, 0.5, 2): pre-acts = (3,-1,0.5,2,-3,1,-0.5,-2),
        // top-2 = latent 0 (3) and latent 3 (2); a_hat = 2*(3 e_0 + 2 e_3).
        let mut p = SaeParams::<f64>::zeros(4, 8);
        for i in 0..4 {
            p.w_enc[i * 4 + i] = 1.0;
            p.w_enc[(i + 4) * 4 + i] = -1.0;
            p.w_dec[i * 4 + i] = 2.0;
            p.w_dec[(i + 4) * 4 + i] = -2.0;
        }
        let (code, a_hat) = tide_forward(&p, None, &[3.0, -1.0, 0.5, 2.0], 0, 2).unwrap();
        assert_eq!(code.active_indices, vec![0, 3]);
        assert_eq!(a_hat, vec![6.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn relu_path_equals_topk_with_k_n() {
        let p = random_params(8, 16, 7);
        let mut r = rng::substream(8, "a");
        assert_eq!(relu_l1_forward(&p, &[0.0; 8]).unwrap().1.len(), 8);
        let zero_b = SaeParams {
            b_enc: vec![0.0; 16],
            ..p.clone()
        };
        assert_eq!(relu_l1_forward(&zero_b, &[0.0; 8]).unwrap().1, vec![0.0; 8]);
        for _ in 0..20 {
            let a = rng::normal_vec_f64(&mut r, 8, 1.0);
            let (l, relu_hat) = relu_l1_forward(&p, &a).unwrap();
            let (_, topk_hat) = tide_forward(&p, None, &a, 0, 16).unwrap();
            assert_eq!(relu_hat, topk_hat);
            let oracle = oracle_dense_decode(&p, &oracle_encode(&p, &a));
            for (x, y) in l.iter().zip(&oracle_encode(&p, &a)) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in relu_hat.iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let p = random_params(5, 9, 11);
        let perm: Vec<usize> = vec![3, 0, 8, 1, 7, 2, 6, 4, 5];
        let mut q = p.clone();
        for (new, &old) in perm.iter().enumerate() {
            q.w_enc[new * 5..(new + 1) * 5].copy_from_slice(p.enc_row(old));
            q.b_enc[new] = p.b_enc[old];
            q.dec_col_mut(new).copy_from_slice(p.dec_col(old));
        }
        let mut r = rng::substream(12, "a");
        for _ in 0..50 {
            let a = rng::normal_vec_f64(&mut r, 5, 1.0);
            let (_, x) = tide_forward(&p, None, &a, 0, 3).unwrap();
            let (_, y) = tide_forward(&q, None, &a, 0, 3).unwrap();
            for (u, v) in x.iter().zip(&y) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn decode_is_scale_covariant(c in 0.0f64..10.0, seed in 0u64..1000) {
            let p = random_params(4, 6, seed);
            let l = encode(&p, &[0.3, -0.2, 1.0, 0.5]).unwrap();
            let code = topk(&l, 3).unwrap();
            let base = decode(&p, &code).unwrap();
            let scaled = decode_dense(&p, &code.z.iter().map(|v| v * c).collect::<Vec<_>>()).unwrap();
            for (b, s) in base.iter().zip(&scaled) {
                prop_assert!((b * c - s).abs() < 1e-9 * (1.0 + s.abs()));
            }
        }
    }
}
