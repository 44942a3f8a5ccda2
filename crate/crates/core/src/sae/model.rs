//! A loaded checkpoint plus its metadata, with the inference-time forward.

use std::path::Path;

use super::checkpoint::{CheckpointMeta, SaeCheckpoint};
use super::topk::{topk_pairs, LatentCode};
use super::{sae_input, SaeParams, TemporalModulator};
use crate::error::{check_dim, Result, TideError};
use crate::linalg::all_finite;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub params: SaeParams<f32>,
    pub modulator: Option<TemporalModulator<f32>>,
    pub k_final: usize,
    /// Set for ReLU + l1 checkpoints: every positive latent is kept.
    pub l1: Option<f64>,
    pub meta: Option<CheckpointMeta>,
}

impl SaeModel {
    pub fn from_checkpoint(ck: SaeCheckpoint, meta: Option<CheckpointMeta>) -> Self {
        Self {
            l1: meta.as_ref().and_then(|m| m.baseline_l1),
            k_final: ck.k_final as usize,
            params: ck.params,
            modulator: ck.modulator,
            meta,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = SaeCheckpoint::load(path)?;
        let meta = CheckpointMeta::load_for(path)?;
        Ok(Self::from_checkpoint(ck, meta))
    }

    pub fn f(&self) -> usize {
        self.params.f
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    /// `k = 0` selects the checkpoint's `k_final`.
    pub fn resolve_k(&self, k: usize) -> Result<usize> {
        let k = if k == 0 { self.k_final } else { k };
        if self.l1.is_none() && (k == 0 || k > self.n()) {
            return Err(TideError::config(format!(
                "k = {k} out of range 1..={}",
                self.n()
            )));
        }
        Ok(k)
    }

    /// Sparse code of one token; `scratch` is reused across calls.
    pub fn encode_pairs(
        &self,
        a: &[f32],
        t: usize,
        k: usize,
        scratch: &mut Vec<(u32, f32)>,
    ) -> Result<Vec<(u32, f32)>> {
        check_dim("SAE input", self.f(), a.len())?;
        if !all_finite(a) {
            return Err(TideError::data("non-finite SAE input"));
        }
        let x = sae_input(self.modulator.as_ref(), a, t)?;
        let mut pre = vec![0.0f32; self.n()];
        self.params.pre_activations(&x, &mut pre);
        Ok(match self.l1 {
            Some(_) => pre
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 0.0)
                .map(|(j, v)| (j as u32, *v))
                .collect(),
            None => topk_pairs(&pre, k, scratch),
        })
    }

    pub fn encode(&self, a: &[f32], t: usize, k: usize) -> Result<LatentCode<f32>> {
        let pairs = self.encode_pairs(a, t, k, &mut Vec::new())?;
        let mut z = vec![0.0f32; self.n()];
        for &(j, v) in &pairs {
            z[j as usize] = v;
        }
        Ok(LatentCode {
            z,
            active_indices: pairs.iter().map(|p| p.0).collect(),
            k_used: pairs.len(),
        })
    }

    /// `(code, a_hat)` for one token.
    pub fn forward(&self, a: &[f32], t: usize, k: usize) -> Result<(LatentCode<f32>, Vec<f32>)> {
        let code = self.encode(a, t, k)?;
        let mut out = vec![0.0f32; self.f()];
        self.params.decode_sparse(&code.pairs(), &mut out);
        Ok((code, out))
    }

    pub fn reconstruct(&self, a: &[f32], t: usize, k: usize) -> Result<Vec<f32>> {
        let pairs = self.encode_pairs(a, t, k, &mut Vec::new())?;
        let mut out = vec![0.0f32; self.f()];
        self.params.decode_sparse(&pairs, &mut out);
        Ok(out)
    }
}
