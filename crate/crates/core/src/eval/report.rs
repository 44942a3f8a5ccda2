use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dump::{manifest_path, TokenTable};
use crate::error::{Result, TideError};
use crate::linalg::{cosine, dot};
use crate::sae::SaeModel;
use crate::train::load_table;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over tokens of `|a_hat - a|^2 / f`.
    pub mse: f64,
    /// `mse` divided by the mean-square activation.
    pub normalized_mse: f64,
    /// Mean per-token cosine; zero reconstructions count as 0.
    pub cosine: f64,
    pub l0_mean: f64,
    /// Mean `sum(l)` per token (the l1 term without its weight).
    pub l1_mean: f64,
    /// Fraction of latents never active on this split.
    pub dead_fraction: f64,
    pub downstream_loss: Option<f64>,
    pub downstream_baseline: Option<f64>,
    pub split: String,
    pub tokens: usize,
    pub mean_square: f64,
    /// Tokens whose reconstruction was exactly zero (cosine reported as 0).
    pub zero_reconstructions: usize,
    pub k: usize,
}

struct TokenStat {
    err: f64,
    cos: f64,
    zero: bool,
    l0: usize,
    l1: f64,
    active: Vec<u32>,
}

/// Full-token evaluation of a model on an in-memory table. Token statistics
/// are computed independently and summed in token order, so the report does
/// not depend on threading or batching.
pub fn evaluate_table(
    model: &SaeModel,
    table: &TokenTable,
    k: usize,
    split: &str,
    pool: Option<&rayon::ThreadPool>,
) -> Result<EvalReport> {
    if model.f() != table.dim {
        return Err(TideError::config(format!(
            "checkpoint input dim {} does not match dataset dim {}",
            model.f(),
            table.dim
        )));
    }
    if table.is_empty() {
        return Err(TideError::data("cannot evaluate on an empty dataset"));
    }
    let k = model.resolve_k(k)?;
    let f = table.dim as f64;
    let one = |i: usize| -> Result<TokenStat> {
        let a = table.token(i);
        let mut scratch = Vec::new();
        let pairs = model.encode_pairs(a, table.timesteps[i] as usize, k, &mut scratch)?;
        let mut a_hat = vec![0.0f32; table.dim];
        model.params.decode_sparse(&pairs, &mut a_hat);
        let err: f64 = a
            .iter()
            .zip(&a_hat)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            / f;
        let zero = dot(&a_hat, &a_hat) == 0.0;
        Ok(TokenStat {
            err,
            cos: cosine(a, &a_hat) as f64,
            zero,
            l0: pairs.len(),
            l1: pairs.iter().map(|p| p.1 as f64).sum(),
            active: pairs.iter().map(|p| p.0).collect(),
        })
    };
    let idx: Vec<usize> = (0..table.len()).collect();
    let stats: Vec<Result<TokenStat>> = match pool {
        Some(p) => p.install(|| idx.par_iter().map(|&i| one(i)).collect()),
        None => idx.iter().map(|&i| one(i)).collect(),
    };
    let mut seen = vec![false; model.n()];
    let (mut err, mut cos, mut l0, mut l1, mut zeros) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for s in stats {
        let s = s?;
        err += s.err;
        cos += s.cos;
        l0 += s.l0 as f64;
        l1 += s.l1;
        zeros += s.zero as usize;
        for j in s.active {
            seen[j as usize] = true;
        }
    }
    let nt = table.len() as f64;
    let ms = table.mean_square();
    let mse = err / nt;
    Ok(EvalReport {
        mse,
        normalized_mse: if ms > 0.0 { mse / ms } else { mse },
        cosine: cos / nt,
        l0_mean: l0 / nt,
        l1_mean: l1 / nt,
        dead_fraction: seen.iter().filter(|s| !**s).count() as f64 / model.n() as f64,
        downstream_loss: None,
        downstream_baseline: None,
        split: split.to_string(),
        tokens: table.len(),
        mean_square: ms,
        zero_reconstructions: zeros,
        k,
    })
}

/// Evaluate a checkpoint on a dataset (`k = 0` uses the checkpoint's k).
pub fn evaluate(ckpt: &Path, manifest: &Path, k: usize, layer: Option<u16>) -> Result<EvalReport> {
    let model = SaeModel::load(ckpt)?;
    let layer = layer.or_else(|| {
        model
            .meta
            .as_ref()
            .and_then(|m| m.hook.as_ref())
            .map(|h| h.layer_index as u16)
    });
    let mp = manifest_path(manifest);
    let (m, table) = load_table(&mp, layer)?;
    evaluate_table(&model, &table, k, &m.split, None)
}
