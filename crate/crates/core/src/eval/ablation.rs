//! Two-by-two ablation: {plain TopK, temporal} x {all tokens, sampled tokens}.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::evaluate_table;
use super::sweep::median;
use crate::dump::TokenTable;
use crate::error::{Result, TideError};
use crate::train::{smooth, Rate, TrainConfig, Trainer};

/// Moving-average window for the convergence curve.
pub const SMOOTH_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sae,
    Tide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub sampling: bool,
    pub seed: u64,
    pub train_mse: f64,
    pub train_cos: f64,
    pub val_mse: f64,
    pub val_cos: f64,
    /// Last value of the smoothed training MSE curve.
    pub final_smoothed_mse: f64,
    /// Per-seed threshold the curve had to cross.
    pub threshold: f64,
    /// First step whose smoothed MSE is below `threshold`; `steps + 1` if never.
    pub steps_to_threshold: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn cell(&self, variant: Variant, sampling: bool) -> impl Iterator<Item = &AblationRow> {
        self.rows
            .iter()
            .filter(move |r| r.variant == variant && r.sampling == sampling)
    }

    pub fn median_of<F: Fn(&AblationRow) -> f64>(
        &self,
        variant: Variant,
        sampling: bool,
        f: F,
    ) -> Option<f64> {
        median(self.cell(variant, sampling).map(f).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// First index whose value is below `threshold`.
pub fn first_below(curve: &[f64], threshold: f64) -> Option<usize> {
    curve.iter().position(|&v| v < threshold)
}

/// Train every cell for every seed with the base budget. `sampled_rate` is
/// the token-sampling rate of the sampled arm; the other arm keeps every
/// token. The convergence threshold for a seed is twice the lowest final
/// smoothed MSE among that seed's four cells.
pub fn ablation_compare(
    base: &TrainConfig,
    train: &TokenTable,
    val: &TokenTable,
    steps: usize,
    seeds: &[u64],
    sampled_rate: Rate,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(TideError::usage("ablation needs at least one seed"));
    }
    let mut table = AblationTable::default();
    for &seed in seeds {
        let mut cells = Vec::with_capacity(4);
        for variant in [Variant::Sae, Variant::Tide] {
            for sampling in [false, true] {
                let cfg = TrainConfig {
                    seed,
                    temporal: variant == Variant::Tide,
                    token_sample_rate: if sampling { sampled_rate } else { Rate::ONE },
                    baseline_l1: None,
                    ..base.clone()
                };
                let mut tr = Trainer::new(cfg.clone(), train, steps)?;
                tr.run_until(cfg.max_steps)?;
                let model = tr.model();
                let tr_rep = evaluate_table(&model, train, 0, "train", None)?;
                let va_rep = evaluate_table(&model, val, 0, "val", None)?;
                let curve = smooth(
                    &tr.log.history.iter().map(|s| s.mse).collect::<Vec<_>>(),
                    SMOOTH_WINDOW,
                );
                cells.push((variant, sampling, tr_rep, va_rep, curve));
            }
        }
        let best = cells
            .iter()
            .filter_map(|c| c.4.last().copied())
            .fold(f64::INFINITY, f64::min);
        let threshold = 2.0 * best;
        for (variant, sampling, tr_rep, va_rep, curve) in cells {
            table.rows.push(AblationRow {
                variant,
                sampling,
                seed,
                train_mse: tr_rep.mse,
                train_cos: tr_rep.cosine,
                val_mse: va_rep.mse,
                val_cos: va_rep.cosine,
                final_smoothed_mse: curve.last().copied().unwrap_or(f64::NAN),
                threshold,
                steps_to_threshold: first_below(&curve, threshold)
                    .map(|i| i as u64 + 1)
                    .unwrap_or(base.max_steps + 1),
            });
        }
    }
    Ok(table)
}
