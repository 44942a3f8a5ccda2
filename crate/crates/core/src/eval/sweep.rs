//! Scaling sweep over latent size and k, with a resumable CSV.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::downstream::{downstream_loss_on, Substitution};
use super::report::evaluate_table;
use crate::activation_gen::{HookSpec, PreparedSample, ToyDiTParams};
use crate::dump::TokenTable;
use crate::error::{Result, TideError};
use crate::train::{TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    /// Latent sizes as multiples of the input dim.
    pub latent_multipliers: Vec<usize>,
    pub k_values: Vec<usize>,
    /// Seeds per cell: `base_seed + 0 .. base_seed + repeats`.
    pub repeats: usize,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.latent_multipliers.is_empty() || self.k_values.is_empty() || self.repeats == 0 {
            return Err(TideError::config(
                "sweep grid needs multipliers, k values and repeats >= 1",
            ));
        }
        if self.latent_multipliers.contains(&0) || self.k_values.contains(&0) {
            return Err(TideError::config("sweep grid entries must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub final_mse: f64,
    pub final_cos: f64,
    pub downstream_ratio: Option<f64>,
    pub steps: u64,
    pub wall_ms: u64,
}

impl SweepRow {
    pub fn key(&self) -> (usize, usize, u64) {
        (self.n, self.k, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    /// Rows produced by this call, in completion order.
    pub rows: Vec<SweepRow>,
    /// Cells already present in the CSV and skipped.
    pub skipped: usize,
    pub failures: Vec<((usize, usize, u64), String)>,
}

/// Model and held-out samples for the optional downstream column.
pub struct DownstreamCtx<'a> {
    pub dit: &'a ToyDiTParams,
    pub samples: &'a [PreparedSample],
    pub hook: HookSpec,
}

/// Median of the values; `None` when empty.
pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Read completed rows from an existing sweep CSV (failed rows excluded).
pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for r in rdr.deserialize() {
        let row: SweepRow = r?;
        if row.final_mse.is_finite() {
            out.push(row);
        }
    }
    Ok(out)
}

struct Appender {
    writer: csv::Writer<std::fs::File>,
}

impl Appender {
    fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path)
            .map(|m| m.len() == 0)
            .unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| TideError::io_at(path, e))?;
        let writer = csv::WriterBuilder::new()
            .has_headers(fresh)
            .from_writer(file);
        Ok(Self { writer })
    }

    fn push(&mut self, row: &SweepRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Train and score one cell.
pub fn run_cell(
    base: &TrainConfig,
    table: &TokenTable,
    steps: usize,
    n: usize,
    k: usize,
    seed: u64,
    ctx: Option<&DownstreamCtx<'_>>,
) -> Result<SweepRow> {
    let started = Instant::now();
    let cfg = TrainConfig {
        n,
        k_final: k,
        seed,
        workers: 1,
        sparsity_schedule: None,
        ..base.clone()
    };
    let mut tr = Trainer::new(cfg.clone(), table, steps)?;
    tr.run_until(cfg.max_steps)?;
    let model = tr.model();
    let rep = evaluate_table(&model, table, k, "train", None)?;
    let downstream_ratio = match ctx {
        Some(c) => Some(
            downstream_loss_on(
                c.dit,
                c.samples,
                &c.hook,
                Substitution::Model(&model, k),
                None,
            )?
            .ratio(),
        ),
        None => None,
    };
    Ok(SweepRow {
        n,
        k,
        seed,
        final_mse: rep.mse,
        final_cos: rep.cosine,
        downstream_ratio,
        steps: cfg.max_steps,
        // zero unless requested, so reruns produce identical files
        wall_ms: if cfg.log_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
    })
}

/// Train one model per `(multiplier, k, seed)` cell with the base budget and
/// append a row per cell to `out_csv`. Cells already in the file are skipped;
/// failing cells are recorded with NaN metrics and the sweep continues.
/// Cells run concurrently on `base.workers` threads.
pub fn run_sweep(
    grid: &SweepGrid,
    base: &TrainConfig,
    table: &TokenTable,
    steps: usize,
    out_csv: &Path,
    ctx: Option<&DownstreamCtx<'_>>,
) -> Result<SweepResult> {
    grid.validate()?;
    let done: BTreeSet<(usize, usize, u64)> =
        read_sweep_csv(out_csv)?.iter().map(SweepRow::key).collect();
    let mut cells = Vec::new();
    for &mult in &grid.latent_multipliers {
        for &k in &grid.k_values {
            for r in 0..grid.repeats as u64 {
                cells.push((mult * table.dim, k, base.seed + r));
            }
        }
    }
    let todo: Vec<_> = cells
        .iter()
        .copied()
        .filter(|c| !done.contains(c))
        .collect();
    let skipped = cells.len() - todo.len();
    let appender = Mutex::new(Appender::open(out_csv)?);
    let result = Mutex::new(SweepResult {
        skipped,
        ..Default::default()
    });

    let work = |&(n, k, seed): &(usize, usize, u64)| -> Result<()> {
        let row = match run_cell(base, table, steps, n, k, seed, ctx) {
            Ok(row) => row,
            Err(e) => {
                log::error!("sweep cell n={n} k={k} seed={seed} failed: {e}");
                result
                    .lock()
                    .unwrap()
                    .failures
                    .push(((n, k, seed), e.to_string()));
                SweepRow {
                    n,
                    k,
                    seed,
                    final_mse: f64::NAN,
                    final_cos: f64::NAN,
                    downstream_ratio: None,
                    steps: 0,
                    wall_ms: 0,
                }
            }
        };
        appender.lock().unwrap().push(&row)?;
        result.lock().unwrap().rows.push(row);
        Ok(())
    };
    if base.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(base.workers)
            .build()
            .map_err(|e| TideError::config(format!("thread pool: {e}")))?;
        pool.install(|| todo.par_iter().try_for_each(work))?;
    } else {
        todo.iter().try_for_each(work)?;
    }
    Ok(result.into_inner().unwrap())
}

/// Median `final_mse` per value of `key` among finite rows, ordered by key.
pub fn median_mse_by<F: Fn(&SweepRow) -> usize>(rows: &[SweepRow], key: F) -> Vec<(usize, f64)> {
    let keys: BTreeSet<usize> = rows.iter().map(&key).collect();
    keys.into_iter()
        .filter_map(|kv| {
            median(
                rows.iter()
                    .filter(|r| key(r) == kv && r.final_mse.is_finite())
                    .map(|r| r.final_mse)
                    .collect(),
            )
            .map(|m| (kv, m))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(vec![]), None);
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn grid_validation() {
        let g = SweepGrid {
            latent_multipliers: vec![],
            k_values: vec![1],
            repeats: 1,
        };
        assert!(g.validate().is_err());
    }
}
