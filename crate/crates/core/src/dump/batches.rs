//! Token-level views of a dataset.

use std::path::Path;

use rand::seq::SliceRandom;

use super::manifest::load_records;
use super::record::ActivationRecord;
use crate::error::{Result, TideError};
use crate::rng;

/// All tokens of a dataset, flattened, each tagged with its record's
/// timestep and record index.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    pub dim: usize,
    pub tokens_per_record: usize,
    /// `len x dim`
    pub data: Vec<f32>,
    pub timesteps: Vec<u32>,
    pub record_of: Vec<u32>,
    pub labels: Option<Vec<u16>>,
    pub record_count: usize,
}

impl TokenTable {
    pub fn from_records(records: &[ActivationRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| TideError::data("empty dataset: no records"))?;
        let (t, d) = (first.token_count(), first.dim());
        let labeled = records.iter().all(|r| r.labels.is_some());
        let mut table = Self {
            dim: d,
            tokens_per_record: t,
            data: Vec::with_capacity(records.len() * t * d),
            timesteps: Vec::with_capacity(records.len() * t),
            record_of: Vec::with_capacity(records.len() * t),
            labels: labeled.then(Vec::new),
            record_count: records.len(),
        };
        for (ri, r) in records.iter().enumerate() {
            if r.token_count() != t || r.dim() != d {
                return Err(TideError::data(format!(
                    "record {ri} has shape {}x{}, expected {t}x{d}",
                    r.token_count(),
                    r.dim()
                )));
            }
            table.data.extend_from_slice(&r.data);
            table
                .timesteps
                .extend(std::iter::repeat(r.header.timestep).take(t));
            table.record_of.extend(std::iter::repeat(ri as u32).take(t));
            if let (Some(dst), Some(src)) = (table.labels.as_mut(), r.labels.as_ref()) {
                dst.extend_from_slice(src);
            }
        }
        Ok(table)
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let (_, records) = load_records(manifest)?;
        Self::from_records(&records)
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Mean over tokens of `|a|^2 / dim`.
    pub fn mean_square(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.data
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Token indices `[start, start + tokens_per_record)` of record `r`.
    pub fn record_range(&self, r: usize) -> std::ops::Range<usize> {
        r * self.tokens_per_record..(r + 1) * self.tokens_per_record
    }
}

/// A contiguous batch of token vectors with their timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub dim: usize,
    pub data: Vec<f32>,
    pub timesteps: Vec<u32>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn gather(table: &TokenTable, idx: &[usize]) -> Self {
        let d = table.dim;
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut timesteps = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(table.token(i));
            timesteps.push(table.timesteps[i]);
        }
        Self {
            dim: d,
            data,
            timesteps,
        }
    }
}

/// Batches over an in-memory table; a seed gives a deterministic token
/// permutation, no seed keeps manifest order.
pub struct BatchIter<'a> {
    table: &'a TokenTable,
    order: Vec<usize>,
    batch_tokens: usize,
    pos: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(
        table: &'a TokenTable,
        batch_tokens: usize,
        shuffle_seed: Option<u64>,
    ) -> Result<Self> {
        if batch_tokens == 0 {
            return Err(TideError::config("batch_tokens must be >= 1"));
        }
        if table.is_empty() {
            return Err(TideError::data("empty dataset: no tokens to batch"));
        }
        let mut order: Vec<usize> = (0..table.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut rng::substream(seed, "batch-order"));
        }
        Ok(Self {
            table,
            order,
            batch_tokens,
            pos: 0,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_tokens).min(self.order.len());
        let b = TokenBatch::gather(self.table, &self.order[self.pos..end]);
        self.pos = end;
        Some(b)
    }
}

/// Load a dataset and batch it. The table is returned alongside so the
/// iterator can borrow it.
pub fn iterate_batches(
    manifest: &Path,
    batch_tokens: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<TokenBatch>> {
    let table = TokenTable::load(manifest)?;
    Ok(BatchIter::new(&table, batch_tokens, shuffle_seed)?.collect())
}
