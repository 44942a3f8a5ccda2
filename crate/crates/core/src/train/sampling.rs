//! Token-level sampling and the record-structured training stream.
//!
//! The stream visits records in a fresh seeded order each epoch; every visit
//! contributes `ceil(rate * N)` of the record's tokens, drawn anew for that
//! visit. Batch `s` is the token range `[s * B, (s + 1) * B)` of this stream,
//! so a batch is a pure function of `(seed, step)` and resuming is exact.

use std::ops::Range;

use rand::seq::index;
use rand::seq::SliceRandom;

use crate::dump::{TokenBatch, TokenTable};
use crate::rng;

use super::config::Rate;

/// Uniform sample without replacement of `ceil(rate * len)` tokens from each
/// range, returned as absolute indices (sorted within each range).
pub fn sample_tokens(records: &[Range<usize>], rate: Rate, step_seed: u64) -> Vec<usize> {
    let mut r = rng::substream(step_seed, "token-sample");
    let mut out = Vec::new();
    for range in records {
        out.extend(sample_one(range.clone(), rate, &mut r));
    }
    out
}

fn sample_one(range: Range<usize>, rate: Rate, r: &mut rng::Rng) -> Vec<usize> {
    let len = range.len();
    if rate.is_one() {
        return range.collect();
    }
    let mut idx = index::sample(r, len, rate.kept(len)).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| range.start + i).collect()
}

pub struct BatchStream<'a> {
    table: &'a TokenTable,
    rate: Rate,
    seed: u64,
    kept: usize,
    epoch: Option<(u64, Vec<usize>)>,
    visit: Option<(u64, Vec<usize>)>,
}

impl<'a> BatchStream<'a> {
    pub fn new(table: &'a TokenTable, rate: Rate, seed: u64) -> Self {
        Self {
            table,
            rate,
            seed,
            kept: rate.kept(table.tokens_per_record),
            epoch: None,
            visit: None,
        }
    }

    fn record_at(&mut self, epoch: u64, pos: usize) -> usize {
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.table.record_count).collect();
            order.shuffle(&mut rng::indexed(self.seed, "epoch-order", epoch));
            self.epoch = Some((epoch, order));
        }
        self.epoch.as_ref().unwrap().1[pos]
    }

    /// Token indices of one record visit (cached for the current visit).
    fn visit_tokens(&mut self, epoch: u64, pos: usize) -> &[usize] {
        let key = epoch * self.table.record_count as u64 + pos as u64;
        if self.visit.as_ref().map(|v| v.0) != Some(key) {
            let rec = self.record_at(epoch, pos);
            let range = self.table.record_range(rec);
            let toks = sample_tokens(
                &[range],
                self.rate,
                self.seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            self.visit = Some((key, toks));
        }
        &self.visit.as_ref().unwrap().1
    }

    /// Token indices making up the batch of `step`.
    pub fn indices(&mut self, step: u64, batch_tokens: usize) -> Vec<usize> {
        let per_epoch = (self.table.record_count * self.kept) as u64;
        let start = step * batch_tokens as u64;
        let mut out = Vec::with_capacity(batch_tokens);
        for q in start..start + batch_tokens as u64 {
            let epoch = q / per_epoch;
            let within = q % per_epoch;
            let pos = (within / self.kept as u64) as usize;
            let slot = (within % self.kept as u64) as usize;
            out.push(self.visit_tokens(epoch, pos)[slot]);
        }
        out
    }

    pub fn batch(&mut self, step: u64, batch_tokens: usize) -> TokenBatch {
        let idx = self.indices(step, batch_tokens);
        TokenBatch::gather(self.table, &idx)
    }
}
