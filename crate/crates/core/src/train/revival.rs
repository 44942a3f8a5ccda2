//! Dead-latent bookkeeping and revival from high-error residuals.

use crate::linalg::{norm, Real};
use crate::sae::SaeParams;

use super::optim::OptimState;

#[derive(Debug, Clone, PartialEq)]
pub struct DeadLatentTracker {
    pub last_active_step: Vec<u64>,
    pub activation_counts: Vec<u64>,
}

impl DeadLatentTracker {
    pub fn new(n: usize, step: u64) -> Self {
        Self {
            last_active_step: vec![step; n],
            activation_counts: vec![0; n],
        }
    }

    pub fn record(&mut self, active: &[u32], step: u64) {
        for &j in active {
            self.last_active_step[j as usize] = step;
            self.activation_counts[j as usize] += 1;
        }
    }

    /// Latents with no activation during the last `window` steps.
    pub fn stale(&self, step: u64, window: u64) -> Vec<usize> {
        self.last_active_step
            .iter()
            .enumerate()
            .filter(|(_, &s)| step.saturating_sub(s) >= window)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn dead_fraction(&self, step: u64, window: u64) -> f64 {
        if self.last_active_step.is_empty() {
            return 0.0;
        }
        self.stale(step, window).len() as f64 / self.last_active_step.len() as f64
    }
}

/// One buffered token: its reconstruction residual `a - a_hat`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstToken<T: Real> {
    pub err: f64,
    pub residual: Vec<T>,
}

/// Bounded FIFO of recent high-error tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstTokens<T: Real> {
    pub capacity: usize,
    pub items: std::collections::VecDeque<WorstToken<T>>,
}

impl<T: Real> WorstTokens<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Default::default(),
        }
    }

    pub fn push(&mut self, tok: WorstToken<T>) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(tok);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Remove and return the highest-error entry (earliest on ties).
    fn take_worst(&mut self) -> Option<WorstToken<T>> {
        let mut best: Option<usize> = None;
        for (i, it) in self.items.iter().enumerate() {
            if best.map_or(true, |b| it.err > self.items[b].err) {
                best = Some(i);
            }
        }
        best.and_then(|i| self.items.remove(i))
    }
}

/// Re-seed every stale latent from a distinct buffered residual, worst first.
/// The decoder column becomes the unit residual, the encoder row `0.1` times
/// it, the bias zero; optimizer moments for those entries are cleared.
/// Returns the revived indices (possibly fewer than the stale set when the
/// buffer runs out).
pub fn detect_and_revive<T: Real>(
    p: &mut SaeParams<T>,
    tracker: &mut DeadLatentTracker,
    step: u64,
    dead_window: u64,
    worst: &mut WorstTokens<T>,
    mut opt: Option<&mut OptimState<T>>,
) -> Vec<usize> {
    let stale = tracker.stale(step, dead_window);
    if stale.is_empty() {
        return Vec::new();
    }
    if worst.is_empty() {
        log::warn!(
            "step {step}: {} dead latents but no buffered high-error tokens; skipping revival",
            stale.len()
        );
        return Vec::new();
    }
    let f = p.f;
    let scale = T::from_f64_lossy(0.1);
    let mut revived = Vec::new();
    for j in stale {
        let tok = loop {
            match worst.take_worst() {
                Some(t) if norm(&t.residual) > T::zero() => break Some(t),
                Some(_) => continue,
                None => break None,
            }
        };
        let Some(tok) = tok else { break };
        let inv = T::one() / norm(&tok.residual);
        for i in 0..f {
            let c = tok.residual[i] * inv;
            p.w_dec[j * f + i] = c;
            p.w_enc[j * f + i] = scale * c;
        }
        p.b_enc[j] = T::zero();
        if let Some(o) = opt.as_deref_mut() {
            o.tensors[0].reset(j * f..(j + 1) * f);
            o.tensors[1].reset(j..j + 1);
            o.tensors[2].reset(j * f..(j + 1) * f);
        }
        tracker.last_active_step[j] = step;
        revived.push(j);
    }
    revived
}
