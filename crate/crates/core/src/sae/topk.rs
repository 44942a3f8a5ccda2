use std::cmp::Ordering;

use crate::error::{Result, TideError};
use crate::linalg::Real;

/// Sparse latent code produced by TopK.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T: Real> {
    /// Dense length-`n` code.
    pub z: Vec<T>,
    /// Sorted indices of the nonzero entries.
    pub active_indices: Vec<u32>,
    pub k_used: usize,
}

impl<T: Real> LatentCode<T> {
    pub fn from_dense(z: Vec<T>) -> Self {
        let active_indices: Vec<u32> = z
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != T::zero())
            .map(|(i, _)| i as u32)
            .collect();
        let k_used = active_indices.len();
        Self {
            z,
            active_indices,
            k_used,
        }
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn pairs(&self) -> Vec<(u32, T)> {
        self.active_indices
            .iter()
            .map(|&j| (j, self.z[j as usize]))
            .collect()
    }
}

/// Order used by TopK: larger value first, lower index on ties.
#[inline]
fn rank<T: Real>(a: &(u32, T), b: &(u32, T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Indices and values of the `k` largest strictly positive entries of `l`,
/// sorted by index. `scratch` is reused between calls.
pub fn topk_pairs<T: Real>(l: &[T], k: usize, scratch: &mut Vec<(u32, T)>) -> Vec<(u32, T)> {
    scratch.clear();
    scratch.extend(
        l.iter()
            .enumerate()
            .filter(|(_, v)| **v > T::zero())
            .map(|(i, v)| (i as u32, *v)),
    );
    if scratch.len() > k {
        scratch.select_nth_unstable_by(k - 1, rank);
        scratch.truncate(k);
    }
    let mut out = scratch.clone();
    out.sort_unstable_by_key(|p| p.0);
    out
}

/// Keep the `k` largest entries, zero the rest. Ties go to the lower index
/// and non-positive entries are never active.
pub fn topk<T: Real>(l: &[T], k: usize) -> Result<LatentCode<T>> {
    if k == 0 || k > l.len() {
        return Err(TideError::config(format!(
            "top-k: k = {k} out of range 1..={}",
            l.len()
        )));
    }
    let mut scratch = Vec::new();
    let pairs = topk_pairs(l, k, &mut scratch);
    let mut z = vec![T::zero(); l.len()];
    for &(j, v) in &pairs {
        z[j as usize] = v;
    }
    Ok(LatentCode {
        z,
        k_used: pairs.len(),
        active_indices: pairs.into_iter().map(|p| p.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn direct_selection() {
        let c = topk(&[3.0f64, 1.0, 2.0], 2).unwrap();
        assert_eq!(c.z, vec![3.0, 0.0, 2.0]);
        assert_eq!(c.active_indices, vec![0, 2]);
        assert_eq!(c.k_used, 2);
    }

    #[test]
    fn k_equal_n_keeps_positive_part() {
        let l = [0.5f32, -1.0, 0.0, 2.0];
        let c = topk(&l, 4).unwrap();
        assert_eq!(c.z, vec![0.5, 0.0, 0.0, 2.0]);
        assert_eq!(c.k_used, 2);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let c = topk(&[1.0f32, 2.0, 2.0, 2.0], 2).unwrap();
        assert_eq!(c.active_indices, vec![1, 2]);
    }

    #[test]
    fn k_out_of_range() {
        assert!(topk(&[1.0f32, 2.0], 0).is_err());
        assert!(topk(&[1.0f32, 2.0], 3).is_err());
    }

    /// Full-sort reference: sort all (value desc, index asc), keep first k positives.
    fn sort_reference(l: &[f64], k: usize) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..l.len()).collect();
        idx.sort_by(|&a, &b| l[b].partial_cmp(&l[a]).unwrap().then(a.cmp(&b)));
        let mut z = vec![0.0; l.len()];
        for &i in idx.iter().take(k) {
            if l[i] > 0.0 {
                z[i] = l[i];
            }
        }
        z
    }

    #[test]
    fn matches_full_sort_reference() {
        let mut r = rng::substream(21, "topk");
        let n = 64;
        for trial in 0..1000 {
            let mut l = rng::normal_vec_f64(&mut r, n, 1.0);
            if trial % 10 == 0 {
                // force ties
                for v in l.iter_mut().step_by(3) {
                    *v = 0.5;
                }
            }
            let c = topk(&l, n / 4).unwrap();
            assert_eq!(c.z, sort_reference(&l, n / 4));
        }
    }

    proptest! {
        #[test]
        fn sparsity_and_idempotence(l in proptest::collection::vec(-5.0f64..5.0, 1..40), kf in 0.0f64..1.0) {
            let k = 1 + ((l.len() - 1) as f64 * kf) as usize;
            let c = topk(&l, k).unwrap();
            let positives = l.iter().filter(|v| **v > 0.0).count();
            prop_assert!(c.k_used <= k);
            prop_assert_eq!(c.k_used, positives.min(k));
            prop_assert!(c.active_indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(c.active_indices.iter().all(|&j| c.z[j as usize] > 0.0));
            let again = topk(&c.z, k).unwrap();
            prop_assert_eq!(again, c);
        }
    }
}
