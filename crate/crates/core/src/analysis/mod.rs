//! Concept vectors pooled over sparse codes, and top-k token similarity
//! masks.
//!
//! Similarity lives in code space: each token is encoded with the SAE and
//! compared to the pooled code of a concept by cosine.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dump::ActivationRecord;
use crate::error::{Result, TideError};
use crate::linalg::cosine;
use crate::sae::SaeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub v: Vec<f32>,
    /// Number of records pooled.
    pub support_count: usize,
    pub concept_id: String,
    /// Sparsity used to encode the pooled tokens.
    pub k: usize,
}

impl ConceptVector {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| TideError::io_at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| TideError::io_at(path, e))?;
        let c: Self = serde_json::from_str(&s)?;
        if c.v.iter().any(|x| !x.is_finite()) {
            return Err(TideError::data(format!(
                "{}: non-finite concept vector",
                path.display()
            )));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub token_scores: Vec<f32>,
    /// Ascending token indices of the `k` best scores.
    pub selected: Vec<usize>,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFormat {
    Json,
    Pgm,
}

/// Sum `(index, value)` contributions per index. Values are sorted before
/// summing so the result does not depend on input order.
fn order_free_sums(mut items: Vec<(u32, f32)>, n: usize) -> Vec<f64> {
    items.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut out = vec![0.0f64; n];
    for (j, v) in items {
        out[j as usize] += v as f64;
    }
    out
}

fn check_record(model: &SaeModel, r: &ActivationRecord) -> Result<()> {
    if r.dim() != model.f() {
        return Err(TideError::config(format!(
            "record dim {} does not match checkpoint input dim {}",
            r.dim(),
            model.f()
        )));
    }
    Ok(())
}

/// Mean post-TopK code over each record's tokens, then over records.
pub fn pool_concept_with(
    model: &SaeModel,
    records: &[&ActivationRecord],
    k: usize,
    concept_id: &str,
) -> Result<ConceptVector> {
    let first = records
        .first()
        .ok_or_else(|| TideError::usage("cannot pool a concept over an empty record set"))?;
    let layer = first.header.layer_index;
    let k = model.resolve_k(k)?;
    let n = model.n();
    let mut per_record = Vec::new();
    let mut scratch = Vec::new();
    for r in records {
        check_record(model, r)?;
        if r.header.layer_index != layer {
            return Err(TideError::config(
                "concept records come from different layers",
            ));
        }
        if r.token_count() == 0 {
            return Err(TideError::data("record without tokens"));
        }
        let t = r.header.timestep as usize;
        let mut items = Vec::new();
        for i in 0..r.token_count() {
            items.extend(model.encode_pairs(r.token(i), t, k, &mut scratch)?);
        }
        let sums = order_free_sums(items, n);
        let tc = r.token_count() as f64;
        per_record.extend(
            sums.iter()
                .enumerate()
                .filter(|(_, s)| **s != 0.0)
                .map(|(j, s)| (j as u32, (s / tc) as f32)),
        );
    }
    let sums = order_free_sums(per_record, n);
    let rc = records.len() as f64;
    Ok(ConceptVector {
        v: sums.iter().map(|s| (s / rc) as f32).collect(),
        support_count: records.len(),
        concept_id: concept_id.to_string(),
        k,
    })
}

pub fn pool_concept(
    ckpt: &Path,
    records: &[&ActivationRecord],
    k: usize,
    concept_id: &str,
) -> Result<ConceptVector> {
    pool_concept_with(&SaeModel::load(ckpt)?, records, k, concept_id)
}

/// Cosine between each token's code (at the concept's `k`) and the concept;
/// tokens with an all-zero code score 0.
pub fn token_similarity_with(
    model: &SaeModel,
    query: &ActivationRecord,
    concept: &ConceptVector,
) -> Result<Vec<f32>> {
    check_record(model, query)?;
    if concept.v.len() != model.n() {
        return Err(TideError::config(format!(
            "concept has {} entries, checkpoint has {} latents",
            concept.v.len(),
            model.n()
        )));
    }
    let t = query.header.timestep as usize;
    let mut scratch = Vec::new();
    let mut code = vec![0.0f32; model.n()];
    (0..query.token_count())
        .map(|i| {
            let pairs = model.encode_pairs(query.token(i), t, concept.k, &mut scratch)?;
            for &(j, v) in &pairs {
                code[j as usize] = v;
            }
            let s = cosine(&code, &concept.v);
            for &(j, _) in &pairs {
                code[j as usize] = 0.0;
            }
            Ok(s)
        })
        .collect()
}

pub fn token_similarity(
    ckpt: &Path,
    query: &ActivationRecord,
    concept: &ConceptVector,
) -> Result<Vec<f32>> {
    token_similarity_with(&SaeModel::load(ckpt)?, query, concept)
}

/// Select the `k` highest scores; ties go to the lower index.
pub fn topk_mask(scores: &[f32], k: usize) -> Result<FeatureMask> {
    if k == 0 || k > scores.len() {
        return Err(TideError::config(format!(
            "mask k = {k} out of range 1..={}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TideError::data("NaN similarity score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    Ok(FeatureMask {
        token_scores: scores.to_vec(),
        selected,
        k,
    })
}

/// 8-bit grayscale rendering: scores min-max scaled into 0..=254 (uniform
/// 127 when all scores are equal), selected tokens set to 255.
pub fn mask_to_pgm(mask: &FeatureMask, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let n = mask.token_scores.len();
    if rows * cols != n {
        return Err(TideError::config(format!(
            "mask geometry {rows}x{cols} does not cover {n} tokens"
        )));
    }
    let lo = mask
        .token_scores
        .iter()
        .copied()
        .fold(f32::INFINITY, f32::min);
    let hi = mask
        .token_scores
        .iter()
        .copied()
        .fold(f32::NEG_INFINITY, f32::max);
    let mut px: Vec<u8> = mask
        .token_scores
        .iter()
        .map(|&s| {
            if hi > lo {
                (((s - lo) / (hi - lo)) * 254.0).round() as u8
            } else {
                127
            }
        })
        .collect();
    for &i in &mask.selected {
        if i >= n {
            return Err(TideError::data(format!("selected token {i} out of range")));
        }
        px[i] = 255;
    }
    let mut out = format!("P5 {cols} {rows} 255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn export_mask(
    mask: &FeatureMask,
    geometry: (usize, usize),
    out: &Path,
    format: MaskFormat,
) -> Result<()> {
    let (rows, cols) = geometry;
    if rows * cols != mask.token_scores.len() {
        return Err(TideError::config(format!(
            "mask geometry {rows}x{cols} does not cover {} tokens",
            mask.token_scores.len()
        )));
    }
    let bytes = match format {
        MaskFormat::Json => serde_json::to_vec_pretty(mask)?,
        MaskFormat::Pgm => mask_to_pgm(mask, rows, cols)?,
    };
    let mut f = std::fs::File::create(out).map_err(|e| TideError::io_at(out, e))?;
    f.write_all(&bytes).map_err(|e| TideError::io_at(out, e))?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<FeatureMask> {
    let s = std::fs::read_to_string(path).map_err(|e| TideError::io_at(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

fn label_split(r: &ActivationRecord) -> Option<[(u16, usize); 2]> {
    let labels = r.labels.as_ref()?;
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() != 2 {
        return None;
    }
    let mut v: Vec<(u16, usize)> = counts.into_iter().collect();
    // fewest tokens first, ties to the lower label
    v.sort_by_key(|&(c, n)| (n, c));
    Some([v[0], v[1]])
}

/// Object class of a labeled synthetic record: the less frequent of its
/// two labels. `None` for unlabeled records or other label layouts.
pub fn record_object_class(r: &ActivationRecord) -> Option<u16> {
    label_split(r).map(|s| s[0].0)
}

/// Scene class of a labeled synthetic record: the label covering most of
/// its tokens.
pub fn record_scene_class(r: &ActivationRecord) -> Option<u16> {
    label_split(r).map(|s| s[1].0)
}

/// Records used to pool the concept of `class`: those where it fills most
/// of the record, so little else leaks into the mean code.
pub fn concept_records(records: &[ActivationRecord], class: u16) -> Vec<&ActivationRecord> {
    records
        .iter()
        .filter(|r| record_scene_class(r) == Some(class))
        .collect()
}

/// Records where `class` is the object, the natural queries for a mask.
pub fn query_records(records: &[ActivationRecord], class: u16) -> Vec<&ActivationRecord> {
    records
        .iter()
        .filter(|r| record_object_class(r) == Some(class))
        .collect()
}

/// Fraction of selected tokens labeled `class`.
pub fn mask_precision(mask: &FeatureMask, labels: &[u16], class: u16) -> f64 {
    if mask.selected.is_empty() {
        return 0.0;
    }
    let hit = mask
        .selected
        .iter()
        .filter(|&&i| labels.get(i) == Some(&class))
        .count();
    hit as f64 / mask.selected.len() as f64
}
