//! Edits in the sparse code space, re-injected into the toy DiT.
//!
//! Tokens are encoded, edited, decoded, optionally rescaled to the norm of
//! their unedited reconstruction, and written back at the hook. Tokens the
//! selector leaves out carry their unedited reconstruction.

use serde::{Deserialize, Serialize};

use crate::activation_gen::{
    dit_forward, dit_forward_with, HookSpec, Intervention, PreparedSample, ToyDiTParams,
};
use crate::analysis::ConceptVector;
use crate::error::{Result, TideError};
use crate::linalg::all_finite;
use crate::sae::{topk, LatentCode, SaeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditOp {
    Erase { indices: Vec<usize> },
    Invert { indices: Vec<usize> },
    Scale { indices: Vec<usize>, factor: f32 },
    Replace { target_code: Vec<f32> },
    Steer { direction: Vec<f32>, alpha: f32 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSelector {
    #[default]
    All,
    /// Token indices, typically a feature mask's selection.
    Mask(Vec<usize>),
}

impl TokenSelector {
    pub fn selects(&self, token: usize) -> bool {
        match self {
            TokenSelector::All => true,
            TokenSelector::Mask(m) => m.contains(&token),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSpec {
    pub op: EditOp,
    #[serde(default)]
    pub token_selector: TokenSelector,
    #[serde(default)]
    pub renormalize: bool,
    /// Re-apply TopK with this k after the edit (replace and steer can
    /// leave more than k nonzeros).
    #[serde(default)]
    pub retopk: Option<usize>,
}

impl EditSpec {
    pub fn new(op: EditOp) -> Self {
        Self {
            op,
            token_selector: TokenSelector::All,
            renormalize: false,
            retopk: None,
        }
    }

    /// Check indices and vector lengths against a latent size `n` and
    /// token count.
    pub fn validate(&self, n: usize, tokens: Option<usize>) -> Result<()> {
        let check_idx = |idx: &[usize]| -> Result<()> {
            match idx.iter().find(|&&j| j >= n) {
                Some(j) => Err(TideError::usage(format!(
                    "edit index {j} out of range 0..{n}"
                ))),
                None => Ok(()),
            }
        };
        let check_vec = |what: &str, v: &[f32]| -> Result<()> {
            if v.len() != n {
                return Err(TideError::usage(format!(
                    "{what} has {} entries, expected {n}",
                    v.len()
                )));
            }
            if !all_finite(v) {
                return Err(TideError::usage(format!("{what} is not finite")));
            }
            Ok(())
        };
        match &self.op {
            EditOp::Erase { indices } | EditOp::Invert { indices } => check_idx(indices)?,
            EditOp::Scale { indices, factor } => {
                check_idx(indices)?;
                if !factor.is_finite() {
                    return Err(TideError::usage("scale factor is not finite"));
                }
            }
            EditOp::Replace { target_code } => check_vec("target_code", target_code)?,
            EditOp::Steer { direction, alpha } => {
                check_vec("direction", direction)?;
                if !alpha.is_finite() {
                    return Err(TideError::usage("steer alpha is not finite"));
                }
            }
        }
        if let (TokenSelector::Mask(m), Some(t)) = (&self.token_selector, tokens) {
            if let Some(i) = m.iter().find(|&&i| i >= t) {
                return Err(TideError::usage(format!(
                    "mask token {i} out of range 0..{t}"
                )));
            }
        }
        if self.retopk == Some(0) || self.retopk.is_some_and(|k| k > n) {
            return Err(TideError::usage(format!("retopk out of range 1..={n}")));
        }
        Ok(())
    }
}

/// Apply the spec's operation to one code. No re-sparsification unless
/// `retopk` is set.
pub fn apply_edit(code: &LatentCode<f32>, spec: &EditSpec) -> Result<LatentCode<f32>> {
    let n = code.n();
    spec.validate(n, None)?;
    let mut z = code.z.clone();
    match &spec.op {
        EditOp::Erase { indices } => indices.iter().for_each(|&j| z[j] = 0.0),
        EditOp::Invert { indices } => indices.iter().for_each(|&j| z[j] = -z[j]),
        EditOp::Scale { indices, factor } => indices.iter().for_each(|&j| z[j] *= factor),
        EditOp::Replace { target_code } => z.copy_from_slice(target_code),
        EditOp::Steer { direction, alpha } => z
            .iter_mut()
            .zip(direction)
            .for_each(|(v, d)| *v += alpha * d),
    }
    match spec.retopk {
        Some(k) => topk(&z, k),
        None => Ok(LatentCode::from_dense(z)),
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenormStatus {
    Scaled,
    /// The edited vector is zero and is returned as is.
    ZeroEdited,
    /// The reference is zero; nothing to match.
    ZeroReference,
}

/// Rescale `edited` to the norm of `reference`.
pub fn cfg_renormalize(edited: &[f32], reference: &[f32]) -> (Vec<f32>, RenormStatus) {
    let (ne, nr) = (norm(edited), norm(reference));
    if nr == 0.0 {
        return (edited.to_vec(), RenormStatus::ZeroReference);
    }
    if ne == 0.0 {
        return (edited.to_vec(), RenormStatus::ZeroEdited);
    }
    let s = nr / ne;
    (
        edited.iter().map(|&x| (x as f64 * s) as f32).collect(),
        RenormStatus::Scaled,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    /// `tokens x f`
    pub edited_activation: Vec<f32>,
    pub tokens_touched: usize,
    /// Per-token norm of the unedited reconstruction.
    pub pre_norms: Vec<f64>,
    /// Per-token norm of what was written back.
    pub post_norms: Vec<f64>,
    /// Tokens where renormalization was requested but skipped.
    pub renorm_skipped: usize,
}

/// Encode, edit and decode every token of `act` (`tokens x f`, captured at
/// timestep `t`).
pub fn edit_tokens(
    model: &SaeModel,
    act: &[f32],
    t: usize,
    k: usize,
    spec: &EditSpec,
) -> Result<EditResult> {
    let f = model.f();
    if f == 0 || act.len() % f != 0 {
        return Err(TideError::Dimension {
            what: "activation width",
            expected: f,
            got: act.len(),
        });
    }
    let tokens = act.len() / f;
    spec.validate(model.n(), Some(tokens))?;
    let k = model.resolve_k(k)?;
    let mut out = Vec::with_capacity(act.len());
    let (mut pre_norms, mut post_norms) = (Vec::with_capacity(tokens), Vec::with_capacity(tokens));
    let (mut touched, mut skipped) = (0, 0);
    for (i, tok) in act.chunks_exact(f).enumerate() {
        let (code, recon) = model.forward(tok, t, k)?;
        pre_norms.push(norm(&recon));
        let written = if spec.token_selector.selects(i) {
            touched += 1;
            let edited = apply_edit(&code, spec)?;
            let mut dec = vec![0.0f32; f];
            model.params.decode_sparse(&edited.pairs(), &mut dec);
            if spec.renormalize {
                let (v, st) = cfg_renormalize(&dec, &recon);
                if st != RenormStatus::Scaled {
                    skipped += 1;
                }
                v
            } else {
                dec
            }
        } else {
            recon
        };
        post_norms.push(norm(&written));
        out.extend_from_slice(&written);
    }
    Ok(EditResult {
        edited_activation: out,
        tokens_touched: touched,
        pre_norms,
        post_norms,
        renorm_skipped: skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineEdit {
    pub result: EditResult,
    pub noise_pred_edited: Vec<f32>,
    /// Forward pass without any substitution.
    pub noise_pred_baseline: Vec<f32>,
}

impl PipelineEdit {
    /// `|edited - baseline|` over the noise prediction.
    pub fn effect_norm(&self) -> f64 {
        self.noise_pred_edited
            .iter()
            .zip(&self.noise_pred_baseline)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// One forward pass with the edit applied at `hook`, plus the vanilla pass.
pub fn edit_in_pipeline(
    dit: &ToyDiTParams,
    model: &SaeModel,
    hook: &HookSpec,
    spec: &EditSpec,
    sample: &PreparedSample,
    k: usize,
) -> Result<PipelineEdit> {
    dit.check_hook(hook)?;
    if let Some(h) = model.meta.as_ref().and_then(|m| m.hook.as_ref()) {
        if h != hook {
            return Err(TideError::config(format!(
                "checkpoint was trained on layer {}, edit hook is layer {}",
                h.layer_index, hook.layer_index
            )));
        }
    }
    if model.f() != dit.config.model_dim {
        return Err(TideError::config(format!(
            "SAE input dim {} differs from the model width {}",
            model.f(),
            dit.config.model_dim
        )));
    }
    let t = sample.diffusion.t;
    let (baseline, _) = dit_forward(dit, &sample.diffusion.zt, &sample.cond, t, &[])?;
    let mut result = None;
    let mut apply = |act: &mut [f32]| -> Result<()> {
        let r = edit_tokens(model, act, t, k, spec)?;
        act.copy_from_slice(&r.edited_activation);
        result = Some(r);
        Ok(())
    };
    let iv = Intervention {
        hook: hook.clone(),
        apply: &mut apply,
    };
    let (edited, _) = dit_forward_with(dit, &sample.diffusion.zt, &sample.cond, t, &[], Some(iv))?;
    let result = result.ok_or_else(|| TideError::config("edit hook was never reached"))?;
    Ok(PipelineEdit {
        result,
        noise_pred_edited: edited,
        noise_pred_baseline: baseline,
    })
}

/// Direction from one concept to another in code space.
pub fn concept_direction(source: &ConceptVector, target: &ConceptVector) -> Result<Vec<f32>> {
    if source.v.len() != target.v.len() {
        return Err(TideError::config(format!(
            "concepts have {} and {} latents",
            source.v.len(),
            target.v.len()
        )));
    }
    Ok(target.v.iter().zip(&source.v).map(|(t, s)| t - s).collect())
}

/// The `count` largest entries of a concept vector, largest first.
pub fn top_features(concept: &ConceptVector, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..concept.v.len())
        .filter(|&j| concept.v[j] > 0.0)
        .collect();
    idx.sort_by(|&a, &b| concept.v[b].total_cmp(&concept.v[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::SaeParams;
    use crate::train::init_params;
    use proptest::prelude::*;

    fn code(z: Vec<f32>) -> LatentCode<f32> {
        LatentCode::from_dense(z)
    }

    fn spec(op: EditOp) -> EditSpec {
        EditSpec::new(op)
    }

    #[test]
    fn trivial_identities() {
        let c = code(vec![0.0, 1.5, 0.0, 2.0]);
        assert_eq!(
            apply_edit(&c, &spec(EditOp::Erase { indices: vec![] })).unwrap(),
            c
        );
        assert_eq!(
            apply_edit(
                &c,
                &spec(EditOp::Scale {
                    indices: vec![1, 3],
                    factor: 1.0
                })
            )
            .unwrap(),
            c
        );
        let e = apply_edit(
            &c,
            &spec(EditOp::Erase {
                indices: c.active_indices.iter().map(|&j| j as usize).collect(),
            }),
        )
        .unwrap();
        assert!(e.z.iter().all(|v| *v == 0.0));
        assert!(e.active_indices.is_empty());
    }

    #[test]
    fn erase_all_active_decodes_to_zero() {
        let m = SaeModel {
            params: init_params(4, 8, 2),
            modulator: None,
            k_final: 2,
            l1: None,
            meta: None,
        };
        let (c, _) = m.forward(&[1.0, -0.5, 0.3, 0.8], 0, 2).unwrap();
        let e = apply_edit(
            &c,
            &spec(EditOp::Erase {
                indices: c.active_indices.iter().map(|&j| j as usize).collect(),
            }),
        )
        .unwrap();
        let mut out = vec![1.0f32; 4];
        m.params.decode_sparse(&e.pairs(), &mut out);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ops() {
        let c = code(vec![1.0, 2.0, 0.0]);
        assert_eq!(
            apply_edit(&c, &spec(EditOp::Invert { indices: vec![1] }))
                .unwrap()
                .z,
            vec![1.0, -2.0, 0.0]
        );
        assert_eq!(
            apply_edit(
                &c,
                &spec(EditOp::Scale {
                    indices: vec![0],
                    factor: 3.0
                })
            )
            .unwrap()
            .z,
            vec![3.0, 2.0, 0.0]
        );
        assert_eq!(
            apply_edit(
                &c,
                &spec(EditOp::Replace {
                    target_code: vec![0.0, 0.0, 5.0]
                })
            )
            .unwrap()
            .z,
            vec![0.0, 0.0, 5.0]
        );
        let s = apply_edit(
            &c,
            &spec(EditOp::Steer {
                direction: vec![1.0, -1.0, 1.0],
                alpha: 0.5,
            }),
        )
        .unwrap();
        assert_eq!(s.z, vec![1.5, 1.5, 0.5]);
        assert_eq!(s.k_used, 3);
        let mut sp = spec(EditOp::Steer {
            direction: vec![1.0, -1.0, 1.0],
            alpha: 0.5,
        });
        sp.retopk = Some(1);
        assert_eq!(apply_edit(&c, &sp).unwrap().z, vec![1.5, 0.0, 0.0]);
    }

    #[test]
    fn bad_index_is_usage_error() {
        let c = code(vec![1.0, 2.0, 0.0]);
        let err = apply_edit(&c, &spec(EditOp::Erase { indices: vec![7] })).unwrap_err();
        assert!(matches!(err, TideError::Usage(ref m) if m.contains('7')));
        assert!(apply_edit(
            &c,
            &spec(EditOp::Replace {
                target_code: vec![1.0]
            })
        )
        .is_err());
    }

    #[test]
    fn renormalize_examples() {
        let r = vec![1.0f32, -2.0, 3.0];
        assert_eq!(cfg_renormalize(&r, &r), (r.clone(), RenormStatus::Scaled));
        let twice: Vec<f32> = r.iter().map(|x| 2.0 * x).collect();
        assert_eq!(cfg_renormalize(&twice, &r).0, r);
        assert_eq!(cfg_renormalize(&[0.0; 3], &r).1, RenormStatus::ZeroEdited);
        assert_eq!(
            cfg_renormalize(&r, &[0.0; 3]).1,
            RenormStatus::ZeroReference
        );
    }

    #[test]
    fn renormalize_random_pairs() {
        let mut rng = crate::rng::substream(11, "renorm");
        for _ in 0..1000 {
            let a = crate::rng::normal_vec(&mut rng, 64, 3.0);
            let b = crate::rng::normal_vec(&mut rng, 64, 0.2);
            let (out, _) = cfg_renormalize(&a, &b);
            let ratio = norm(&out) / norm(&b);
            assert!((ratio - 1.0).abs() <= 1e-6, "{ratio}");
        }
    }

    #[test]
    fn direction_examples() {
        let a = ConceptVector {
            v: vec![1.0, 0.0, 2.0],
            support_count: 1,
            concept_id: "a".into(),
            k: 1,
        };
        let b = ConceptVector {
            v: vec![0.5, 1.0, 0.0],
            concept_id: "b".into(),
            ..a.clone()
        };
        assert!(concept_direction(&a, &a).unwrap().iter().all(|v| *v == 0.0));
        let ab = concept_direction(&a, &b).unwrap();
        let ba = concept_direction(&b, &a).unwrap();
        assert!(ab.iter().zip(&ba).all(|(x, y)| *x == -*y));
        assert_eq!(top_features(&a, 5), vec![2, 0]);
    }

    #[test]
    fn spec_toml_round_trip() {
        let s = EditSpec {
            op: EditOp::Scale {
                indices: vec![1, 4],
                factor: 0.5,
            },
            token_selector: TokenSelector::Mask(vec![0, 3]),
            renormalize: true,
            retopk: None,
        };
        let text = toml::to_string(&s).unwrap();
        assert_eq!(toml::from_str::<EditSpec>(&text).unwrap(), s);
        let parsed: EditSpec =
            toml::from_str("token_selector = \"all\"\n[op]\nop = \"erase\"\nindices = [3]\n")
                .unwrap();
        assert_eq!(parsed.op, EditOp::Erase { indices: vec![3] });
        assert!(
            toml::from_str::<EditSpec>("[op]\nop = \"erase\"\nindices = [3]\nfactor = 2.0\n")
                .is_err()
        );
    }

    /// Split-sign identity dictionary: exact on any input with k = f.
    fn split_identity(f: usize) -> SaeModel {
        let mut p = SaeParams::zeros(f, 2 * f);
        for i in 0..f {
            p.w_enc[i * f + i] = 1.0;
            p.w_enc[(f + i) * f + i] = -1.0;
            p.w_dec[i * f + i] = 1.0;
            p.w_dec[(f + i) * f + i] = -1.0;
        }
        SaeModel {
            params: p,
            modulator: None,
            k_final: f,
            l1: None,
            meta: None,
        }
    }

    #[test]
    fn split_identity_is_exact() {
        let m = split_identity(5);
        let a = [0.3f32, -1.25, 0.0, 7.5, -0.001];
        assert_eq!(m.reconstruct(&a, 0, 5).unwrap(), a.to_vec());
    }

    #[test]
    fn untouched_tokens_are_unedited_reconstructions() {
        let m = SaeModel {
            params: init_params(4, 12, 3),
            modulator: None,
            k_final: 3,
            l1: None,
            meta: None,
        };
        let mut r = crate::rng::substream(4, "edit");
        let act = crate::rng::normal_vec(&mut r, 6 * 4, 1.0);
        let mut sp = spec(EditOp::Scale {
            indices: (0..12).collect(),
            factor: 2.5,
        });
        sp.token_selector = TokenSelector::Mask(vec![1, 4]);
        sp.renormalize = true;
        let res = edit_tokens(&m, &act, 0, 3, &sp).unwrap();
        assert_eq!(res.tokens_touched, 2);
        for i in 0..6 {
            let tok = &res.edited_activation[i * 4..(i + 1) * 4];
            if i == 1 || i == 4 {
                assert!((res.post_norms[i] / res.pre_norms[i] - 1.0).abs() < 1e-6);
            } else {
                assert_eq!(
                    tok,
                    &m.reconstruct(&act[i * 4..(i + 1) * 4], 0, 3).unwrap()[..]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn erase_idempotent_invert_involutive(z in proptest::collection::vec(-5.0f32..5.0, 1..24), picks in proptest::collection::vec(0usize..1000, 0..8)) {
            let n = z.len();
            let idx: Vec<usize> = picks.iter().map(|p| p % n).collect();
            let c = code(z);
            let e = spec(EditOp::Erase { indices: idx.clone() });
            let once = apply_edit(&c, &e).unwrap();
            prop_assert_eq!(&apply_edit(&once, &e).unwrap(), &once);
            let mut uniq = idx.clone();
            uniq.sort_unstable();
            uniq.dedup();
            let inv = spec(EditOp::Invert { indices: uniq });
            prop_assert_eq!(&apply_edit(&apply_edit(&c, &inv).unwrap(), &inv).unwrap(), &c);
        }
    }
}
