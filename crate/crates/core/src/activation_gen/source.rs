//! Class-structured synthetic latents with per-token ground-truth labels.
//!
//! Each latent is a square token grid showing a background class with one
//! rectangular object of a different class. Tokens of class `c` are one of
//! the class's prototype vectors plus Gaussian jitter.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TideError};
use crate::linalg::cosine;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub class_count: usize,
    pub prototypes_per_class: usize,
    pub noise_level: f32,
    /// Ceiling on cosine similarity between prototypes of distinct classes.
    pub max_cross_cosine: f32,
    /// Smallest and largest object side length, in tokens.
    pub object_min_side: usize,
    pub object_max_side: usize,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            class_count: 8,
            prototypes_per_class: 2,
            noise_level: 0.2,
            max_cross_cosine: 0.3,
            object_min_side: 2,
            object_max_side: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLatentSource {
    pub config: SourceConfig,
    pub token_count: usize,
    pub grid_side: usize,
    pub dim: usize,
    /// `class -> prototype -> dim`
    pub class_prototypes: Vec<Vec<Vec<f32>>>,
    /// Per-class conditioning vectors (stand-in for text embeddings).
    pub class_cond: Vec<Vec<f32>>,
}

/// One generated clean latent.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLatent {
    pub z0: Vec<f32>,
    pub token_labels: Vec<u16>,
    pub background: u16,
    pub object: u16,
}

impl SyntheticLatentSource {
    pub fn new(
        config: &SourceConfig,
        token_count: usize,
        dim: usize,
        cond_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if config.class_count < 2 {
            return Err(TideError::config(
                "synthetic source needs at least 2 classes",
            ));
        }
        if config.class_count > u16::MAX as usize {
            return Err(TideError::config("class_count exceeds u16 label range"));
        }
        if config.prototypes_per_class == 0 {
            return Err(TideError::config("prototypes_per_class must be >= 1"));
        }
        let side = (token_count as f64).sqrt().round() as usize;
        if side * side != token_count {
            return Err(TideError::config(format!(
                "token_count {token_count} is not a square grid"
            )));
        }
        if config.object_min_side == 0
            || config.object_min_side > config.object_max_side
            || config.object_max_side >= side
        {
            return Err(TideError::config(format!(
                "object side range {}..={} invalid for a {side}x{side} grid",
                config.object_min_side, config.object_max_side
            )));
        }

        let mut r = rng::substream(seed, "source-prototypes");
        let scale = 1.0;
        let mut protos: Vec<Vec<Vec<f32>>> = Vec::with_capacity(config.class_count);
        let mut attempts = 0usize;
        while protos.len() < config.class_count {
            let cand: Vec<Vec<f32>> = (0..config.prototypes_per_class)
                .map(|_| rng::normal_vec(&mut r, dim, scale))
                .collect();
            let ok = protos.iter().all(|other| {
                other
                    .iter()
                    .all(|p| cand.iter().all(|q| cosine(p, q) < config.max_cross_cosine))
            });
            if ok {
                protos.push(cand);
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(TideError::config(
                    "could not draw prototypes under the cross-class cosine ceiling",
                ));
            }
        }
        let mut rc = rng::substream(seed, "source-cond");
        let class_cond = (0..config.class_count)
            .map(|_| rng::normal_vec(&mut rc, cond_dim, 1.0))
            .collect();
        Ok(Self {
            config: config.clone(),
            token_count,
            grid_side: side,
            dim,
            class_prototypes: protos,
            class_cond,
        })
    }

    /// Draw one latent. `object` forces the object class when given.
    pub fn sample(&self, r: &mut Rng, object: Option<u16>) -> SyntheticLatent {
        let cfg = &self.config;
        let classes = cfg.class_count as u16;
        let object = object.unwrap_or_else(|| r.gen_range(0..classes));
        let mut background = r.gen_range(0..classes - 1);
        if background >= object {
            background += 1;
        }
        let side = self.grid_side;
        let h = r.gen_range(cfg.object_min_side..=cfg.object_max_side);
        let w = r.gen_range(cfg.object_min_side..=cfg.object_max_side);
        let top = r.gen_range(0..=side - h);
        let left = r.gen_range(0..=side - w);

        let mut z0 = Vec::with_capacity(self.token_count * self.dim);
        let mut labels = Vec::with_capacity(self.token_count);
        for row in 0..side {
            for col in 0..side {
                let inside = row >= top && row < top + h && col >= left && col < left + w;
                let c = if inside { object } else { background };
                let proto =
                    &self.class_prototypes[c as usize][r.gen_range(0..cfg.prototypes_per_class)];
                let jitter = rng::normal_vec(r, self.dim, cfg.noise_level);
                z0.extend(proto.iter().zip(&jitter).map(|(p, j)| p + j));
                labels.push(c);
            }
        }
        SyntheticLatent {
            z0,
            token_labels: labels,
            background,
            object,
        }
    }
}
