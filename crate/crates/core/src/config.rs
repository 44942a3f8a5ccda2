//! Experiment configuration file (TOML). Every section is optional; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activation_gen::{ExtractConfig, HookSpec, WorldConfig};
use crate::analysis::MaskFormat;
use crate::edit::EditSpec;
use crate::error::{Result, TideError};
use crate::eval::{DownstreamSpec, SweepGrid};
use crate::train::{Rate, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory or manifest.
    pub data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Taps to record; empty means the penultimate block output.
    pub hooks: Vec<HookSpec>,
    pub extract: ExtractConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// 0 = the checkpoint's k.
    pub k: usize,
    pub layer: Option<u16>,
    pub downstream: bool,
    pub downstream_spec: DownstreamSpec,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 0,
            layer: None,
            downstream: false,
            downstream_spec: DownstreamSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    /// Sampling rate of the sampled arm.
    pub sampled_rate: Rate,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            sampled_rate: Rate::new(1, 16).expect("valid rate"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// Object class whose concept is pooled.
    pub class: u16,
    /// Encoding k; 0 = the checkpoint's k.
    pub k: usize,
    /// Only records with timestep <= this are pooled and queried.
    pub max_timestep: u32,
    /// Index of the query among the records where the class is the object.
    /// The concept is pooled over records where it is the scene. Default:
    /// the last query.
    pub query: Option<usize>,
    /// Mask size; default is the query's count of class tokens, or 8 for
    /// unlabeled data.
    pub mask_k: Option<usize>,
    pub formats: Vec<MaskFormat>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            class: 0,
            k: 0,
            max_timestep: 100,
            query: None,
            mask_k: None,
            formats: vec![MaskFormat::Json, MaskFormat::Pgm],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSection {
    pub spec: Option<EditSpec>,
    /// Object class of the generated sample.
    pub class: u16,
    pub timestep: usize,
    pub sample_seed: u64,
    /// 0 = the checkpoint's k.
    pub k: usize,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            spec: None,
            class: 0,
            timestep: 50,
            sample_seed: 1,
            k: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// When set, overrides the seed of every section.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Written into resolved configs; ignored on input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool_version: Option<String>,
    pub paths: Paths,
    pub model: WorldConfig,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sweep: Option<SweepGrid>,
    pub ablate: AblateSection,
    pub analyze: AnalyzeSection,
    pub edit: EditSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| TideError::config(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TideError::io_at(path, e))?;
        toml::from_str(&text)
            .map_err(|e| TideError::config(format!("{}: {}", path.display(), e.message())))
    }

    /// Push the top-level seed and worker count into every section.
    pub fn resolve(&mut self) {
        if let Some(s) = self.seed {
            self.model.seed = s;
            self.dataset.extract.seed = s;
            self.train.seed = s;
        }
        if let Some(w) = self.workers {
            self.train.workers = w.max(1);
        }
        self.workers = Some(self.train.workers);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| TideError::config(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(
            ExperimentConfig::parse("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("[train]\nlearning_rte = 0.1").is_err());
        assert!(ExperimentConfig::parse("[model.dit]\ndepht = 3").is_err());
    }

    #[test]
    fn seed_override_reaches_sections() {
        let mut c = ExperimentConfig::parse("seed = 9\n[train]\nseed = 3\n").unwrap();
        c.resolve();
        assert_eq!(
            (c.model.seed, c.dataset.extract.seed, c.train.seed),
            (9, 9, 9)
        );
    }

    #[test]
    fn resolved_round_trip() {
        let mut c = ExperimentConfig::parse(
            "[train]\nn = 128\nk_final = 8\ntoken_sample_rate = \"1/4\"\n[sweep]\nlatent_multipliers = [1, 2]\nk_values = [4]\nrepeats = 2\n[edit.spec]\nrenormalize = true\n[edit.spec.op]\nop = \"erase\"\nindices = [1, 2]\n",
        )
        .unwrap();
        c.resolve();
        c.tool_version = Some("x".into());
        let again = ExperimentConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }
}
