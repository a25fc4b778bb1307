//! Experiment configuration: one human-editable JSON document per
//! experiment; sweeps expand into child configs with inherited seeds.

use std::fs;
use std::path::Path;

use promptveil_core::attack::{ContextKind, DEFAULT_EPSILON};
use promptveil_core::container::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    /// One full attack/eval run per seed; reports average across them.
    pub seeds: Vec<u64>,
    /// 32 or 64.
    pub precision: u32,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub defense: DefenseSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusSection {
    pub seed: u64,
    pub image_size: usize,
    pub classes: usize,
    /// Pre-training pool size per class.
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    #[serde(default = "default_conv_channels")]
    pub conv_channels: [usize; 3],
    #[serde(default = "default_tau")]
    pub tau_init: f64,
}

fn default_conv_channels() -> [usize; 3] {
    [8, 16, 32]
}

fn default_tau() -> f64 {
    0.07
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttackSection {
    /// Corpus-level target label; absent means the first seen class.
    #[serde(default)]
    pub target_class: Option<usize>,
    pub shots: usize,
    pub warmup_epochs: usize,
    pub joint_epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub epsilon: f64,
    #[serde(default)]
    pub context: ContextKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    SeenUnseen,
    CrossDataset,
    CrossDomain,
    Retrieval,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::SeenUnseen => "seen-unseen",
            Protocol::CrossDataset => "cross-dataset",
            Protocol::CrossDomain => "cross-domain",
            Protocol::Retrieval => "retrieval",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalSection {
    pub protocols: Vec<Protocol>,
    /// Drop target-class images from the ASR denominator.
    #[serde(default)]
    pub asr_excludes_target: bool,
    #[serde(default = "default_stealth_pairs")]
    pub stealth_pairs: usize,
    #[serde(default = "default_similarity_samples")]
    pub similarity_samples: usize,
}

fn default_stealth_pairs() -> usize {
    100
}

fn default_similarity_samples() -> usize {
    40
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DefenseSection {
    pub nc_steps: usize,
    pub nc_images: usize,
    pub nc_lambda: f64,
    /// Independent reconstruction seeds for the clean-model scan.
    pub nc_seeds: Vec<u64>,
    pub clp_u_grid: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct SweepSection {
    #[serde(default)]
    pub epsilon: Vec<f64>,
    #[serde(default)]
    pub shots: Vec<usize>,
    #[serde(default)]
    pub context_len: Vec<usize>,
    /// Pairs of (label, warmup_epochs); e.g. warm-up on/off ablation.
    #[serde(default)]
    pub warmup_epochs: Vec<usize>,
}

impl ExperimentConfig {
    /// The default desk-scale experiment: 16 classes, 16-shot, 3 seeds.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            name: "desk".into(),
            seeds: vec![1, 2, 3],
            precision: 32,
            corpus: CorpusSection {
                seed: 11,
                image_size: 32,
                classes: 16,
                samples_per_class: 40,
                test_samples_per_class: 20,
            },
            model: ModelSection {
                feature_dim: 64,
                embed_dim: 64,
                context_len: 4,
                conv_channels: default_conv_channels(),
                tau_init: 0.07,
            },
            pretrain: PretrainSection { epochs: 24, batch_size: 64, learning_rate: 2.0 },
            attack: AttackSection {
                target_class: None,
                shots: 16,
                warmup_epochs: 3,
                joint_epochs: 40,
                alpha: 0.1,
                beta: 0.05,
                batch_size: 16,
                epsilon: DEFAULT_EPSILON,
                context: ContextKind::Generated,
            },
            eval: EvalSection {
                protocols: vec![
                    Protocol::SeenUnseen,
                    Protocol::CrossDataset,
                    Protocol::CrossDomain,
                    Protocol::Retrieval,
                ],
                asr_excludes_target: false,
                stealth_pairs: default_stealth_pairs(),
                similarity_samples: default_similarity_samples(),
            },
            defense: DefenseSection {
                nc_steps: 150,
                nc_images: 8,
                nc_lambda: 0.01,
                nc_seeds: vec![101, 102, 103, 104, 105],
                clp_u_grid: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0],
            },
            sweep: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&raw).map_err(|e| {
            HarnessError::Config(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| HarnessError::Io(e.to_string()))?;
        }
        fs::write(path, json).map_err(|e| HarnessError::Io(e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must be non-empty".into()));
        }
        if self.precision != 32 && self.precision != 64 {
            return Err(HarnessError::Config(format!("precision must be 32 or 64, got {}", self.precision)));
        }
        if self.corpus.classes < 2 {
            return Err(HarnessError::Config("corpus.classes must be >= 2".into()));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.epsilon.is_empty()
                && sweep.shots.is_empty()
                && sweep.context_len.is_empty()
                && sweep.warmup_epochs.is_empty()
            {
                return Err(HarnessError::Config("sweep present but every axis is empty".into()));
            }
        }
        Ok(())
    }

    /// Hash of the canonical config JSON with the seed list removed, so
    /// runs that differ only by seed share a hash.
    pub fn hash_modulo_seeds(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("seeds");
        }
        sha256_hex(serde_json::to_string(&v).expect("canonical json").as_bytes())
    }

    /// Expand the sweep axes into named child configs (cartesian over the
    /// populated axes), seeds inherited.
    pub fn expand_sweep(&self) -> Vec<(String, ExperimentConfig)> {
        let Some(sweep) = &self.sweep else {
            return vec![(self.name.clone(), self.clone())];
        };
        let eps: Vec<Option<f64>> = if sweep.epsilon.is_empty() {
            vec![None]
        } else {
            sweep.epsilon.iter().copied().map(Some).collect()
        };
        let shots: Vec<Option<usize>> = if sweep.shots.is_empty() {
            vec![None]
        } else {
            sweep.shots.iter().copied().map(Some).collect()
        };
        let ctx: Vec<Option<usize>> = if sweep.context_len.is_empty() {
            vec![None]
        } else {
            sweep.context_len.iter().copied().map(Some).collect()
        };
        let warm: Vec<Option<usize>> = if sweep.warmup_epochs.is_empty() {
            vec![None]
        } else {
            sweep.warmup_epochs.iter().copied().map(Some).collect()
        };

        let mut out = Vec::new();
        for &e in &eps {
            for &s in &shots {
                for &c in &ctx {
                    for &w in &warm {
                        let mut child = self.clone();
                        child.sweep = None;
                        let mut tag = String::new();
                        if let Some(e) = e {
                            child.attack.epsilon = e;
                            tag.push_str(&format!("eps={e:.6}_"));
                        }
                        if let Some(s) = s {
                            child.attack.shots = s;
                            tag.push_str(&format!("shots={s}_"));
                        }
                        if let Some(c) = c {
                            child.model.context_len = c;
                            tag.push_str(&format!("ctx={c}_"));
                        }
                        if let Some(w) = w {
                            child.attack.warmup_epochs = w;
                            tag.push_str(&format!("warmup={w}_"));
                        }
                        let tag = tag.trim_end_matches('_').to_string();
                        child.name = format!("{}_{}", self.name, tag);
                        out.push((tag, child));
                    }
                }
            }
        }
        out
    }
}
