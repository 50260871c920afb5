//! The experiment configuration file: one TOML document with sections for
//! every pipeline stage.

use crate::attack::DEFAULT_EPS_GRID;
use crate::error::{Error, Result};
use std::path::{Path, PathBuf};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetSection {
    /// Dataset path (class-folder tree or packed file), or "auto-synth" to
    /// generate the deterministic synthetic stand-in.
    pub source: String,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub seed: u64,
    /// Texture family of the synthetic generator.
    #[serde(default = "default_style")]
    pub synth_style: String,
    /// Generate the synthetic stand-in when `source` does not exist
    /// (profiles use this so named datasets degrade gracefully).
    #[serde(default)]
    pub fallback_synth: bool,
}

fn default_classes() -> usize {
    10
}
fn default_image_size() -> usize {
    32
}
fn default_style() -> String {
    "textures".into()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ThreatSection {
    #[serde(default = "default_threat_channels")]
    pub base_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Use an existing checkpoint instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_threat_channels() -> usize {
    16
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdvThreatSection {
    /// Training attack strength ε.
    pub epsilon: f64,
    /// PGD iterations inside the training loop.
    pub iterations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttackSection {
    pub iterations: usize,
    /// Strength grid; empty means the default 12-value grid.
    #[serde(default)]
    pub eps_grid: Vec<f64>,
    pub seed: u64,
}

impl AttackSection {
    pub fn grid(&self) -> Vec<f64> {
        if self.eps_grid.is_empty() {
            DEFAULT_EPS_GRID.to_vec()
        } else {
            self.eps_grid.clone()
        }
    }
}

/// One denoiser to build: architecture, head, loss, training knobs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DenoiserSection {
    pub arch: crate::backbone::ArchTag,
    #[serde(default = "default_k")]
    pub k: usize,
    pub loss: crate::training::LossKind,
    #[serde(default)]
    pub probe_layer: Option<String>,
    pub base_channels: usize,
    pub bottleneck_channels: usize,
    pub epochs: usize,
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Train only on these strengths (empty = the full attack grid).
    #[serde(default)]
    pub train_eps: Vec<f64>,
    #[serde(default = "default_true")]
    pub include_clean: bool,
    /// Stage-2 steps for the perturbation-aware protocol (y_dual only).
    #[serde(default)]
    pub fusion_epochs: Option<usize>,
    #[serde(default)]
    pub fusion_lr: Option<f32>,
    /// Stage-2 teacher signal (y_dual only); hard labels by default.
    #[serde(default)]
    pub soft_teacher: bool,
}

fn default_k() -> usize {
    crate::backbone::DEFAULT_FILTER_SIZE
}

impl DenoiserSection {
    pub fn backbone(&self) -> crate::backbone::BackboneConfig {
        crate::backbone::BackboneConfig {
            base_channels: self.base_channels,
            bottleneck_channels: self.bottleneck_channels,
        }
    }

    pub fn loss_spec(&self) -> crate::training::LossSpec {
        crate::training::LossSpec {
            kind: self.loss,
            probe_layer: self.probe_layer.clone(),
        }
    }

    pub fn train_config(&self) -> crate::training::TrainConfig {
        crate::training::TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            seed: self.seed,
            include_clean: self.include_clean,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvaluationSection {
    pub images_per_cell: usize,
    /// Evaluation strengths; empty means clean + the attack grid.
    #[serde(default)]
    pub eps_grid: Vec<f64>,
    #[serde(default = "default_iterations")]
    pub iteration_grid: Vec<usize>,
    #[serde(default = "default_sweep_eps")]
    pub iteration_sweep_epsilon: f64,
    pub seed: u64,
    /// Pipelines to evaluate; empty means every built denoiser plus the
    /// undefended baseline.
    #[serde(default)]
    pub pipelines: Vec<String>,
}

fn default_iterations() -> Vec<usize> {
    vec![40]
}
fn default_sweep_eps() -> f64 {
    0.3
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub threat: ThreatSection,
    #[serde(default)]
    pub adv_threat: Option<AdvThreatSection>,
    pub attack: AttackSection,
    #[serde(default)]
    pub denoisers: std::collections::BTreeMap<String, DenoiserSection>,
    pub evaluation: EvaluationSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(format!("config {}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.train_size == 0 || self.dataset.test_size == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.dataset.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of 16",
                self.dataset.image_size
            )));
        }
        let grid = self.attack.grid();
        for (name, d) in &self.denoisers {
            for eps in &d.train_eps {
                if !grid.iter().any(|g| (g - eps).abs() < f64::EPSILON) {
                    return Err(Error::Config(format!(
                        "denoiser {name} trains on eps {eps} outside the attack grid"
                    )));
                }
            }
            if d.arch != crate::backbone::ArchTag::UAdd && d.k % 2 == 0 {
                return Err(Error::Config(format!("denoiser {name}: even filter size")));
            }
        }
        if !self.evaluation.eps_grid.is_empty() {
            for eps in &self.evaluation.eps_grid {
                if *eps != 0.0 && !grid.iter().any(|g| (g - eps).abs() < f64::EPSILON) {
                    return Err(Error::Config(format!(
                        "evaluation eps {eps} not in the generated attack grid"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Evaluation strength grid: configured subset or clean + attack grid.
    pub fn eval_eps_grid(&self) -> Vec<f64> {
        if self.evaluation.eps_grid.is_empty() {
            let mut g = vec![0.0];
            g.extend(self.attack.grid());
            g
        } else {
            self.evaluation.eps_grid.clone()
        }
    }

    pub fn sweep_spec(&self) -> crate::evaluation::SweepSpec {
        crate::evaluation::SweepSpec {
            epsilon_grid: self.eval_eps_grid(),
            iteration_grid: self.evaluation.iteration_grid.clone(),
            iteration_sweep_epsilon: self.evaluation.iteration_sweep_epsilon,
            images_per_cell: self.evaluation.images_per_cell,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_profile_toml() {
        let cfg = ExperimentConfig::from_toml(crate::cli::profiles::SMOKE_TOML).unwrap();
        assert_eq!(cfg.dataset.train_size, 16);
        assert!(!cfg.denoisers.is_empty());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ExperimentConfig::from_toml(crate::cli::profiles::SMOKE_TOML).unwrap();
        cfg.dataset.image_size = 20;
        assert!(cfg.validate().is_err());

        let mut cfg2 = ExperimentConfig::from_toml(crate::cli::profiles::SMOKE_TOML).unwrap();
        if let Some(d) = cfg2.denoisers.values_mut().next() {
            d.train_eps = vec![0.123];
        }
        assert!(cfg2.validate().is_err());
    }
}
