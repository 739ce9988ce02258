//! Run configuration: one TOML table per pipeline stage, overridable from
//! the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ldpm_core::data::{DatasetSpec, Split};
use ldpm_core::generator::{GeneratorConfig, GeneratorTrainConfig};
use ldpm_core::pipeline::Ablation;
use ldpm_core::sampler::SamplerConfig;
use ldpm_core::sketcher::{RepairConfig, SketcherTrainConfig};
use ldpm_core::vae::{VaeConfig, VaeTrainConfig};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;

/// Architecture and optimizer settings of one trainable stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig<M, T> {
    pub model: M,
    pub train: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Acceleration factors at which test data are reconstructed. Masks are
    /// redrawn for every factor other than the dataset's own.
    pub afs: Vec<f64>,
    /// Split scored by `reconstruct`, `evaluate` and `ablate`; `val` is meant
    /// for choosing sampler settings without touching the test split.
    pub split: Split,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { afs: vec![4.0, 8.0], split: Split::Test }
    }
}

/// Everything needed to reproduce a run.
///
/// The top-level `seed` drives data simulation, training order and sampling
/// noise; [`PipelineConfig::resolved`] writes it into the dataset and
/// training tables. Model tables keep their own initialization seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    pub sketcher: StageConfig<RepairConfig, SketcherTrainConfig>,
    pub vae: StageConfig<VaeConfig, VaeTrainConfig>,
    pub generator: StageConfig<GeneratorConfig, GeneratorTrainConfig>,
    pub sampler: SamplerConfig,
    pub ablation: Ablation,
    pub evaluation: EvaluationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetSpec::default(),
            sketcher: StageConfig::default(),
            vae: StageConfig::default(),
            generator: StageConfig::default(),
            sampler: SamplerConfig::default(),
            ablation: Ablation::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_skm: bool,
    pub no_mrvae: bool,
    pub no_dss: bool,
    pub af: Option<f64>,
    pub steps: Option<usize>,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a TOML configuration, or the configuration recorded in a run
    /// manifest when the path ends in `.json`.
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: RunManifest =
                serde_json::from_str(&text).with_context(|| format!("parsing run manifest {}", path.display()))?;
            Ok(manifest.config)
        } else {
            Self::from_toml_str(&text).with_context(|| format!("parsing config {}", path.display()))
        }
    }

    pub fn to_toml_string(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Applies command-line overrides. Ablation flags only switch components off.
    pub fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.ablation.no_skm |= o.no_skm;
        self.ablation.no_mrvae |= o.no_mrvae;
        self.ablation.no_dss |= o.no_dss;
        if let Some(af) = o.af {
            if !(af >= 1.0 && af.is_finite()) {
                bail!("--af must be a finite number >= 1, got {af}");
            }
            self.dataset.af = af;
            self.evaluation.afs = vec![af];
        }
        if let Some(steps) = o.steps {
            self.sampler.steps = steps;
        }
        Ok(())
    }

    /// Copy with the top-level seed propagated into every derived seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.dataset.seed = self.seed;
        c.sketcher.train.seed = self.seed.wrapping_add(1);
        c.vae.train.seed = self.seed.wrapping_add(2);
        c.generator.train.seed = self.seed.wrapping_add(3);
        c
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.sampler.validate(self.generator.model.schedule.steps)?;
        if self.evaluation.afs.is_empty() {
            bail!("evaluation.afs must list at least one acceleration factor");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_fill_defaults() {
        let c = PipelineConfig::from_toml_str("seed = 3\n[vae.train]\nepochs = 2\n[sampler]\ng = 0.5\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.vae.train.epochs, 2);
        assert_eq!(c.vae.train.lr, VaeTrainConfig::default().lr);
        assert_eq!(c.sampler.g, 0.5);
        assert_eq!(c.sampler.p, 200);
        assert!(PipelineConfig::from_toml_str("[vae]\nunknown = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = PipelineConfig::default().resolved();
        let back = PipelineConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut c = PipelineConfig::default();
        c.apply(&Overrides { seed: Some(9), af: Some(8.0), steps: Some(20), no_dss: true, ..Default::default() })
            .unwrap();
        assert_eq!((c.seed, c.dataset.af, c.sampler.steps), (9, 8.0, 20));
        assert_eq!(c.evaluation.afs, [8.0]);
        assert!(c.ablation.no_dss && !c.ablation.no_skm);
        assert_eq!(c.resolved().dataset.seed, 9);
        assert!(c.apply(&Overrides { af: Some(0.5), ..Default::default() }).is_err());
    }
}
