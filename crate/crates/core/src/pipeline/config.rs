use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::eval::DetectEvalConfig;
use crate::losses::{DetectionLossWeights, DistanceMode};
use crate::model::ModelConfig;
use crate::numeric::{AdamConfig, OptimizerSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PretrainFlow,
    TrainDetect,
    Alternate,
    EvalFlow,
    EvalDetect,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainFlow => "pretrain-flow",
            Stage::TrainDetect => "train-detect",
            Stage::Alternate => "alternate",
            Stage::EvalFlow => "eval-flow",
            Stage::EvalDetect => "eval-detect",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Stage::PretrainFlow,
            Stage::TrainDetect,
            Stage::Alternate,
            Stage::EvalFlow,
            Stage::EvalDetect,
        ]
        .into_iter()
        .find(|st| st.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Where scenes come from. Training, validation and test scenes are drawn
/// from disjoint id ranges of one generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub generator: GeneratorConfig,
    /// Dataset seed; scene `id` is generated from `(generator, seed, id)`.
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Optional id list overriding `train_scenes`; its sidecar must match
    /// the generator hash and seed.
    pub manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            seed: 1234,
            train_scenes: 200,
            val_scenes: 8,
            test_scenes: 32,
            manifest: None,
        }
    }
}

/// First id of the validation range.
pub const VAL_ID_BASE: u64 = 1 << 40;
/// First id of the test range.
pub const TEST_ID_BASE: u64 = 2 << 40;

impl DataConfig {
    pub fn val_ids(&self) -> Vec<u64> {
        (0..self.val_scenes as u64).map(|i| VAL_ID_BASE + i).collect()
    }

    pub fn test_ids(&self) -> Vec<u64> {
        (0..self.test_scenes as u64).map(|i| TEST_ID_BASE + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.train_scenes == 0 && self.manifest.is_none() {
            return Err(Error::Config("train_scenes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub steps: usize,
    /// Frame pairs per step.
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub distance: DistanceMode,
    /// Validation every this many steps and after the last one.
    pub val_every: usize,
    /// Stop after this many validations without improvement; `None` runs
    /// the full step budget.
    pub patience: Option<usize>,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            optimizer: OptimizerSpec::Adam(AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            }),
            distance: DistanceMode::Squared,
            val_every: 100,
            patience: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub weights: DetectionLossWeights,
    pub val_every: usize,
    pub patience: Option<usize>,
    pub eval: DetectEvalConfig,
}

impl Default for DetectTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 1,
            optimizer: OptimizerSpec::Adam(AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            }),
            weights: DetectionLossWeights::default(),
            val_every: 100,
            patience: None,
            eval: DetectEvalConfig::default(),
        }
    }
}

/// One run as read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    /// Fraction of training scenes whose labels detection training may use.
    pub label_fraction: f64,
    pub init_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub flow: FlowTrainConfig,
    pub detect: DetectTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::PretrainFlow,
            seed: 0,
            label_fraction: 1.0,
            init_checkpoint: None,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            flow: FlowTrainConfig::default(),
            detect: DetectTrainConfig::default(),
        }
    }
}

fn check_optimizer(what: &str, o: &OptimizerSpec) -> Result<()> {
    let lr = match o {
        OptimizerSpec::Sgd { lr } => *lr,
        OptimizerSpec::Adam(a) => {
            if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
                return Err(Error::Config(format!("{what}: Adam betas must lie in [0, 1)")));
            }
            a.lr
        }
    };
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("{what}: learning rate must be positive")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label_fraction {} not in (0, 1]",
                self.label_fraction
            )));
        }
        self.model.validate()?;
        self.data.validate()?;
        if self.model.detect.num_classes != self.data.generator.num_classes {
            return Err(Error::Config(format!(
                "detector has {} classes but the generator emits {}",
                self.model.detect.num_classes, self.data.generator.num_classes
            )));
        }
        for (what, steps, batch, every) in [
            ("flow", self.flow.steps, self.flow.batch_size, self.flow.val_every),
            ("detect", self.detect.steps, self.detect.batch_size, self.detect.val_every),
        ] {
            if steps == 0 || batch == 0 || every == 0 {
                return Err(Error::Config(format!(
                    "{what}: steps, batch_size and val_every must be positive"
                )));
            }
        }
        check_optimizer("flow", &self.flow.optimizer)?;
        check_optimizer("detect", &self.detect.optimizer)?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml_str(
            "stage = \"train-detect\"\nlabel_fraction = 0.05\n[flow]\nsteps = 7\n[flow.optimizer]\nkind = \"sgd\"\nlr = 0.01\n",
        )
        .unwrap();
        assert_eq!(c.stage, Stage::TrainDetect);
        assert_eq!(c.flow.steps, 7);
        assert_eq!(c.flow.optimizer, OptimizerSpec::Sgd { lr: 0.01 });
        assert_eq!(c.model.backbone.n_sample, 2048);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str("label_fraction = 0.0").is_err());
        assert!(RunConfig::from_toml_str("label_fraction = 1.5").is_err());
        assert!(RunConfig::from_toml_str("[flow]\nsteps = 0").is_err());
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("stage = \"nope\"").is_err());
    }

    #[test]
    fn id_ranges_disjoint() {
        let d = DataConfig::default();
        let v = d.val_ids();
        let t = d.test_ids();
        assert!(v.iter().all(|i| *i >= d.train_scenes as u64 && !t.contains(i)));
    }
}
