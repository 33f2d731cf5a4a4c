//! JSON run configuration: sections `model`, `train`, `mask`, `fusion`,
//! `losses`, `eval`. Missing keys take their defaults; CLI flags override.

use std::path::Path;

use anyhow::{bail, Context, Result};
use homey_core::data::ClassTable;
use homey_core::detector::ModelConfig;
use homey_core::fusion::FusionParams;
use homey_core::losses::LossConfig;
use homey_core::masking::MaskParams;
use homey_core::metrics::EvalConfig;
use homey_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            input_size: m.input_size,
            channels: m.channels,
            seed: m.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub mask: MaskParams,
    pub fusion: FusionParams,
    pub losses: LossConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Ablation {
    /// Heuristic mask disabled.
    Mask,
    /// Risk-loss weight set to zero.
    Risk,
    /// Both of the above.
    Both,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn ablate(&mut self, a: Ablation) {
        if matches!(a, Ablation::Mask | Ablation::Both) {
            self.mask.enabled = false;
        }
        if matches!(a, Ablation::Risk | Ablation::Both) {
            self.losses.weights.lambda_risk = 0.0;
        }
    }

    /// Seeds both the initialisation and the shuffle.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn model_config(&self, classes: &ClassTable) -> ModelConfig {
        ModelConfig {
            input_size: self.model.input_size,
            channels: self.model.channels.clone(),
            num_classes: classes.len(),
            mask: self.mask.clone(),
            fusion: self.fusion.clone(),
            seed: self.model.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.losses.weights.validate()?;
        let e = &self.eval;
        for (name, v) in [("conf_floor", e.conf_floor), ("iou_floor", e.iou_floor), ("nms_iou", e.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                bail!("eval.{name} must lie in [0, 1], got {v}");
            }
        }
        Ok(())
    }

    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        let p = dir.join("config.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }
}
