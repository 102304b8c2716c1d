//! Training loop, evaluation, component ablation and missingness diagnostics.

mod ablation;
mod metrics;
mod optim;
mod split;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderConfig, PriorNetModel};
use crate::clip::{read_dataset, ClipMeta, ClipTensor};
use crate::error::{Error, Result};
use crate::lora::{attach_adapters, LoraConfig};
use crate::objective::LossHyperParams;
use crate::synth::{generate_dataset, SynthSpec};

pub use ablation::{run_ablation, run_ablation_on, variant_name, AblationRow, AblationRun, ABLATION_ORDER};
pub use metrics::{group_report, metrics_from_predictions, ClassStats, GroupRow, MissingnessGroupReport, MetricsReport};
pub use optim::{optimizer_step, AdamSettings, AdamState};
pub use split::{subject_disjoint_split, Split};
pub use train::{
    evaluate, fit, missingness_diagnostic, predict, prepare_inputs, train, train_on, EpochLoss, ModelInput, TrainOutcome,
};

/// The three switchable components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Zero frames for failed detections; otherwise the nearest detected frame is repeated.
    pub placeholders: bool,
    /// Q/K/V adapters on the placement policy's blocks; otherwise only the head trains.
    pub prior_lora: bool,
    /// Evidential + uncertainty-weighted loss; otherwise plain cross-entropy.
    pub advanced_objective: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::new(true, true, true)
    }
}

impl Toggles {
    pub const fn new(placeholders: bool, prior_lora: bool, advanced_objective: bool) -> Self {
        Self {
            placeholders,
            prior_lora,
            advanced_objective,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthSpec),
    /// Directory of clip files.
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data: DataSource,
    pub encoder: EncoderConfig,
    pub lora: LoraConfig,
    pub loss: LossHyperParams,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: AdamSettings,
    pub seed: u64,
    pub train_fraction: f64,
    pub toggles: Toggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synth(SynthSpec::default()),
            encoder: EncoderConfig::default(),
            lora: LoraConfig::default(),
            loss: LossHyperParams::default(),
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: AdamSettings::default(),
            seed: 0,
            train_fraction: 0.8,
            toggles: Toggles::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0) {
            return Err(Error::invalid("optimizer needs β₁, β₂ ∈ [0, 1) and ε > 0"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction must lie in (0, 1)"));
        }
        self.encoder.validate()?;
        self.loss.validate()?;
        if self.toggles.prior_lora {
            self.lora.policy.adapted_layer_indices(self.encoder.num_blocks)?;
            if self.lora.rank == 0 || self.lora.rank > self.encoder.d_model {
                return Err(Error::invalid(format!("LoRA rank {} must lie in [1, d]", self.lora.rank)));
            }
        }
        if let DataSource::Synth(spec) = &self.data {
            spec.validate()?;
            let e = &self.encoder;
            if (spec.clip_len, spec.height, spec.width, spec.num_classes) != (e.clip_len, e.image_size, e.image_size, e.num_classes) {
                return Err(Error::invalid(format!(
                    "synthetic clips ({}×{}×{}, {} classes) do not match the encoder ({}×{}×{}, {} classes)",
                    spec.clip_len, spec.height, spec.width, spec.num_classes, e.clip_len, e.image_size, e.image_size, e.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Loss actually optimised: the configured one, or cross-entropy when the
    /// advanced objective is switched off.
    pub fn objective(&self) -> LossHyperParams {
        if self.toggles.advanced_objective {
            self.loss.clone()
        } else {
            LossHyperParams {
                epsilon: self.loss.epsilon,
                evidence_cap: self.loss.evidence_cap,
                ..LossHyperParams::ce_only()
            }
        }
    }

    /// Same recipe under another seed; the backbone, adapters, split, shuffling
    /// and any synthetic data all follow it.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.seed = seed;
        out.encoder.seed = seed;
        if let DataSource::Synth(spec) = &mut out.data {
            spec.seed = seed;
        }
        out
    }

    pub fn with_toggles(&self, toggles: Toggles) -> Self {
        Self {
            toggles,
            ..self.clone()
        }
    }

    /// Frozen backbone plus zero-output adapters when Prior-LoRA is on.
    pub fn build_model(&self) -> Result<PriorNetModel> {
        let mut model = PriorNetModel::new(self.encoder.clone())?;
        if self.toggles.prior_lora {
            attach_adapters(&mut model, &self.lora, self.seed)?;
        }
        Ok(model)
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synth(spec) => Dataset::synthetic(spec),
            DataSource::Path(dir) => Dataset::load(dir),
        }
    }
}

/// Clips with their labels and metadata, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clips: Vec<ClipTensor>,
    pub metas: Vec<ClipMeta>,
}

impl Dataset {
    pub fn new(clips: Vec<ClipTensor>, metas: Vec<ClipMeta>) -> Result<Self> {
        if clips.len() != metas.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: vec![clips.len()],
                right: vec![metas.len()],
            });
        }
        Ok(Self { clips, metas })
    }

    pub fn synthetic(spec: &SynthSpec) -> Result<Self> {
        let (clips, metas) = generate_dataset(spec)?;
        Self::new(clips, metas)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (clips, metas) = read_dataset(dir)?;
        Self::new(clips, metas)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.metas.iter().map(|m| m.label).collect()
    }

    pub fn subset(&self, ids: &[usize]) -> Self {
        Self {
            clips: ids.iter().map(|&i| self.clips[i].clone()).collect(),
            metas: ids.iter().map(|&i| self.metas[i].clone()).collect(),
        }
    }

    /// The clips as a model with the given placeholder setting sees them.
    /// Metadata keeps the original detection failures.
    pub fn with_placeholders(&self, placeholders: bool) -> Self {
        if placeholders {
            return self.clone();
        }
        Self {
            clips: self.clips.iter().map(ClipTensor::repeat_nearest_detected).collect(),
            metas: self.metas.clone(),
        }
    }
}
