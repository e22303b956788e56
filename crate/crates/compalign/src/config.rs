//! JSON experiment configuration. Unknown keys are rejected everywhere.

use std::path::Path;

use compalign_core::compression::{CompressionPlan, Method};
use compalign_core::data::{gen_blobs, gen_seg_blobs, BlobSpec, Dataset, SegSpec};
use compalign_core::losses::{LossConfig, LossTerm};
use compalign_core::metrics::IouMode;
use compalign_core::models::{build_classifier, build_segmenter};
use compalign_core::rng::{SeededRng, Stream};
use compalign_core::train::Schedule;
use compalign_core::weighting::{Scheme, WeightingParams};
use compalign_core::Network;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        train_per_class: usize,
        eval_per_class: usize,
        /// Optional per-class multipliers on the counts (class imbalance).
        #[serde(default)]
        class_ratios: Option<Vec<f64>>,
        dim: usize,
        spread: f64,
        seed: u64,
    },
    SegBlobs {
        n_train: usize,
        n_eval: usize,
        height: usize,
        width: usize,
        noise: f64,
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn generate(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs {
                classes,
                train_per_class,
                eval_per_class,
                class_ratios,
                dim,
                spread,
                seed,
            } => {
                let ratios = match class_ratios {
                    Some(r) if r.len() != *classes => {
                        return Err(Error::Config(format!("class_ratios needs {classes} entries")))
                    }
                    Some(r) if r.iter().any(|x| !(*x > 0.0)) => {
                        return Err(Error::Config("class_ratios must be positive".into()))
                    }
                    Some(r) => r.clone(),
                    None => vec![1.0; *classes],
                };
                let scale = |n: usize| -> Vec<usize> {
                    ratios.iter().map(|r| ((n as f64 * r).round() as usize).max(1)).collect()
                };
                Ok(gen_blobs(&BlobSpec {
                    classes: *classes,
                    train_per_class: scale(*train_per_class),
                    eval_per_class: scale(*eval_per_class),
                    dim: *dim,
                    spread: *spread,
                    seed: *seed,
                })?)
            }
            DatasetSpec::SegBlobs {
                n_train,
                n_eval,
                height,
                width,
                noise,
                seed,
            } => Ok(gen_seg_blobs(&SegSpec {
                n_train: *n_train,
                n_eval: *n_eval,
                height: *height,
                width: *width,
                noise: *noise,
                seed: *seed,
            })?
            .0),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchitectureSpec {
    Mlp { hidden: Vec<usize> },
    Conv { widths: Vec<usize> },
}

impl ArchitectureSpec {
    pub fn build(&self, dataset: &Dataset, seed: u64) -> Result<Network> {
        let mut rng = SeededRng::new(seed, Stream::Init);
        let in_shape = &dataset.train.inputs.shape()[1..];
        let net = match self {
            ArchitectureSpec::Mlp { hidden } => {
                if in_shape.len() != 1 {
                    return Err(Error::Config("mlp architecture needs vector inputs".into()));
                }
                build_classifier(in_shape[0], hidden, dataset.classes, &mut rng)?
            }
            ArchitectureSpec::Conv { widths } => {
                if in_shape.len() != 3 {
                    return Err(Error::Config("conv architecture needs image inputs".into()));
                }
                build_segmenter(in_shape[0], widths, dataset.classes, in_shape[1], in_shape[2], &mut rng)?
            }
        };
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossGrid {
    /// Each entry is one active loss subset, e.g. `["ce", "mse"]`.
    pub subsets: Vec<Vec<LossTerm>>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub kd_symmetric: bool,
}

fn default_temperature() -> f64 {
    4.0
}

impl LossGrid {
    pub fn loss_config(&self, subset: &[LossTerm]) -> Result<LossConfig> {
        let mut cfg = LossConfig::new(subset)?.with_temperature(self.temperature)?;
        cfg.kd_symmetric = self.kd_symmetric;
        Ok(cfg)
    }

    /// The seven nonempty subsets of {CE, MSE, CEPred}.
    pub fn all_subsets() -> Vec<Vec<LossTerm>> {
        let base = [LossTerm::Ce, LossTerm::Mse, LossTerm::CePred];
        (1u8..8)
            .map(|mask| base.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, t)| *t).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSpec {
    pub attribution_samples: Option<usize>,
    pub iou_mode: IouMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub architecture: ArchitectureSpec,
    pub train: Schedule,
    /// Fine-tuning schedule; defaults to the reference training schedule.
    #[serde(default)]
    pub finetune: Option<Schedule>,
    #[serde(default)]
    pub compression: CompressionPlan,
    pub losses: LossGrid,
    pub schemes: Vec<Scheme>,
    #[serde(default)]
    pub weighting: WeightingParams,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn finetune_schedule(&self) -> &Schedule {
        self.finetune.as_ref().unwrap_or(&self.train)
    }

    /// Checks every field before any computation starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name must be a nonempty path component");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.schemes.is_empty() {
            return bad("at least one weighting scheme is required");
        }
        if self.losses.subsets.is_empty() {
            return bad("at least one loss subset is required");
        }
        for subset in &self.losses.subsets {
            self.losses.loss_config(subset)?;
        }
        self.train.validate()?;
        self.finetune_schedule().validate()?;
        self.compression.validate()?;
        if self.weighting.period == 0 {
            return bad("weighting period must be at least 1");
        }
        match (&self.dataset, &self.architecture) {
            (DatasetSpec::Blobs { .. }, ArchitectureSpec::Mlp { .. })
            | (DatasetSpec::SegBlobs { .. }, ArchitectureSpec::Conv { .. }) => {}
            _ => return bad("architecture does not fit the dataset kind"),
        }
        if self.compression.method == Method::GroupSparsity {
            let probe = self.dataset.generate()?;
            let net = self.architecture.build(&probe, 0)?;
            for &l in &self.compression.adapter_layers {
                compalign_core::compression::attach_group_adapter(&net, l)?;
            }
        }
        Ok(())
    }
}

fn blobs_schedule(lr: f64) -> Schedule {
    Schedule {
        epochs: 60,
        lr,
        milestones: vec![40],
        lr_decay: 0.1,
        momentum: 0.9,
        weight_decay: 1e-4,
        batch_size: 64,
    }
}

/// Desk-scale classification experiment: 8 blob classes, 400/400 examples,
/// an MLP with two hidden layers of 64 units.
pub fn default_blobs_config() -> ExperimentConfig {
    ExperimentConfig {
        name: "blobs".into(),
        dataset: DatasetSpec::Blobs {
            classes: 8,
            train_per_class: 50,
            eval_per_class: 50,
            class_ratios: None,
            dim: 2,
            spread: 0.3,
            seed: 2021,
        },
        architecture: ArchitectureSpec::Mlp { hidden: vec![64, 64] },
        train: blobs_schedule(0.05),
        finetune: Some(blobs_schedule(0.02)),
        compression: CompressionPlan::default(),
        losses: LossGrid {
            subsets: LossGrid::all_subsets(),
            temperature: 4.0,
            kd_symmetric: false,
        },
        schemes: vec![Scheme::Uniform, Scheme::Learnable, Scheme::SoftAdapt],
        weighting: WeightingParams::default(),
        seeds: (0..10).collect(),
        evaluation: EvaluationSpec::default(),
    }
}

fn seg_schedule(epochs: usize, lr: f64, milestone: usize) -> Schedule {
    Schedule {
        epochs,
        lr,
        milestones: vec![milestone],
        lr_decay: 0.1,
        momentum: 0.9,
        weight_decay: 1e-4,
        batch_size: 16,
    }
}

/// Desk-scale segmentation experiment: 64 noisy 16x16 ellipse images, a
/// three-layer conv net, 8 rewind steps.
pub fn default_seg_config() -> ExperimentConfig {
    ExperimentConfig {
        name: "seg".into(),
        dataset: DatasetSpec::SegBlobs {
            n_train: 64,
            n_eval: 64,
            height: 16,
            width: 16,
            noise: 0.5,
            seed: 2021,
        },
        architecture: ArchitectureSpec::Conv { widths: vec![12, 12] },
        train: seg_schedule(30, 0.05, 20),
        finetune: Some(seg_schedule(30, 0.01, 20)),
        compression: CompressionPlan {
            num_steps: 8,
            finetune_epochs_per_step: 10,
            ..CompressionPlan::default()
        },
        losses: LossGrid {
            subsets: vec![vec![LossTerm::Ce], vec![LossTerm::Mse], vec![LossTerm::Ce, LossTerm::Mse]],
            temperature: 4.0,
            kd_symmetric: false,
        },
        schemes: vec![Scheme::Uniform],
        weighting: WeightingParams::default(),
        seeds: (0..10).collect(),
        evaluation: EvaluationSpec::default(),
    }
}
