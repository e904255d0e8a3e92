//! Experiment configuration: a TOML document mapping onto the training
//! setup. Unknown keys are rejected; every defaulted value is echoed into
//! the run's output directory so results are self-describing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cpmlho_core::cuts::{CutRefresh, PenaltyConfig};
use cpmlho_core::data::ExperimentData;
use cpmlho_core::model::{LossKind, ModelSpec};
use cpmlho_core::training::{ThetaMode, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "d_arch")]
    pub arch: Arch,
    #[serde(default = "d_loss")]
    pub loss: Loss,
    #[serde(default)]
    pub seed: u64,
}

fn d_arch() -> Arch {
    Arch::Mlp
}

fn d_loss() -> Loss {
    Loss::CrossEntropy
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            arch: Arch::Mlp,
            loss: Loss::CrossEntropy,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Cnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    SquaredError,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Optional digest pins; verified against the loaded files when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels_sha256: Option<String>,
}

fn default_val_fraction() -> f64 {
    1.0 / 6.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_hidden")]
    pub hidden: [usize; 2],
    #[serde(default = "d_channels")]
    pub channels: [usize; 2],
    #[serde(default = "d_dropout_init")]
    pub dropout_init: [f64; 3],
    #[serde(default = "d_holes_init")]
    pub cutout_holes_init: f64,
    #[serde(default = "d_holes_max")]
    pub cutout_holes_max: f64,
    #[serde(default = "d_length_init")]
    pub cutout_length_init: f64,
    #[serde(default = "d_length_max")]
    pub cutout_length_max: f64,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
}

fn d_hidden() -> [usize; 2] {
    [300, 100]
}

fn d_channels() -> [usize; 2] {
    [16, 32]
}

fn d_dropout_init() -> [f64; 3] {
    [0.5, 0.5, 0.5]
}

fn d_holes_init() -> f64 {
    1.0
}

fn d_holes_max() -> f64 {
    3.0
}

fn d_length_init() -> f64 {
    8.0
}

fn d_length_max() -> f64 {
    16.0
}

fn d_temperature() -> f64 {
    0.5
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: [300, 100],
            channels: [16, 32],
            dropout_init: [0.5, 0.5, 0.5],
            cutout_holes_init: 1.0,
            cutout_holes_max: 3.0,
            cutout_length_init: 8.0,
            cutout_length_max: 16.0,
            temperature: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_alpha_we")]
    pub alpha_we: f64,
    #[serde(default = "d_alpha_wh")]
    pub alpha_wh: f64,
    #[serde(default = "d_alpha_lambda")]
    pub alpha_lambda: f64,
    #[serde(default = "d_theta")]
    pub theta: f64,
    #[serde(default = "d_mu")]
    pub mu: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_ispo")]
    pub inner_steps_per_outer: u64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub disable_cuts: bool,
    #[serde(default)]
    pub disable_hypernet: bool,
    #[serde(default = "d_theta_mode")]
    pub theta_mode: ThetaModeArg,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Rebuild the cut every N inner steps; absent means once per epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cut_refresh_steps: Option<u64>,
}

fn d_alpha_we() -> f64 {
    0.01
}

fn d_alpha_wh() -> f64 {
    0.01
}

fn d_alpha_lambda() -> f64 {
    0.003
}

fn d_theta() -> f64 {
    1.0
}

fn d_mu() -> f64 {
    0.1
}

fn d_eps() -> f64 {
    1e-3
}

fn d_ispo() -> u64 {
    2
}

fn d_epochs() -> usize {
    10
}

fn d_batch() -> usize {
    128
}

fn d_theta_mode() -> ThetaModeArg {
    ThetaModeArg::Mixed
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            alpha_we: 0.01,
            alpha_wh: 0.01,
            alpha_lambda: 0.003,
            theta: 1.0,
            mu: 0.1,
            eps: 1e-3,
            inner_steps_per_outer: 2,
            epochs: 10,
            batch_size: 128,
            disable_cuts: false,
            disable_hypernet: false,
            theta_mode: ThetaModeArg::Mixed,
            grad_clip: None,
            cut_refresh_steps: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaModeArg {
    Mixed,
    ValOnly,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = match self.experiment.arch {
            Arch::Mlp => ModelSpec::mlp((self.model.hidden[0], self.model.hidden[1])),
            Arch::Cnn => ModelSpec::cnn(
                (self.model.channels[0], self.model.channels[1]),
                self.model.cutout_holes_max,
                self.model.cutout_length_max,
            ),
        };
        spec.temperature = self.model.temperature;
        spec
    }

    pub fn lambda_inits(&self) -> Vec<f64> {
        let mut inits = self.model.dropout_init.to_vec();
        if self.experiment.arch == Arch::Cnn {
            inits.push(self.model.cutout_holes_init);
            inits.push(self.model.cutout_length_init);
        }
        inits
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha_we: self.train.alpha_we,
            alpha_wh: self.train.alpha_wh,
            alpha_lambda: self.train.alpha_lambda,
            theta: self.train.theta,
            penalty: PenaltyConfig {
                mu: self.train.mu,
                eps: self.train.eps,
                refresh: match self.train.cut_refresh_steps {
                    Some(n) => CutRefresh::EverySteps(n),
                    None => CutRefresh::PerEpoch,
                },
            },
            inner_steps_per_outer: self.train.inner_steps_per_outer,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            loss: match self.experiment.loss {
                Loss::CrossEntropy => LossKind::CrossEntropy,
                Loss::SquaredError => LossKind::SquaredError,
            },
            seed: self.experiment.seed,
            val_fraction: self.data.val_fraction,
            disable_cuts: self.train.disable_cuts,
            theta_mode: match self.train.theta_mode {
                ThetaModeArg::Mixed => ThetaMode::Mixed,
                ThetaModeArg::ValOnly => ThetaMode::ValOnly,
            },
            disable_hypernet: self.train.disable_hypernet,
            grad_clip: self.train.grad_clip,
        }
    }

    pub fn load_data(&self) -> Result<ExperimentData> {
        let data = ExperimentData::load(
            &self.data.train_images,
            &self.data.train_labels,
            &self.data.test_images,
            &self.data.test_labels,
        )?;
        let checks = [
            (&self.data.train_images_sha256, &data.train.provenance.images_sha256, "train images"),
            (&self.data.train_labels_sha256, &data.train.provenance.labels_sha256, "train labels"),
            (
                &self.data.test_images_sha256,
                &data.test.for_final_evaluation().provenance.images_sha256,
                "test images",
            ),
            (
                &self.data.test_labels_sha256,
                &data.test.for_final_evaluation().provenance.labels_sha256,
                "test labels",
            ),
        ];
        for (want, got, what) in checks {
            if let Some(want) = want {
                if want != got {
                    bail!("{what} digest mismatch: expected {want}, file has {got}");
                }
            }
        }
        Ok(data)
    }
}

/// Keys accepted by `sweep --param`.
pub const SWEEPABLE_KEYS: &[&str] = &[
    "dropout0_init",
    "dropout1_init",
    "dropout2_init",
    "cutout_holes_init",
    "cutout_length_init",
    "alpha_we",
    "alpha_wh",
    "alpha_lambda",
    "theta",
    "mu",
    "eps",
    "temperature",
    "inner_steps_per_outer",
    "epochs",
    "batch_size",
    "seed",
];

/// Apply one sweep assignment to a copy of the config.
pub fn apply_sweep_value(config: &mut ExperimentConfig, param: &str, value: f64) -> Result<()> {
    let as_usize = |v: f64| -> Result<usize> {
        if v < 0.0 || v.fract() != 0.0 {
            bail!("{param} needs a nonnegative integer, got {v}");
        }
        Ok(v as usize)
    };
    match param {
        "dropout0_init" => config.model.dropout_init[0] = value,
        "dropout1_init" => config.model.dropout_init[1] = value,
        "dropout2_init" => config.model.dropout_init[2] = value,
        "cutout_holes_init" => config.model.cutout_holes_init = value,
        "cutout_length_init" => config.model.cutout_length_init = value,
        "alpha_we" => config.train.alpha_we = value,
        "alpha_wh" => config.train.alpha_wh = value,
        "alpha_lambda" => config.train.alpha_lambda = value,
        "theta" => config.train.theta = value,
        "mu" => config.train.mu = value,
        "eps" => config.train.eps = value,
        "temperature" => config.model.temperature = value,
        "inner_steps_per_outer" => config.train.inner_steps_per_outer = as_usize(value)? as u64,
        "epochs" => config.train.epochs = as_usize(value)?,
        "batch_size" => config.train.batch_size = as_usize(value)?,
        "seed" => config.experiment.seed = as_usize(value)? as u64,
        other => bail!(
            "unknown sweep parameter `{other}`; sweepable keys: {}",
            SWEEPABLE_KEYS.join(", ")
        ),
    }
    Ok(())
}
