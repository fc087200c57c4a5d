//! Run configuration, read from TOML.
//!
//! A file names a `profile` (`desk` or `paper`) and overrides any subset of
//! its keys; missing keys keep the profile's values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hicom_core::body_face::AttributeConfig;
use hicom_core::fusion::FusionConfig;
use hicom_core::gaze::GazeConfig;
use hicom_core::inter_face::InterFaceConfig;
use hicom_core::model::CropPolicy;
use hicom_core::optim::AdamConfig;
use hicom_core::scene_motion::SceneMotionConfig;
use hicom_core::synth::{Canvas, PerturbationKind};
use serde::{Deserialize, Serialize};

use crate::generate::DataConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

/// Per-module training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Training items drawn per epoch; `None` uses every item once.
    pub samples_per_epoch: Option<usize>,
    /// Overrides the optimizer's initial learning rate for this module.
    pub lr: Option<f64>,
    /// Random mirror and time reversal of training clips (M1 only).
    #[serde(default)]
    pub augment: bool,
}

impl TrainSettings {
    fn new(
        epochs: usize,
        batch_size: usize,
        samples_per_epoch: Option<usize>,
        lr: Option<f64>,
    ) -> Self {
        Self {
            epochs,
            batch_size,
            samples_per_epoch,
            lr,
            augment: false,
        }
    }

    pub fn validate(&self, module: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            bail!("training.{module}: epochs and batch_size must be >= 1");
        }
        if self.samples_per_epoch == Some(0) {
            bail!("training.{module}: samples_per_epoch must be >= 1");
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                bail!("training.{module}: lr must be a positive number");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub m1: TrainSettings,
    pub m2: TrainSettings,
    pub gaze: TrainSettings,
    pub face_attributes: TrainSettings,
    pub body_attributes: TrainSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub scene_motion: SceneMotionConfig,
    pub inter_face: InterFaceConfig,
    pub gaze: GazeConfig,
    pub face_attributes: AttributeConfig,
    pub body_attributes: AttributeConfig,
    /// Minimum attribute confidence for a body-face mismatch to count.
    pub attribute_confidence_floor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub perturbations: Vec<PerturbationKind>,
    pub severities: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainConfig {
    /// HTTP endpoint receiving the prompt as JSON; `None` runs offline.
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    /// Extra model identifier passed through in the request body.
    pub model: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Dataset root (manifests and frames).
    pub data_dir: PathBuf,
    /// Checkpoints, logs, reports and plots go here.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub crops: CropPolicy,
    pub models: ModelsConfig,
    pub optimizer: AdamConfig,
    pub training: TrainingConfig,
    pub fusion: FusionConfig,
    pub evaluation: EvalConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    /// CPU-scale profile: small inputs and nets, a handful of epochs.
    pub fn desk() -> Self {
        let lr = Some(1e-3);
        Self {
            profile: Profile::Desk,
            seed: 0,
            data_dir: "data/synth".into(),
            out_dir: "runs/desk".into(),
            data: DataConfig {
                clips: 1000,
                seed: 0,
                ratios: Default::default(),
                canvas: Canvas::default(),
            },
            crops: CropPolicy::desk(),
            models: ModelsConfig {
                scene_motion: SceneMotionConfig::desk(),
                inter_face: InterFaceConfig::desk(),
                gaze: GazeConfig::desk(),
                face_attributes: AttributeConfig::desk_face(),
                body_attributes: AttributeConfig::desk_body(),
                attribute_confidence_floor: None,
            },
            optimizer: AdamConfig {
                decay_every: 10,
                ..AdamConfig::default()
            },
            training: TrainingConfig {
                m1: TrainSettings {
                    augment: true,
                    ..TrainSettings::new(15, 4, None, lr)
                },
                m2: TrainSettings::new(15, 4, Some(800), lr),
                gaze: TrainSettings::new(15, 16, Some(4000), lr),
                face_attributes: TrainSettings::new(15, 16, Some(3000), lr),
                body_attributes: TrainSettings::new(15, 16, Some(4000), lr),
            },
            fusion: FusionConfig::default(),
            evaluation: EvalConfig {
                perturbations: PerturbationKind::ALL.to_vec(),
                severities: vec![1, 3, 5],
            },
            explain: ExplainConfig {
                endpoint: None,
                timeout_ms: 10_000,
                model: None,
            },
        }
    }

    /// Full-size inputs and the published optimizer schedule.
    pub fn paper() -> Self {
        let full = |epochs, batch| TrainSettings::new(epochs, batch, None, None);
        Self {
            profile: Profile::Paper,
            out_dir: "runs/paper".into(),
            data: DataConfig {
                canvas: Canvas {
                    width: 1280,
                    height: 720,
                    frames: 8,
                    fps: 25.0,
                },
                ..DataConfig::default()
            },
            crops: CropPolicy::default(),
            models: ModelsConfig {
                scene_motion: SceneMotionConfig::default(),
                inter_face: InterFaceConfig::default(),
                gaze: GazeConfig::default(),
                face_attributes: AttributeConfig::default(),
                body_attributes: AttributeConfig::default(),
                attribute_confidence_floor: None,
            },
            optimizer: AdamConfig::default(),
            training: TrainingConfig {
                m1: full(120, 8),
                m2: full(120, 8),
                gaze: full(120, 32),
                face_attributes: full(120, 32),
                body_attributes: full(120, 32),
            },
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Parses TOML text, layering it over the profile it names.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().context("parsing config TOML")?;
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(v) => Profile::deserialize(v.clone()).context("reading `profile`")?,
        };
        let mut base = toml::Table::try_from(Self::for_profile(profile))?;
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.fusion.validate()?;
        self.models.scene_motion.validate()?;
        self.models.inter_face.validate()?;
        self.data.ratios.counts(self.data.clips)?;
        let t = &self.training;
        t.m1.validate("m1")?;
        t.m2.validate("m2")?;
        t.gaze.validate("gaze")?;
        t.face_attributes.validate("face_attributes")?;
        t.body_attributes.validate("body_attributes")?;
        if let Some(s) = self
            .evaluation
            .severities
            .iter()
            .find(|&&s| s > hicom_core::synth::MAX_SEVERITY)
        {
            bail!("evaluation.severities: {s} is out of range");
        }
        if let Some(url) = &self.explain.endpoint {
            crate::explain::validate_endpoint(url)?;
        }
        Ok(())
    }
}

/// Recursively overlays `over` onto `base`; tables merge, other values replace.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
