//! Self-describing JSON checkpoints: format tag, module, config echo, seed,
//! selected epoch and named parameter tensors.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hicom_core::body_face::{AttributeConfig, AttributeNet};
use hicom_core::gaze::{GazeConfig, GazeNet};
use hicom_core::inter_face::{InterFaceConfig, InterFaceNet, ScoreCalibration};
use hicom_core::model::ModuleId;
use hicom_core::nn::{Model, NamedTensor};
use hicom_core::scene_motion::{SceneMotionConfig, SceneMotionNet};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::io::{read_json, write_json};

pub const FORMAT: &str = "hicom-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    /// Echo of the network config the tensors belong to.
    pub config: serde_json::Value,
    pub epoch: usize,
    pub val_loss: f64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub module: ModuleId,
    pub seed: u64,
    pub groups: Vec<ParamGroup>,
    /// Post-training state that is not a parameter, e.g. score calibration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn checkpoint_path(out_dir: &Path, module: ModuleId) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("{}.json", module.to_string().to_lowercase()))
}

impl Checkpoint {
    pub fn new(module: ModuleId, seed: u64) -> Self {
        Self {
            format: FORMAT.into(),
            module,
            seed,
            groups: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn push<M: Model, C: Serialize>(
        &mut self,
        name: &str,
        model: &M,
        config: &C,
        epoch: usize,
        val_loss: f64,
    ) -> Result<()> {
        self.groups.push(ParamGroup {
            name: name.into(),
            config: serde_json::to_value(config)?,
            epoch,
            val_loss,
            tensors: model.store().entries().to_vec(),
        });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self =
            read_json(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        if ck.format != FORMAT {
            bail!(
                "{}: unsupported checkpoint format {:?}",
                path.display(),
                ck.format
            );
        }
        Ok(ck)
    }

    pub fn group(&self, name: &str) -> Result<&ParamGroup> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .with_context(|| {
                format!(
                    "checkpoint for {} has no parameter group {name:?}",
                    self.module
                )
            })
    }

    fn config_of<C: DeserializeOwned>(&self, name: &str) -> Result<C> {
        serde_json::from_value(self.group(name)?.config.clone())
            .with_context(|| format!("config of group {name}"))
    }

    fn restore<M: Model>(&self, name: &str, model: &mut M) -> Result<()> {
        model.store_mut().load_from(&self.group(name)?.tensors)?;
        Ok(())
    }
}

/// All four trained modules.
pub struct Detectors {
    pub m1: Option<SceneMotionNet>,
    pub m2: Option<InterFaceNet>,
    pub m3: Option<GazeNet>,
    pub m4: Option<(AttributeNet, AttributeNet)>,
}

pub fn load_m1(ck: &Checkpoint) -> Result<SceneMotionNet> {
    let cfg: SceneMotionConfig = ck.config_of("m1")?;
    let mut net = SceneMotionNet::new(cfg, ck.seed)?;
    ck.restore("m1", &mut net)?;
    Ok(net)
}

pub fn load_m2(ck: &Checkpoint) -> Result<InterFaceNet> {
    let cfg: InterFaceConfig = ck.config_of("m2")?;
    let mut net = InterFaceNet::new(cfg, ck.seed)?;
    ck.restore("m2", &mut net)?;
    if !ck.extra.is_null() {
        net.calibration =
            serde_json::from_value::<ScoreCalibration>(ck.extra["calibration"].clone())
                .context("m2 score calibration")?;
    }
    Ok(net)
}

pub fn load_m3(ck: &Checkpoint) -> Result<GazeNet> {
    let cfg: GazeConfig = ck.config_of("gaze")?;
    let mut net = GazeNet::new(cfg, ck.seed);
    ck.restore("gaze", &mut net)?;
    Ok(net)
}

pub fn load_m4(ck: &Checkpoint) -> Result<(AttributeNet, AttributeNet)> {
    let fc: AttributeConfig = ck.config_of("face_attributes")?;
    let bc: AttributeConfig = ck.config_of("body_attributes")?;
    let mut face = AttributeNet::new("face", fc, ck.seed);
    let mut body = AttributeNet::new("body", bc, ck.seed);
    ck.restore("face_attributes", &mut face)?;
    ck.restore("body_attributes", &mut body)?;
    Ok((face, body))
}

impl Detectors {
    /// Loads the checkpoints of `modules` from `out_dir`; any missing one is
    /// an error.
    pub fn load(out_dir: &Path, modules: &[ModuleId]) -> Result<Self> {
        let mut d = Self {
            m1: None,
            m2: None,
            m3: None,
            m4: None,
        };
        for &m in modules {
            let path = checkpoint_path(out_dir, m);
            if !path.exists() {
                bail!(
                    "missing checkpoint for {m} at {} (run `hicom train` first)",
                    path.display()
                );
            }
            let ck = Checkpoint::load(&path)?;
            if ck.module != m {
                bail!(
                    "{} holds module {}, expected {m}",
                    path.display(),
                    ck.module
                );
            }
            match m {
                ModuleId::M1 => d.m1 = Some(load_m1(&ck)?),
                ModuleId::M2 => d.m2 = Some(load_m2(&ck)?),
                ModuleId::M3 => d.m3 = Some(load_m3(&ck)?),
                ModuleId::M4 => d.m4 = Some(load_m4(&ck)?),
            }
        }
        Ok(d)
    }
}
