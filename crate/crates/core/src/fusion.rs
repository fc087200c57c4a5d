//! Combination of per-face module verdicts into final decisions.
//!
//! The default mode marks a face fake as soon as any participating module
//! flags it (logical OR). A weighted mode averages module scores with
//! cue-prevalence weights instead.

use serde::{Deserialize, Serialize};

use crate::model::{Flag, ModuleId, ModuleSet, ModuleVerdict};
use crate::{Error, Result};

/// Default weights for the weighted mode, in module order, from how often
/// each cue was cited by human observers.
pub const PREVALENCE_WEIGHTS: [f64; 4] = [0.342, 0.315, 0.250, 0.075];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    AnyAnomaly,
    WeightedScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub m1_threshold: f64,
    pub m2_threshold: f64,
    /// Weights for the weighted mode; renormalized over the modules that
    /// contribute to a face.
    pub weights: [f64; 4],
    pub weighted_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::AnyAnomaly,
            m1_threshold: 0.5,
            m2_threshold: 0.5,
            weights: PREVALENCE_WEIGHTS,
            weighted_threshold: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig(
                "fusion weights must be >= 0 with positive sum".into(),
            ));
        }
        Ok(())
    }

    fn threshold(&self, m: ModuleId) -> Option<f64> {
        match m {
            ModuleId::M1 => Some(self.m1_threshold),
            ModuleId::M2 => Some(self.m2_threshold),
            _ => None,
        }
    }
}

/// The verdicts available for one face, at most one per module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerdictSet {
    slots: [Option<ModuleVerdict>; 4],
}

impl VerdictSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_verdicts(verdicts: &[ModuleVerdict]) -> Self {
        let mut s = Self::new();
        for v in verdicts {
            s.insert(*v);
        }
        s
    }

    /// Stores `v`, replacing any earlier verdict of the same module.
    pub fn insert(&mut self, v: ModuleVerdict) {
        self.slots[v.module.index()] = Some(v);
    }

    pub fn with(mut self, v: ModuleVerdict) -> Self {
        self.insert(v);
        self
    }

    pub fn get(&self, m: ModuleId) -> Option<&ModuleVerdict> {
        self.slots[m.index()].as_ref()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub fake: bool,
    /// Continuous fake score used for AUC.
    pub score: f64,
    /// Modules that flagged the face.
    pub attribution: ModuleSet,
}

/// Fusion over all four modules. M1 and M2 must be present; a missing M3 or
/// M4 verdict contributes nothing.
pub fn fuse(verdicts: &VerdictSet, cfg: &FusionConfig) -> Result<FusionResult> {
    ablation_stack(verdicts, ModuleSet::ALL, cfg)
}

/// Fusion restricted to `subset`, which must include M1.
pub fn ablation_stack(
    verdicts: &VerdictSet,
    subset: ModuleSet,
    cfg: &FusionConfig,
) -> Result<FusionResult> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    if !subset.contains(ModuleId::M1) {
        return Err(Error::InvalidConfig("ablation subsets start at M1".into()));
    }
    let mut attribution = ModuleSet::EMPTY;
    let mut max_score = 0.0f64;
    let mut weighted = 0.0;
    let mut weight_sum = 0.0;
    for m in subset.iter() {
        let Some(v) = verdicts.get(m) else {
            if matches!(m, ModuleId::M1 | ModuleId::M2) {
                return Err(Error::MissingVerdict(m));
            }
            continue;
        };
        let (score, flag) = match (cfg.threshold(m), v.score) {
            (Some(t), Some(s)) => (Some(s), Flag::from_bool(s >= t)),
            (Some(_), None) => return Err(Error::MissingVerdict(m)),
            (None, _) => (v.flag.as_score(), v.flag),
        };
        let Some(score) = score else { continue };
        if flag.is_flagged() {
            attribution.insert(m);
        }
        max_score = max_score.max(score);
        let w = cfg.weights[m.index()];
        weighted += w * score;
        weight_sum += w;
    }
    Ok(match cfg.mode {
        FusionMode::AnyAnomaly => FusionResult {
            fake: !attribution.is_empty(),
            score: max_score,
            attribution,
        },
        FusionMode::WeightedScore => {
            let score = if weight_sum > 0.0 {
                weighted / weight_sum
            } else {
                0.0
            };
            FusionResult {
                fake: score >= cfg.weighted_threshold,
                score,
                attribution,
            }
        }
    })
}
