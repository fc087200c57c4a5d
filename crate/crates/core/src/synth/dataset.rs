//! Deterministic dataset plans: which scenes go in which split.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::scene::{AnomalyKind, Canvas, SceneSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    /// Clip counts per split; the test split takes the rounding remainder.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let ok = |r: f64| r.is_finite() && (0.0..=1.0).contains(&r);
        let total = self.train + self.val + self.test;
        if !ok(self.train) || !ok(self.val) || !ok(self.test) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("bad split ratios {self:?}")));
        }
        let train = crate::math::round(n as f64 * self.train) as usize;
        let val = (crate::math::round(n as f64 * self.val) as usize).min(n - train.min(n));
        let train = train.min(n);
        Ok([train, val, n - train - val])
    }
}

/// Primary anomaly rotation; index 0 is the real-only control.
pub const PRIMARY_CYCLE: [Option<AnomalyKind>; 5] = [
    None,
    Some(AnomalyKind::MotionJitter),
    Some(AnomalyKind::AppearanceMismatch),
    Some(AnomalyKind::GazeOutlier),
    Some(AnomalyKind::BodyFaceMismatch),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedClip {
    pub clip_id: String,
    pub split: Split,
    pub seed: u64,
    pub primary: Option<AnomalyKind>,
    pub n_faces: usize,
}

impl PlannedClip {
    pub fn spec(&self, canvas: Canvas) -> Result<SceneSpec> {
        SceneSpec::sample(self.seed, self.primary, self.n_faces, canvas)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub master_seed: u64,
    pub clips: Vec<PlannedClip>,
}

/// Lays out `n_clips` scenes. Within each split, primary anomalies rotate
/// through [`PRIMARY_CYCLE`] and face counts through 2..=8, so every split
/// is stratified by construction.
pub fn plan_dataset(n_clips: usize, ratios: SplitRatios, master_seed: u64) -> Result<DatasetPlan> {
    let counts = ratios.counts(n_clips)?;
    let mut clips = Vec::with_capacity(n_clips);
    for (s, split) in Split::ALL.into_iter().enumerate() {
        for i in 0..counts[s] {
            let primary = PRIMARY_CYCLE[i % PRIMARY_CYCLE.len()];
            let mut n_faces = 2 + (i / PRIMARY_CYCLE.len()) % 7;
            if primary == Some(AnomalyKind::GazeOutlier) && n_faces == 3 {
                n_faces = 4;
            }
            clips.push(PlannedClip {
                clip_id: format!("{}_{i:05}", split.name()),
                split,
                seed: clip_seed(master_seed, s as u64, i as u64),
                primary,
                n_faces,
            });
        }
    }
    Ok(DatasetPlan { master_seed, clips })
}

fn clip_seed(master: u64, split: u64, i: u64) -> u64 {
    // splitmix64 finalizer so neighbouring indices get unrelated streams
    let mut z = master ^ (split << 48) ^ i;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-split counts of faces, fakes and anomaly kinds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAudit {
    pub clips: usize,
    pub faces: usize,
    pub fake_faces: usize,
    pub anomalies: BTreeMap<String, usize>,
}

pub fn audit(specs: &[(Split, &SceneSpec)]) -> BTreeMap<String, SplitAudit> {
    let mut out: BTreeMap<String, SplitAudit> = BTreeMap::new();
    for (split, spec) in specs {
        let a = out.entry(split.name().into()).or_default();
        a.clips += 1;
        for f in &spec.faces {
            a.faces += 1;
            a.fake_faces += usize::from(f.fake);
            for k in &f.anomalies {
                *a.anomalies.entry(k.name().into()).or_default() += 1;
            }
        }
    }
    out
}
