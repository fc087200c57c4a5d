//! Face-level (FAC/FAU) and frame-level complete (FCAC/FCAU) metrics.
//!
//! A frame counts as correct for FCAC only when every face in it is
//! classified correctly. For FCAU each frame is scored by its most suspicious
//! face and labeled fake when it contains any fake face.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::ModuleSet;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacePrediction {
    /// Fake probability (or any score monotone in it).
    pub score: f64,
    /// Predicted label, `true` = fake.
    pub fake: bool,
    /// Ground truth, `true` = fake.
    pub truth: bool,
}

impl FacePrediction {
    pub fn correct(&self) -> bool {
        self.fake == self.truth
    }
}

/// Area under the ROC curve via the Mann-Whitney rank statistic with
/// averaged ranks for ties. `None` when `truth` has a single class.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), truth.len(), "roc_auc: scores/truth length");
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| truth[k]).count();
        rank_sum_pos += avg * pos_in_group as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceMetrics {
    pub fac: f64,
    pub fau: Option<f64>,
}

pub fn compute_face_metrics(
    scores: &[f64],
    labels: &[bool],
    truth: &[bool],
) -> Result<FaceMetrics> {
    if truth.is_empty() {
        return Err(Error::Empty("face predictions"));
    }
    for len in [scores.len(), labels.len()] {
        if len != truth.len() {
            return Err(Error::LengthMismatch {
                expected: truth.len(),
                found: len,
            });
        }
    }
    let correct = labels.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(FaceMetrics {
        fac: correct as f64 / truth.len() as f64,
        fau: roc_auc(scores, truth),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub fcac: f64,
    pub fcau: Option<f64>,
}

pub fn compute_frame_complete_metrics<F: AsRef<[FacePrediction]>>(
    frames: &[F],
) -> Result<FrameMetrics> {
    if frames.is_empty() {
        return Err(Error::Empty("frames"));
    }
    let mut complete = 0usize;
    let mut scores = Vec::with_capacity(frames.len());
    let mut truth = Vec::with_capacity(frames.len());
    for frame in frames {
        let faces = frame.as_ref();
        if faces.is_empty() {
            return Err(Error::Empty("faces in frame"));
        }
        if faces.iter().all(FacePrediction::correct) {
            complete += 1;
        }
        scores.push(
            faces
                .iter()
                .map(|f| f.score)
                .fold(f64::NEG_INFINITY, f64::max),
        );
        truth.push(faces.iter().any(|f| f.truth));
    }
    Ok(FrameMetrics {
        fcac: complete as f64 / frames.len() as f64,
        fcau: roc_auc(&scores, &truth),
    })
}

/// Both metric families over the same per-frame predictions.
pub fn metrics_for_frames<F: AsRef<[FacePrediction]>>(
    frames: &[F],
) -> Result<(FaceMetrics, FrameMetrics)> {
    let frame = compute_frame_complete_metrics(frames)?;
    let faces: Vec<FacePrediction> = frames
        .iter()
        .flat_map(|f| f.as_ref().iter().copied())
        .collect();
    let scores: Vec<f64> = faces.iter().map(|f| f.score).collect();
    let labels: Vec<bool> = faces.iter().map(|f| f.fake).collect();
    let truth: Vec<bool> = faces.iter().map(|f| f.truth).collect();
    Ok((compute_face_metrics(&scores, &labels, &truth)?, frame))
}

/// One row of the cumulative module ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub modules: ModuleSet,
    #[serde(rename = "FAC")]
    pub fac: f64,
    #[serde(rename = "FAU")]
    pub fau: Option<f64>,
    #[serde(rename = "FCAC")]
    pub fcac: f64,
    #[serde(rename = "FCAU")]
    pub fcau: Option<f64>,
    /// Fraction of fake faces predicted fake.
    pub fake_recall: f64,
}

impl AblationEntry {
    pub fn from_frames<F: AsRef<[FacePrediction]>>(
        modules: ModuleSet,
        frames: &[F],
    ) -> Result<Self> {
        let (face, frame) = metrics_for_frames(frames)?;
        let (mut fakes, mut caught) = (0usize, 0usize);
        for f in frames.iter().flat_map(|f| f.as_ref().iter()) {
            if f.truth {
                fakes += 1;
                caught += usize::from(f.fake);
            }
        }
        Ok(Self {
            label: modules.label(),
            modules,
            fac: face.fac,
            fau: face.fau,
            fcac: frame.fcac,
            fcau: frame.fcau,
            fake_recall: if fakes == 0 {
                1.0
            } else {
                caught as f64 / fakes as f64
            },
        })
    }
}

/// Accuracy under one perturbation setting relative to the clean split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationEntry {
    pub perturbation: String,
    pub severity: u8,
    pub label: String,
    #[serde(rename = "FAC")]
    pub fac: f64,
    #[serde(rename = "FCAC")]
    pub fcac: f64,
    pub fac_drop: f64,
    pub fcac_drop: f64,
}

/// Flat evaluation report: headline metrics of the full stack, counts, and
/// the ablation and degradation tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "FAC")]
    pub fac: f64,
    #[serde(rename = "FAU")]
    pub fau: Option<f64>,
    #[serde(rename = "FCAC")]
    pub fcac: f64,
    #[serde(rename = "FCAU")]
    pub fcau: Option<f64>,
    pub n_faces: usize,
    pub n_frames: usize,
    pub ablation: Vec<AblationEntry>,
    #[serde(default)]
    pub degradation: Vec<DegradationEntry>,
}

impl MetricsReport {
    pub fn from_frames<F: AsRef<[FacePrediction]>>(
        frames: &[F],
        ablation: Vec<AblationEntry>,
    ) -> Result<Self> {
        let (face, frame) = metrics_for_frames(frames)?;
        Ok(Self {
            fac: face.fac,
            fau: face.fau,
            fcac: frame.fcac,
            fcau: frame.fcau,
            n_faces: frames.iter().map(|f| f.as_ref().len()).sum(),
            n_frames: frames.len(),
            ablation,
            degradation: Vec::new(),
        })
    }
}
