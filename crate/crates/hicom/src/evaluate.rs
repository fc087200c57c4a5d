//! Test-split evaluation: per-face module verdicts, fusion, the cumulative
//! ablation table and the perturbation sweep.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use hicom_core::body_face::{mismatch_rule, AttributePrediction};
use hicom_core::fusion::{ablation_stack, FusionConfig, FusionResult, VerdictSet};
use hicom_core::image::Image;
use hicom_core::model::{
    AblationEntry, DegradationEntry, FacePrediction, Flag, MetricsReport, ModuleId, ModuleSet,
    ModuleVerdict,
};
use hicom_core::synth::{Perturbation, Split};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Detectors;
use crate::config::RunConfig;
use crate::data::{load_clips, ClipData};
use crate::generate::manifest_path;
use crate::io::{read_manifest, write_json, write_jsonl};

/// Everything the detectors said about one face in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub clip_id: String,
    pub frame_id: u32,
    pub face_id: u32,
    pub truth_fake: bool,
    pub verdicts: VerdictSet,
    /// Probability that the eyes look at the camera, when M3 ran.
    pub gaze_p_locked: Option<f64>,
    pub attributes: Option<AttributePrediction>,
    /// Fusion over the evaluated module set.
    pub modules: ModuleSet,
    pub fused: FusionResult,
}

/// Runs the loaded detectors on every face of a clip.
pub fn detect_clip(
    det: &Detectors,
    cfg: &RunConfig,
    clip: &ClipData,
    modules: ModuleSet,
) -> Result<Vec<Vec<DetectionRecord>>> {
    let m1_scores = match &det.m1 {
        Some(net) => Some(net.predict(&clip.motion)?.face_scores),
        None => None,
    };
    let mut out = Vec::with_capacity(clip.frames.len());
    for frame in &clip.frames {
        let face_crops: Vec<&Image> = frame.faces.iter().map(|f| &f.face_crop).collect();
        let m2 = match &det.m2 {
            Some(net) => Some(net.frame_scores(&face_crops)?),
            None => None,
        };
        let m3 = match &det.m3 {
            Some(net) => {
                let eyes: Vec<&Image> = frame.faces.iter().map(|f| &f.eye_crop).collect();
                Some(net.frame_verdicts(&eyes)?)
            }
            None => None,
        };
        let mut records = Vec::with_capacity(frame.faces.len());
        for (i, face) in frame.faces.iter().enumerate() {
            let mut v = VerdictSet::new();
            if let Some(s) = &m1_scores {
                let track = clip
                    .track_ids
                    .iter()
                    .position(|&id| id == face.face_id)
                    .with_context(|| {
                        format!("{}: face {} has no track", clip.clip_id, face.face_id)
                    })?;
                v.insert(ModuleVerdict::scored(
                    ModuleId::M1,
                    s[track],
                    cfg.fusion.m1_threshold,
                ));
            }
            if let Some(s) = &m2 {
                v.insert(ModuleVerdict::scored(
                    ModuleId::M2,
                    s[i],
                    cfg.fusion.m2_threshold,
                ));
            }
            let mut gaze_p_locked = None;
            if let Some((p, flags)) = &m3 {
                gaze_p_locked = Some(p[i]);
                v.insert(ModuleVerdict::flag_only(ModuleId::M3, flags[i]));
            }
            let mut attributes = None;
            if let Some((face_net, body_net)) = &det.m4 {
                let flag = match &face.body_blocked {
                    Some(body) => {
                        let pred = AttributePrediction {
                            face: face_net.predict(&face.face_crop)?,
                            body: body_net.predict(body)?,
                        };
                        attributes = Some(pred);
                        mismatch_rule(&pred, cfg.models.attribute_confidence_floor)
                    }
                    None => Flag::Clear,
                };
                v.insert(ModuleVerdict::flag_only(ModuleId::M4, flag));
            }
            let fused = ablation_stack(&v, modules, &cfg.fusion)?;
            records.push(DetectionRecord {
                clip_id: clip.clip_id.clone(),
                frame_id: frame.frame_id,
                face_id: face.face_id,
                truth_fake: face.fake,
                verdicts: v,
                gaze_p_locked,
                attributes,
                modules,
                fused,
            });
        }
        out.push(records);
    }
    Ok(out)
}

/// Per-frame predictions of `subset` from stored verdicts.
pub fn frames_for_subset(
    frames: &[Vec<DetectionRecord>],
    subset: ModuleSet,
    fusion: &FusionConfig,
) -> Result<Vec<Vec<FacePrediction>>> {
    frames
        .iter()
        .map(|fr| {
            fr.iter()
                .map(|r| {
                    let f = ablation_stack(&r.verdicts, subset, fusion)?;
                    Ok(FacePrediction {
                        score: f.score,
                        fake: f.fake,
                        truth: r.truth_fake,
                    })
                })
                .collect()
        })
        .collect()
}

/// The cumulative rows M1, M1+M2, M1+M2+M3 and all four when every module
/// was evaluated; otherwise the single evaluated subset.
pub fn ablation_rows(
    frames: &[Vec<DetectionRecord>],
    modules: ModuleSet,
    fusion: &FusionConfig,
) -> Result<Vec<AblationEntry>> {
    let subsets: Vec<ModuleSet> = if modules == ModuleSet::ALL {
        (1..=4).map(ModuleSet::prefix).collect()
    } else {
        vec![modules]
    };
    subsets
        .into_iter()
        .map(|s| {
            Ok(AblationEntry::from_frames(
                s,
                &frames_for_subset(frames, s, fusion)?,
            )?)
        })
        .collect()
}

pub fn load_split(
    cfg: &RunConfig,
    split: Split,
    perturb: Option<Perturbation>,
) -> Result<Vec<ClipData>> {
    let records = read_manifest(&manifest_path(&cfg.data_dir, split))?;
    load_clips(
        &cfg.data_dir,
        &records,
        &cfg.crops,
        &cfg.models.scene_motion,
        perturb,
    )
}

pub fn detect_all(
    det: &Detectors,
    cfg: &RunConfig,
    clips: &[ClipData],
    modules: ModuleSet,
) -> Result<Vec<Vec<DetectionRecord>>> {
    let mut frames = Vec::new();
    for clip in clips {
        frames.extend(detect_clip(det, cfg, clip, modules)?);
    }
    Ok(frames)
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub detections: Vec<Vec<DetectionRecord>>,
    pub report_path: PathBuf,
}

/// Evaluates `modules` on the test split and, when `sweep`, under every
/// configured perturbation and severity. Writes the report, detections and
/// plots under `<out_dir>/eval`.
pub fn cmd_evaluate(cfg: &RunConfig, modules: &[ModuleId], sweep: bool) -> Result<EvalOutput> {
    let set = ModuleSet::from_modules(modules);
    if !set.contains(ModuleId::M1) {
        bail!("evaluation subsets must include M1 (got {})", set.label());
    }
    let det = Detectors::load(&cfg.out_dir, modules)?;
    let start = Instant::now();
    let clean = load_split(cfg, Split::Test, None)?;
    let detections = detect_all(&det, cfg, &clean, set)?;
    let ablation = ablation_rows(&detections, set, &cfg.fusion)?;
    let mut report =
        MetricsReport::from_frames(&frames_for_subset(&detections, set, &cfg.fusion)?, ablation)?;
    log::info!(
        "clean evaluation of {} in {:.1}s: FCAC {:.4}",
        set.label(),
        start.elapsed().as_secs_f64(),
        report.fcac
    );

    if sweep {
        report.degradation = perturbation_sweep(cfg, &det, set, &detections)?;
    }
    let dir = cfg.out_dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    let report_path = dir.join("report.json");
    write_json(&report_path, &report)?;
    write_jsonl(
        &dir.join("detections.jsonl"),
        &detections.iter().flatten().collect::<Vec<_>>(),
    )?;
    crate::plot::ablation_bars(&dir.join("ablation.png"), &report.ablation)?;
    if !report.degradation.is_empty() {
        crate::plot::degradation_curves(&dir.join("degradation.png"), &report.degradation)?;
    }
    Ok(EvalOutput {
        report,
        detections,
        report_path,
    })
}

/// Degradation rows for M1 alone and for the evaluated set.
pub fn perturbation_sweep(
    cfg: &RunConfig,
    det: &Detectors,
    set: ModuleSet,
    clean: &[Vec<DetectionRecord>],
) -> Result<Vec<DegradationEntry>> {
    let mut labels = vec![ModuleSet::prefix(1)];
    if set != labels[0] {
        labels.push(set);
    }
    let clean_rows: Vec<(f64, f64)> = labels
        .iter()
        .map(|s| {
            let row = AblationEntry::from_frames(*s, &frames_for_subset(clean, *s, &cfg.fusion)?)?;
            Ok((row.fac, row.fcac))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for &kind in &cfg.evaluation.perturbations {
        for &severity in &cfg.evaluation.severities {
            let start = Instant::now();
            let p = Perturbation::new(kind, severity)?;
            let clips = load_split(cfg, Split::Test, Some(p))?;
            let frames = detect_all(det, cfg, &clips, set)?;
            for (s, &(fac0, fcac0)) in labels.iter().zip(&clean_rows) {
                let row =
                    AblationEntry::from_frames(*s, &frames_for_subset(&frames, *s, &cfg.fusion)?)?;
                out.push(DegradationEntry {
                    perturbation: kind.name().into(),
                    severity,
                    label: s.label(),
                    fac: row.fac,
                    fcac: row.fcac,
                    fac_drop: fac0 - row.fac,
                    fcac_drop: fcac0 - row.fcac,
                });
            }
            log::info!(
                "{} severity {severity}: {:.1}s",
                kind.name(),
                start.elapsed().as_secs_f64()
            );
            if log::log_enabled!(log::Level::Debug) {
                let real: Vec<&DetectionRecord> =
                    frames.iter().flatten().filter(|d| !d.truth_fake).collect();
                let fake: Vec<&DetectionRecord> =
                    frames.iter().flatten().filter(|d| d.truth_fake).collect();
                let rate = |v: &[&DetectionRecord], m| {
                    v.iter()
                        .filter(|d| d.verdicts.get(m).is_some_and(|x| x.flag.is_flagged()))
                        .count() as f64
                        / v.len().max(1) as f64
                };
                for m in ModuleId::ALL {
                    log::debug!(
                        "  {m}: real flagged {:.3}, fake flagged {:.3}",
                        rate(&real, m),
                        rate(&fake, m)
                    );
                }
            }
        }
    }
    Ok(out)
}

/// Mean FAC drop per label at one severity, across perturbation kinds.
pub fn mean_fac_drop(rows: &[DegradationEntry], label: &str, severity: u8) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.label == label && r.severity == severity)
        .map(|r| r.fac_drop)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn report_path(out_dir: &Path) -> PathBuf {
    out_dir.join("eval").join("report.json")
}
