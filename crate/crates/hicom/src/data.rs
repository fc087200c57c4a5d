//! Loads a manifest split into per-module training and evaluation inputs.
//!
//! Frames are decoded once per clip; only the module inputs (resized clip,
//! crops) are kept, so a 1000-clip set fits comfortably in memory.

use std::path::Path;

use anyhow::{Context, Result};
use hicom_core::body_face::block_face_in_body;
use hicom_core::image::Image;
use hicom_core::model::{Attributes, ClipRecord, ClipSample, CropPolicy, FaceSample, FrameSample};
use hicom_core::scene_motion::{MotionInput, SceneMotionConfig};
use hicom_core::synth::Perturbation;
use hicom_core::Error as CoreError;
use sha2::{Digest, Sha256};

use crate::io::read_png;

#[derive(Clone, Debug)]
pub struct FaceData {
    pub face_id: u32,
    pub face_crop: Image,
    pub eye_crop: Image,
    /// Body crop with the face region blurred out; `None` when the body
    /// region is unusable.
    pub body_blocked: Option<Image>,
    pub fake: bool,
    pub gaze_locked: Option<bool>,
    pub attributes: Option<Attributes>,
}

#[derive(Clone, Debug)]
pub struct FrameData {
    pub frame_id: u32,
    pub faces: Vec<FaceData>,
}

impl FrameData {
    pub fn labels(&self) -> Vec<bool> {
        self.faces.iter().map(|f| f.fake).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ClipData {
    pub clip_id: String,
    pub motion: MotionInput,
    /// Fake flag per track, in first-frame face order.
    pub track_labels: Vec<bool>,
    pub track_ids: Vec<u32>,
    pub frames: Vec<FrameData>,
}

impl ClipData {
    pub fn any_fake(&self) -> bool {
        self.track_labels.iter().any(|&f| f)
    }
}

/// Seed of a clip's perturbation realization, stable across runs.
pub fn clip_seed(clip_id: &str) -> u64 {
    let d = Sha256::digest(clip_id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn face_data(sample: FaceSample) -> Result<FaceData> {
    let body_blocked = match block_face_in_body(&sample.body.image, &sample.body.face_box) {
        Ok(img) => Some(img),
        Err(CoreError::FaceCoversBody { .. } | CoreError::DegenerateBox { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let attributes = sample.attributes();
    Ok(FaceData {
        face_id: sample.face_id,
        face_crop: sample.face_crop,
        eye_crop: sample.eye_crop,
        body_blocked,
        fake: sample.fake,
        gaze_locked: sample.gaze_locked,
        attributes,
    })
}

/// Decodes one clip and builds every module input.
pub fn load_clip(
    root: &Path,
    record: &ClipRecord,
    policy: &CropPolicy,
    motion_cfg: &SceneMotionConfig,
    perturb: Option<Perturbation>,
) -> Result<ClipData> {
    let seed = clip_seed(&record.clip_id);
    let mut frames = Vec::with_capacity(record.frames.len());
    for fr in &record.frames {
        let path = root.join(&fr.image_path);
        let mut image = read_png(&path)?;
        if let Some(p) = perturb {
            image = p.apply(&image, seed);
        }
        let faces = fr
            .faces
            .iter()
            .map(|f| FaceSample::from_record(&image, f, policy))
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("cropping faces of {}", path.display()))?;
        frames.push(FrameSample {
            frame_id: fr.frame_id,
            image,
            faces,
        });
    }
    let clip = ClipSample {
        clip_id: record.clip_id.clone(),
        fps: record.fps,
        frames,
    };
    let motion = MotionInput::from_clip(motion_cfg, &clip)
        .with_context(|| format!("clip {}", record.clip_id))?;
    let first = clip
        .frames
        .first()
        .ok_or_else(|| anyhow::anyhow!("clip {} has no frames", record.clip_id))?;
    let track_ids: Vec<u32> = first.faces.iter().map(|f| f.face_id).collect();
    let track_labels = track_ids
        .iter()
        .map(|id| {
            clip.frames
                .iter()
                .flat_map(|fr| &fr.faces)
                .any(|f| f.face_id == *id && f.fake)
        })
        .collect();
    let frames = clip
        .frames
        .into_iter()
        .map(|fr| {
            Ok(FrameData {
                frame_id: fr.frame_id,
                faces: fr.faces.into_iter().map(face_data).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ClipData {
        clip_id: record.clip_id.clone(),
        motion,
        track_labels,
        track_ids,
        frames,
    })
}

pub fn load_clips(
    root: &Path,
    records: &[ClipRecord],
    policy: &CropPolicy,
    motion_cfg: &SceneMotionConfig,
    perturb: Option<Perturbation>,
) -> Result<Vec<ClipData>> {
    records
        .iter()
        .map(|r| load_clip(root, r, policy, motion_cfg, perturb))
        .collect()
}
