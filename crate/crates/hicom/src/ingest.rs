//! Normalizes external annotations into the clip manifest schema.
//!
//! Two layouts are read:
//! * `jsonl`: one clip record per line, already in manifest form;
//! * `ffiw_like`: a directory with one sub-directory per video, each holding
//!   `annotations.json`:
//!   `{"fps": 25, "frames": [{"image": "frames/000.png",
//!     "faces": [{"track": 0, "bbox": [x, y, w, h], "label": "fake",
//!                "age": "senior", "gender": "male", "gaze_locked": true}]}]}`.
//!   Image paths in the output are relative to that directory.
//!
//! Clips with a missing or malformed box or label are rejected as a whole
//! and listed separately; the run continues with the next clip.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hicom_core::model::{AgeClass, ClipRecord, FaceRecord, FrameRecord, GenderClass};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::io::write_jsonl;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Jsonl,
    FfiwLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// File (and line, for JSONL) the record came from.
    pub source: String,
    pub clip_id: Option<String>,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ingested {
    pub clips: Vec<ClipRecord>,
    pub rejected: Vec<Rejection>,
}

fn check_clip(c: &ClipRecord) -> Result<(), String> {
    if c.frames.is_empty() {
        return Err("clip has no frames".into());
    }
    if !(c.fps.is_finite() && c.fps > 0.0) {
        return Err(format!("fps {} is not positive", c.fps));
    }
    for fr in &c.frames {
        for f in &fr.faces {
            if f.bbox.iter().any(|v| !v.is_finite()) || f.bbox[2] <= 0.0 || f.bbox[3] <= 0.0 {
                return Err(format!(
                    "frame {} face {}: degenerate box {:?}",
                    fr.frame_id, f.face_id, f.bbox
                ));
            }
            if f.label > 1 {
                return Err(format!(
                    "frame {} face {}: label {} is not 0 or 1",
                    fr.frame_id, f.face_id, f.label
                ));
            }
        }
    }
    Ok(())
}

pub fn ingest_jsonl(path: &Path) -> Result<Ingested> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Ingested::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let source = format!("{}:{}", path.display(), i + 1);
        let value: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                out.rejected.push(Rejection {
                    source,
                    clip_id: None,
                    reason: format!("not JSON: {e}"),
                });
                continue;
            }
        };
        let clip_id = value
            .get("clip_id")
            .and_then(Value::as_str)
            .map(str::to_owned);
        match serde_json::from_value::<ClipRecord>(value)
            .map_err(|e| e.to_string())
            .and_then(|c| check_clip(&c).map(|_| c))
        {
            Ok(c) => out.clips.push(c),
            Err(reason) => out.rejected.push(Rejection {
                source,
                clip_id,
                reason,
            }),
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct FfiwAnnotations {
    fps: Option<f64>,
    frames: Vec<FfiwFrame>,
}

#[derive(Deserialize)]
struct FfiwFrame {
    image: String,
    #[serde(default)]
    faces: Vec<FfiwFace>,
}

#[derive(Deserialize)]
struct FfiwFace {
    track: u32,
    bbox: Option<[f64; 4]>,
    label: Option<Value>,
    age: Option<AgeClass>,
    gender: Option<GenderClass>,
    gaze_locked: Option<bool>,
}

fn parse_label(v: &Value) -> Option<u8> {
    match v {
        Value::String(s) => match s.to_ascii_lowercase().as_str() {
            "fake" | "1" => Some(1),
            "real" | "0" => Some(0),
            _ => None,
        },
        Value::Number(n) => n.as_u64().filter(|&n| n <= 1).map(|n| n as u8),
        Value::Bool(b) => Some(*b as u8),
        _ => None,
    }
}

fn ffiw_clip(video: &str, ann: FfiwAnnotations) -> Result<ClipRecord, String> {
    let mut frames = Vec::with_capacity(ann.frames.len());
    for (t, fr) in ann.frames.into_iter().enumerate() {
        let mut faces = Vec::with_capacity(fr.faces.len());
        for f in fr.faces {
            let bbox = f
                .bbox
                .ok_or_else(|| format!("frame {t} track {}: missing bbox", f.track))?;
            let label = f
                .label
                .as_ref()
                .ok_or_else(|| format!("frame {t} track {}: missing label", f.track))
                .and_then(|v| {
                    parse_label(v)
                        .ok_or_else(|| format!("frame {t} track {}: bad label {v}", f.track))
                })?;
            faces.push(FaceRecord {
                face_id: f.track,
                bbox,
                label,
                gaze_locked: f.gaze_locked,
                age: f.age,
                gender: f.gender,
            });
        }
        frames.push(FrameRecord {
            frame_id: t as u32,
            image_path: format!("{video}/{}", fr.image),
            faces,
        });
    }
    let clip = ClipRecord {
        clip_id: video.into(),
        fps: ann.fps.unwrap_or(25.0),
        frames,
    };
    check_clip(&clip)?;
    Ok(clip)
}

pub fn ingest_ffiw_like(root: &Path) -> Result<Ingested> {
    let mut videos: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    videos.sort();
    let mut out = Ingested::default();
    for dir in videos {
        let video = dir.file_name().unwrap().to_string_lossy().into_owned();
        let ann_path = dir.join("annotations.json");
        let source = ann_path.display().to_string();
        let parsed = std::fs::read_to_string(&ann_path)
            .map_err(|e| format!("unreadable annotations: {e}"))
            .and_then(|t| {
                serde_json::from_str::<FfiwAnnotations>(&t)
                    .map_err(|e| format!("malformed annotations: {e}"))
            })
            .and_then(|a| ffiw_clip(&video, a));
        match parsed {
            Ok(c) => out.clips.push(c),
            Err(reason) => out.rejected.push(Rejection {
                source,
                clip_id: Some(video),
                reason,
            }),
        }
    }
    Ok(out)
}

pub fn ingest(path: &Path, layout: Layout) -> Result<Ingested> {
    match layout {
        Layout::Jsonl => ingest_jsonl(path),
        Layout::FfiwLike => {
            if !path.is_dir() {
                bail!("ffiw_like input {} must be a directory", path.display());
            }
            ingest_ffiw_like(path)
        }
    }
}

/// Path of the rejection list written next to `manifest`.
pub fn rejections_path(manifest: &Path) -> PathBuf {
    let mut name = manifest.file_stem().unwrap_or_default().to_os_string();
    name.push(".rejected.jsonl");
    manifest.with_file_name(name)
}

/// Writes the normalized manifest and the rejection list.
pub fn cmd_ingest(input: &Path, layout: Layout, manifest: &Path) -> Result<Ingested> {
    let res = ingest(input, layout)?;
    write_jsonl(manifest, &res.clips)?;
    write_jsonl(&rejections_path(manifest), &res.rejected)?;
    for r in &res.rejected {
        log::warn!(
            "rejected {} ({}): {}",
            r.clip_id.as_deref().unwrap_or("?"),
            r.source,
            r.reason
        );
    }
    Ok(res)
}
