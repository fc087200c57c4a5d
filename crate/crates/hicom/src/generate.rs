//! Writes a synthetic dataset: PNG frames, per-split manifests, per-clip
//! truth sidecars and a stratification audit.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hicom_core::model::ClipRecord;
use hicom_core::synth::{audit, plan_dataset, Canvas, SceneSpec, Split, SplitAudit, SplitRatios};
use serde::{Deserialize, Serialize};

use crate::io::{write_json, write_jsonl, write_png};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub clips: usize,
    pub seed: u64,
    pub ratios: SplitRatios,
    pub canvas: Canvas,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            clips: 1000,
            seed: 0,
            ratios: SplitRatios::default(),
            canvas: Canvas::default(),
        }
    }
}

pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.jsonl", split.name()))
}

pub fn frame_path(clip_id: &str, t: usize) -> String {
    format!("{clip_id}/frame_{t:03}.png")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub clips: usize,
    pub frames: usize,
    pub audit: BTreeMap<String, SplitAudit>,
}

/// Renders one clip and returns its manifest record.
pub fn write_clip(root: &Path, clip_id: &str, spec: &SceneSpec) -> Result<ClipRecord> {
    let dir = root.join(clip_id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for t in 0..spec.canvas.frames {
        write_png(&root.join(frame_path(clip_id, t)), &spec.render_frame(t))?;
    }
    write_json(&dir.join("truth.json"), spec)?;
    Ok(spec.clip_record(clip_id, |t| frame_path(clip_id, t)))
}

/// Generates the dataset under `out`. An existing non-empty directory is
/// refused unless `force`, in which case it is removed first.
pub fn generate(cfg: &DataConfig, out: &Path, force: bool) -> Result<GenerateSummary> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            bail!(
                "{} already exists and is not empty (use --force to overwrite)",
                out.display()
            );
        }
        fs::remove_dir_all(out).with_context(|| format!("removing {}", out.display()))?;
    }
    fs::create_dir_all(out)?;
    let plan = plan_dataset(cfg.clips, cfg.ratios, cfg.seed)?;
    let mut seen = BTreeSet::new();
    let mut specs = Vec::with_capacity(plan.clips.len());
    let mut manifests: BTreeMap<Split, Vec<ClipRecord>> = BTreeMap::new();
    for clip in &plan.clips {
        if !seen.insert(clip.clip_id.clone()) {
            bail!("output path collision for clip {}", clip.clip_id);
        }
        let spec = clip.spec(cfg.canvas)?;
        let record = write_clip(out, &clip.clip_id, &spec)?;
        manifests.entry(clip.split).or_default().push(record);
        specs.push((clip.split, spec));
        log::debug!("wrote {}", clip.clip_id);
    }
    for split in Split::ALL {
        write_jsonl(
            &manifest_path(out, split),
            manifests.get(&split).map_or(&[][..], |v| v),
        )?;
    }
    let refs: Vec<(Split, &SceneSpec)> = specs.iter().map(|(s, x)| (*s, x)).collect();
    let summary = GenerateSummary {
        clips: plan.clips.len(),
        frames: plan.clips.len() * cfg.canvas.frames,
        audit: audit(&refs),
    };
    write_json(&out.join("audit.json"), &summary)?;
    write_json(&out.join("data_config.json"), cfg)?;
    Ok(summary)
}
