//! Human-readable explanations of detections.
//!
//! Offline mode fills a fixed template from the fusion attribution and the
//! module outputs. LLM mode POSTs a JSON prompt to an HTTP endpoint and keeps
//! the reply verbatim next to the template; any failure falls back to the
//! template and marks the record degraded.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use hicom_core::model::{Flag, ModuleId, ModuleSet, ModuleVerdict};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::evaluate::DetectionRecord;
use crate::io::{read_jsonl, write_jsonl};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Offline,
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub clip_id: String,
    pub frame_id: u32,
    pub face_id: u32,
    pub fake: bool,
    pub attribution: ModuleSet,
    pub verdicts: Vec<ModuleVerdict>,
    /// Template text; always present.
    pub text: String,
    /// Endpoint reply, stored verbatim.
    pub llm_text: Option<String>,
    pub source: Source,
    /// LLM mode was requested but the endpoint failed.
    pub degraded: bool,
}

pub enum Mode {
    Offline,
    Llm {
        endpoint: String,
        timeout: Duration,
        model: Option<String>,
    },
}

/// Rejects anything but an absolute http(s) URL with a host.
pub fn validate_endpoint(url: &str) -> Result<()> {
    let u = url::Url::parse(url)
        .with_context(|| format!("explain endpoint {url:?} is not a valid URL"))?;
    if !matches!(u.scheme(), "http" | "https") || u.host_str().is_none_or(str::is_empty) {
        bail!("explain endpoint {url:?} must be an http(s) URL with a host");
    }
    Ok(())
}

fn describe(v: &ModuleVerdict) -> String {
    match (v.score, v.flag) {
        (Some(s), _) => format!("score {s:.3}"),
        (None, Flag::Flagged) => "rule fired".into(),
        (None, Flag::Clear) => "rule clear".into(),
        (None, Flag::NotApplicable) => "abstained".into(),
    }
}

fn verdicts_of(d: &DetectionRecord) -> Vec<ModuleVerdict> {
    ModuleId::ALL
        .iter()
        .filter_map(|&m| d.verdicts.get(m).copied())
        .collect()
}

/// Deterministic template. Each attributed module's cue appears exactly
/// once; cues of other modules never appear.
pub fn template(d: &DetectionRecord) -> String {
    let head = format!(
        "Face {} in frame {} of clip {} is {} (fused score {:.3}).",
        d.face_id,
        d.frame_id,
        d.clip_id,
        if d.fused.fake {
            "likely manipulated"
        } else {
            "consistent with a real face"
        },
        d.fused.score
    );
    if d.fused.attribution.is_empty() {
        return format!("{head} No module raised a contextual inconsistency.");
    }
    let reasons: Vec<String> = d
        .fused
        .attribution
        .iter()
        .map(|m| {
            let detail = d
                .verdicts
                .get(m)
                .map(describe)
                .unwrap_or_else(|| "no output".into());
            format!("{} ({m}, {detail})", m.cue())
        })
        .collect();
    format!("{head} Flagged cues: {}.", reasons.join("; "))
}

/// The structured prompt sent to the endpoint.
pub fn prompt(d: &DetectionRecord, model: Option<&str>) -> serde_json::Value {
    let modules: Vec<_> = verdicts_of(d)
        .iter()
        .map(|v| json!({ "module": v.module, "cue": v.module.cue(), "score": v.score, "flag": v.flag }))
        .collect();
    json!({
        "model": model,
        "task": "Explain in two sentences why this face was judged real or fake, citing only the flagged cues.",
        "face": { "clip_id": d.clip_id, "frame_id": d.frame_id, "face_id": d.face_id },
        "fused": { "fake": d.fused.fake, "score": d.fused.score, "attribution": d.fused.attribution },
        "modules": modules,
    })
}

fn ask(endpoint: &str, timeout: Duration, body: &serde_json::Value) -> Result<String> {
    let resp = ureq::post(endpoint)
        .timeout(timeout)
        .send_json(body.clone())?;
    Ok(resp.into_string()?)
}

pub fn explain(d: &DetectionRecord, mode: &Mode) -> ExplanationRecord {
    let text = template(d);
    let (llm_text, source, degraded) = match mode {
        Mode::Offline => (None, Source::Offline, false),
        Mode::Llm {
            endpoint,
            timeout,
            model,
        } => match ask(endpoint, *timeout, &prompt(d, model.as_deref())) {
            Ok(reply) => (Some(reply), Source::Llm, false),
            Err(e) => {
                log::warn!(
                    "LLM endpoint failed for {}/{}/{}: {e:#}; using the template",
                    d.clip_id,
                    d.frame_id,
                    d.face_id
                );
                (None, Source::Offline, true)
            }
        },
    };
    ExplanationRecord {
        clip_id: d.clip_id.clone(),
        frame_id: d.frame_id,
        face_id: d.face_id,
        fake: d.fused.fake,
        attribution: d.fused.attribution,
        verdicts: verdicts_of(d),
        text,
        llm_text,
        source,
        degraded,
    }
}

pub fn detections_path(out_dir: &Path) -> PathBuf {
    out_dir.join("eval").join("detections.jsonl")
}

/// Explains every stored detection. `llm` overrides the configured endpoint;
/// `offline` forces template mode.
pub fn cmd_explain(
    cfg: &RunConfig,
    offline: bool,
    llm: Option<&str>,
) -> Result<(PathBuf, Vec<ExplanationRecord>)> {
    let endpoint = if offline {
        None
    } else {
        llm.map(str::to_owned)
            .or_else(|| cfg.explain.endpoint.clone())
    };
    let mode = match endpoint {
        None => Mode::Offline,
        Some(endpoint) => {
            validate_endpoint(&endpoint)?;
            Mode::Llm {
                endpoint,
                timeout: Duration::from_millis(cfg.explain.timeout_ms),
                model: cfg.explain.model.clone(),
            }
        }
    };
    let src = detections_path(&cfg.out_dir);
    if !src.exists() {
        bail!(
            "no detections at {} (run `hicom evaluate` first)",
            src.display()
        );
    }
    let detections: Vec<DetectionRecord> = read_jsonl(&src)?;
    let records: Vec<ExplanationRecord> = detections.iter().map(|d| explain(d, &mode)).collect();
    let out = cfg.out_dir.join("eval").join("explanations.jsonl");
    write_jsonl(&out, &records)?;
    Ok((out, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_validated() {
        assert!(validate_endpoint("http://127.0.0.1:9/v1").is_ok());
        assert!(validate_endpoint("https://example.org").is_ok());
        assert!(validate_endpoint("ftp://example.org").is_err());
        assert!(validate_endpoint("localhost:8080").is_err());
        assert!(validate_endpoint("no url").is_err());
    }
}
