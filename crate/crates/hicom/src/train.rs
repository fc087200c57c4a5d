//! Per-module training with Adam, min-validation-loss model selection and
//! per-epoch logs.

use std::borrow::Cow;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use hicom_core::autograd::{Tape, Var};
use hicom_core::body_face::AttributeNet;
use hicom_core::gaze::GazeNet;
use hicom_core::image::Image;
use hicom_core::inter_face::{median_distances, relative_margins, InterFaceNet, ScoreCalibration};
use hicom_core::model::{Attributes, ModuleId};
use hicom_core::nn::{Model, NamedTensor};
use hicom_core::optim::{loss_and_grad, Adam, AdamConfig};
use hicom_core::scene_motion::SceneMotionNet;
use hicom_core::synth::Split;
use hicom_core::Error as CoreError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_path, Checkpoint};
use crate::config::{RunConfig, TrainSettings};
use crate::data::{load_clips, ClipData};
use crate::generate::manifest_path;
use crate::io::{read_manifest, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub network: String,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (minimum validation loss).
    pub selected_epoch: usize,
    pub selected_val_loss: f64,
}

/// Splits `module`-facing names (`m1`, `m2`, `gaze`, `agegender`, `all`).
pub fn parse_modules(spec: &str) -> Result<Vec<ModuleId>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let ms: &[ModuleId] = match part.to_ascii_lowercase().as_str() {
            "m1" | "scene_motion" => &[ModuleId::M1],
            "m2" | "inter_face" => &[ModuleId::M2],
            "m3" | "gaze" => &[ModuleId::M3],
            "m4" | "agegender" | "body_face" => &[ModuleId::M4],
            "all" => &ModuleId::ALL,
            other => bail!("unknown module {other:?} (expected m1, m2, gaze, agegender or all)"),
        };
        for m in ms {
            if !out.contains(m) {
                out.push(*m);
            }
        }
    }
    if out.is_empty() {
        bail!("no modules given");
    }
    out.sort();
    Ok(out)
}

/// The optimizer config for one network, with its learning-rate override.
fn adam_for(base: &AdamConfig, s: &TrainSettings) -> AdamConfig {
    AdamConfig {
        lr: s.lr.unwrap_or(base.lr),
        ..*base
    }
}

/// Generic loop. `batch_loss(model, tape, items, train)` builds the mean
/// loss of a batch of item indices. Parameters of the epoch with the lowest
/// validation loss are restored at the end.
pub fn fit<M, F>(
    name: &str,
    model: &mut M,
    n_train: usize,
    n_val: usize,
    settings: &TrainSettings,
    adam_cfg: AdamConfig,
    seed: u64,
    mut batch_loss: F,
) -> Result<TrainLog>
where
    M: Model,
    F: FnMut(&M, &mut Tape, &[usize], bool) -> Result<Var>,
{
    if n_train == 0 || n_val == 0 {
        bail!("{name}: need training and validation items (got {n_train} and {n_val})");
    }
    adam_cfg.validate()?;
    let mut adam = Adam::new(model.store(), adam_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_train).collect();
    let val_items: Vec<usize> = (0..n_val).collect();
    let mut best: Option<(usize, f64, Vec<NamedTensor>)> = None;
    let mut epochs = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let take = settings.samples_per_epoch.unwrap_or(n_train).min(n_train);
        let (mut total, mut count) = (0.0, 0usize);
        for (b, batch) in order[..take].chunks(settings.batch_size).enumerate() {
            let mut inner = None;
            let res = loss_and_grad(model.store(), |tape| {
                batch_loss(&*model, tape, batch, true).map_err(|e| {
                    inner = Some(e);
                    CoreError::NonFinite("batch loss construction")
                })
            });
            if let Some(e) = inner {
                return Err(e.context(format!("{name}: epoch {epoch}, batch {b}")));
            }
            let (loss, grads) =
                res.map_err(|e| anyhow!("{name}: epoch {epoch}, batch {b}: {e}"))?;
            adam.step(model.store_mut(), &grads, epoch);
            if !model.store().is_finite() {
                bail!("{name}: parameters became non-finite at epoch {epoch}, batch {b}");
            }
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let val_loss = evaluate_loss(&*model, &val_items, settings.batch_size, &mut batch_loss)
            .with_context(|| format!("{name}: validation at epoch {epoch}"))?;
        let log = EpochLog {
            epoch,
            lr: adam_cfg.lr_at(epoch),
            train_loss: total / count as f64,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{name} epoch {epoch:>3}: train {:.5} val {:.5} ({:.1}s)",
            log.train_loss,
            log.val_loss,
            log.seconds
        );
        if best.as_ref().is_none_or(|(_, v, _)| val_loss < *v) {
            best = Some((epoch, val_loss, model.store().entries().to_vec()));
        }
        epochs.push(log);
    }
    let (selected_epoch, selected_val_loss, params) = best.expect("at least one epoch");
    model.store_mut().load_from(&params)?;
    Ok(TrainLog {
        network: name.into(),
        epochs,
        selected_epoch,
        selected_val_loss,
    })
}

fn evaluate_loss<M, F>(model: &M, items: &[usize], batch: usize, batch_loss: &mut F) -> Result<f64>
where
    M: Model,
    F: FnMut(&M, &mut Tape, &[usize], bool) -> Result<Var>,
{
    let mut total = 0.0;
    for chunk in items.chunks(batch) {
        let mut tape = Tape::new();
        let l = batch_loss(model, &mut tape, chunk, false)?;
        let v = tape.value(l).item();
        if !v.is_finite() {
            bail!("non-finite validation loss");
        }
        total += v * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

fn mean_of(tape: &mut Tape, losses: Vec<Var>) -> Var {
    let n = losses.len() as f64;
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l);
    }
    tape.scale(acc, 1.0 / n)
}

/// Deterministic frame choice for item `k` of a clip with `t` frames.
fn frame_of(k: usize, t: usize, salt: u64) -> usize {
    let mut z =
        (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z ^= z >> 29;
    (z % t as u64) as usize
}

/// `(clip, track)` items, optionally filtered.
fn tracks(clips: &[ClipData], keep: impl Fn(&ClipData, usize) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (c, clip) in clips.iter().enumerate() {
        for i in 0..clip.track_ids.len() {
            if keep(clip, i) {
                out.push((c, i));
            }
        }
    }
    out
}

pub struct TrainData {
    pub train: Vec<ClipData>,
    pub val: Vec<ClipData>,
}

impl TrainData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let load = |split| -> Result<Vec<ClipData>> {
            let path = manifest_path(&cfg.data_dir, split);
            let records = read_manifest(&path)?;
            load_clips(
                &cfg.data_dir,
                &records,
                &cfg.crops,
                &cfg.models.scene_motion,
                None,
            )
        };
        let start = Instant::now();
        let data = Self {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
        };
        log::info!(
            "loaded {} train / {} val clips in {:.1}s",
            data.train.len(),
            data.val.len(),
            start.elapsed().as_secs_f64()
        );
        Ok(data)
    }
}

pub fn train_m1(cfg: &RunConfig, data: &TrainData) -> Result<(Checkpoint, Vec<TrainLog>)> {
    let s = &cfg.training.m1;
    let mut net = SceneMotionNet::new(cfg.models.scene_motion.clone(), cfg.seed)?;
    let mut salt = 0u64;
    let log = fit(
        "m1",
        &mut net,
        data.train.len(),
        data.val.len(),
        s,
        adam_for(&cfg.optimizer, s),
        cfg.seed,
        |net, tape, items, train| {
            let clips = if train { &data.train } else { &data.val };
            salt += u64::from(train);
            let losses = items
                .iter()
                .map(|&i| {
                    let c = &clips[i];
                    let aug = if train && s.augment {
                        frame_of(i, 4, salt)
                    } else {
                        0
                    };
                    let motion = match aug {
                        1 => Cow::Owned(c.motion.mirrored()),
                        2 => Cow::Owned(c.motion.reversed()),
                        3 => Cow::Owned(c.motion.mirrored().reversed()),
                        _ => Cow::Borrowed(&c.motion),
                    };
                    net.loss(tape, &motion, &c.track_labels, c.any_fake())
                })
                .collect::<hicom_core::Result<Vec<_>>>()?;
            Ok(mean_of(tape, losses))
        },
    )?;
    let mut ck = Checkpoint::new(ModuleId::M1, cfg.seed);
    ck.push(
        "m1",
        &net,
        &net.cfg,
        log.selected_epoch,
        log.selected_val_loss,
    )?;
    Ok((ck, vec![log]))
}

pub fn train_m2(cfg: &RunConfig, data: &TrainData) -> Result<(Checkpoint, Vec<TrainLog>)> {
    let s = &cfg.training.m2;
    let frames = |clips: &[ClipData]| -> Vec<(usize, usize)> {
        clips
            .iter()
            .enumerate()
            .flat_map(|(c, clip)| (0..clip.frames.len()).map(move |f| (c, f)))
            .collect()
    };
    let (tr, va) = (frames(&data.train), frames(&data.val));
    let mut net = InterFaceNet::new(cfg.models.inter_face.clone(), cfg.seed)?;
    let mut calls = 0u64;
    let log = fit(
        "m2",
        &mut net,
        tr.len(),
        va.len(),
        s,
        adam_for(&cfg.optimizer, s),
        cfg.seed,
        |net, tape, items, train| {
            let (clips, index) = if train {
                (&data.train, &tr)
            } else {
                (&data.val, &va)
            };
            calls += 1;
            let mut losses = Vec::with_capacity(items.len());
            for &k in items {
                let (c, f) = index[k];
                let frame = &clips[c].frames[f];
                let crops: Vec<&Image> = frame.faces.iter().map(|x| &x.face_crop).collect();
                // validation pairs are fixed; training pairs are redrawn per call
                let pair_seed = if train {
                    cfg.seed ^ (calls << 20) ^ k as u64
                } else {
                    k as u64
                };
                losses.push(net.frame_loss(tape, &crops, &frame.labels(), pair_seed)?);
            }
            Ok(mean_of(tape, losses))
        },
    )?;
    net.calibration = calibrate_m2(&net, &data.val)?;
    let mut ck = Checkpoint::new(ModuleId::M2, cfg.seed);
    ck.push(
        "m2",
        &net,
        &net.cfg,
        log.selected_epoch,
        log.selected_val_loss,
    )?;
    ck.extra = serde_json::json!({ "calibration": net.calibration });
    Ok((ck, vec![log]))
}

/// Fits the margin/distance score calibration on validation frames.
pub fn calibrate_m2(net: &InterFaceNet, val: &[ClipData]) -> Result<ScoreCalibration> {
    let mut samples = Vec::new();
    for clip in val {
        for frame in &clip.frames {
            let crops: Vec<&Image> = frame.faces.iter().map(|x| &x.face_crop).collect();
            let emb = net.embed(&crops)?;
            let d = median_distances(&emb);
            let m = relative_margins(&emb);
            for ((m, d), face) in m.into_iter().zip(d).zip(&frame.faces) {
                samples.push((m, d, face.fake));
            }
        }
    }
    match ScoreCalibration::fit(&samples) {
        Ok(c) => Ok(c),
        Err(e) => {
            log::warn!("m2 calibration failed ({e}); using the relative classifier margin");
            Ok(ScoreCalibration::default())
        }
    }
}

pub fn train_m3(cfg: &RunConfig, data: &TrainData) -> Result<(Checkpoint, Vec<TrainLog>)> {
    let s = &cfg.training.gaze;
    let labelled = |c: &ClipData, i: usize| {
        c.frames
            .iter()
            .all(|f| f.faces.get(i).is_some_and(|x| x.gaze_locked.is_some()))
    };
    let (tr, va) = (tracks(&data.train, labelled), tracks(&data.val, labelled));
    let mut net = GazeNet::new(cfg.models.gaze.clone(), cfg.seed);
    let mut epoch_salt = 0u64;
    let log = fit(
        "gaze",
        &mut net,
        tr.len(),
        va.len(),
        s,
        adam_for(&cfg.optimizer, s),
        cfg.seed,
        |net, tape, items, train| {
            let (clips, index) = if train {
                (&data.train, &tr)
            } else {
                (&data.val, &va)
            };
            epoch_salt += u64::from(train);
            let (mut crops, mut locked) = (Vec::new(), Vec::new());
            for &k in items {
                let (c, i) = index[k];
                let t = frame_of(k, clips[c].frames.len(), if train { epoch_salt } else { 0 });
                let face = &clips[c].frames[t].faces[i];
                crops.push(&face.eye_crop);
                locked.push(face.gaze_locked.unwrap_or(true));
            }
            Ok(net.loss(tape, &crops, &locked)?)
        },
    )?;
    let mut ck = Checkpoint::new(ModuleId::M3, cfg.seed);
    ck.push(
        "gaze",
        &net,
        &net.cfg,
        log.selected_epoch,
        log.selected_val_loss,
    )?;
    Ok((ck, vec![log]))
}

pub fn train_m4(cfg: &RunConfig, data: &TrainData) -> Result<(Checkpoint, Vec<TrainLog>)> {
    let seed_body = cfg.seed.wrapping_add(1);
    let attrs = |c: &ClipData, i: usize| c.frames[0].faces.get(i).and_then(|f| f.attributes);

    // face net: real faces only, where rendered face and body attributes agree
    let real = |c: &ClipData, i: usize| attrs(c, i).is_some() && !c.track_labels[i];
    let (tr, va) = (tracks(&data.train, real), tracks(&data.val, real));
    let s = &cfg.training.face_attributes;
    let mut face = AttributeNet::new("face", cfg.models.face_attributes.clone(), cfg.seed);
    let mut salt = 0u64;
    let face_log = fit(
        "face_attributes",
        &mut face,
        tr.len(),
        va.len(),
        s,
        adam_for(&cfg.optimizer, s),
        cfg.seed,
        |net, tape, items, train| {
            let (clips, index) = if train {
                (&data.train, &tr)
            } else {
                (&data.val, &va)
            };
            salt += u64::from(train);
            let (mut imgs, mut truth): (Vec<&Image>, Vec<Attributes>) = (Vec::new(), Vec::new());
            for &k in items {
                let (c, i) = index[k];
                let t = frame_of(k, clips[c].frames.len(), if train { salt } else { 0 });
                let f = &clips[c].frames[t].faces[i];
                imgs.push(&f.face_crop);
                truth.push(f.attributes.expect("filtered"));
            }
            Ok(net.loss(tape, &imgs, &truth)?)
        },
    )?;

    // body net: every face with a usable body region, manifest attributes
    let has_body = |c: &ClipData, i: usize| {
        attrs(c, i).is_some() && c.frames.iter().all(|f| f.faces[i].body_blocked.is_some())
    };
    let (tr, va) = (tracks(&data.train, has_body), tracks(&data.val, has_body));
    let s = &cfg.training.body_attributes;
    let mut body = AttributeNet::new("body", cfg.models.body_attributes.clone(), seed_body);
    let mut salt = 0u64;
    let body_log = fit(
        "body_attributes",
        &mut body,
        tr.len(),
        va.len(),
        s,
        adam_for(&cfg.optimizer, s),
        seed_body,
        |net, tape, items, train| {
            let (clips, index) = if train {
                (&data.train, &tr)
            } else {
                (&data.val, &va)
            };
            salt += u64::from(train);
            let (mut imgs, mut truth): (Vec<&Image>, Vec<Attributes>) = (Vec::new(), Vec::new());
            for &k in items {
                let (c, i) = index[k];
                let t = frame_of(k, clips[c].frames.len(), if train { salt } else { 0 });
                let f = &clips[c].frames[t].faces[i];
                imgs.push(f.body_blocked.as_ref().expect("filtered"));
                truth.push(f.attributes.expect("filtered"));
            }
            Ok(net.loss(tape, &imgs, &truth)?)
        },
    )?;

    let mut ck = Checkpoint::new(ModuleId::M4, cfg.seed);
    ck.push(
        "face_attributes",
        &face,
        &face.cfg,
        face_log.selected_epoch,
        face_log.selected_val_loss,
    )?;
    ck.push(
        "body_attributes",
        &body,
        &body.cfg,
        body_log.selected_epoch,
        body_log.selected_val_loss,
    )?;
    Ok((ck, vec![face_log, body_log]))
}

/// Trains `modules`, writing checkpoints and logs under the run directory.
pub fn cmd_train(cfg: &RunConfig, modules: &[ModuleId]) -> Result<Vec<TrainLog>> {
    let data = TrainData::load(cfg)?;
    let mut logs = Vec::new();
    for &m in modules {
        let start = Instant::now();
        let (ck, module_logs) = match m {
            ModuleId::M1 => train_m1(cfg, &data)?,
            ModuleId::M2 => train_m2(cfg, &data)?,
            ModuleId::M3 => train_m3(cfg, &data)?,
            ModuleId::M4 => train_m4(cfg, &data)?,
        };
        ck.save(&checkpoint_path(&cfg.out_dir, m))?;
        let name = m.to_string().to_lowercase();
        write_json(&log_path(&cfg.out_dir, &name), &module_logs)?;
        log::info!("trained {m} in {:.1}s", start.elapsed().as_secs_f64());
        logs.extend(module_logs);
    }
    Ok(logs)
}

pub fn log_path(out_dir: &Path, module: &str) -> std::path::PathBuf {
    out_dir.join("logs").join(format!("train_{module}.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_names_parse() {
        assert_eq!(parse_modules("all").unwrap(), ModuleId::ALL.to_vec());
        assert_eq!(
            parse_modules("gaze, m1").unwrap(),
            vec![ModuleId::M1, ModuleId::M3]
        );
        assert_eq!(parse_modules("agegender").unwrap(), vec![ModuleId::M4]);
        assert!(parse_modules("m5").is_err());
        assert!(parse_modules("").is_err());
    }

    #[test]
    fn frame_choice_stays_in_range_and_varies() {
        let picks: Vec<usize> = (0..50).map(|k| frame_of(k, 4, 3)).collect();
        assert!(picks.iter().all(|&p| p < 4));
        assert!((0..4).all(|t| picks.contains(&t)));
    }
}
