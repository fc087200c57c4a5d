//! Scene-motion module: a strided convolutional pyramid over every frame of
//! a clip, RoIAlign pooling of each face and of the background ring around
//! it, and attention pooling over time (per face) and over faces plus scene
//! tokens (per frame).
//!
//! Face tokens also carry box motion relative to the other faces of the
//! frame, so a face that moves unlike its neighbours and the camera stands
//! out even when its pixels look plausible.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::image::{Image, InputNorm};
use crate::math;
use crate::model::{ClipSample, FaceBox};
use crate::nn::{concat_cols, AttentionPool, Conv2d, Linear, Model, ParamStore};
use crate::roi::Sampler;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Geometry features per face and frame (see [`MotionInput`]).
pub const GEOMETRY_DIM: usize = 10;

/// Motion features are expressed in tenths of a face height, so that
/// typical values sit near unit scale next to the pooled pixel features.
const MOTION_UNIT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneMotionConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Temporal window; shorter clips are edge-padded.
    pub frames: usize,
    /// Channel width of each pyramid level (strides 4, 8, 16, ...).
    pub widths: Vec<usize>,
    pub roi_output: usize,
    pub roi_samples: usize,
    pub embed_dim: usize,
    pub background_dilation: f64,
    pub lambda_fa: f64,
    pub lambda_fr: f64,
    pub norm: InputNorm,
}

impl Default for SceneMotionConfig {
    fn default() -> Self {
        Self {
            input_h: 720,
            input_w: 1280,
            frames: 8,
            widths: vec![32, 64, 128],
            roi_output: 7,
            roi_samples: 2,
            embed_dim: 128,
            background_dilation: 2.0,
            lambda_fa: 0.5,
            lambda_fr: 0.5,
            norm: InputNorm::Standardized,
        }
    }
}

impl SceneMotionConfig {
    pub fn desk() -> Self {
        Self {
            input_h: 90,
            input_w: 160,
            frames: 4,
            widths: vec![8, 16, 32],
            roi_output: 3,
            embed_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0
            || self.widths.is_empty()
            || self.roi_output == 0
            || self.roi_samples == 0
        {
            return Err(Error::InvalidConfig(
                "scene_motion: frames, scales and roi sizes must be >= 1".into(),
            ));
        }
        if !(self.lambda_fa >= 0.0 && self.lambda_fr >= 0.0) {
            return Err(Error::InvalidConfig(
                "scene_motion: loss weights must be >= 0".into(),
            ));
        }
        if self.input_h < 4 || self.input_w < 4 || !(self.background_dilation > 1.0) {
            return Err(Error::InvalidConfig(
                "scene_motion: input >= 4 px and dilation > 1".into(),
            ));
        }
        Ok(())
    }

    /// Stride of pyramid level `s` relative to the network input.
    pub fn stride(&self, s: usize) -> usize {
        4 << s
    }

    /// `(h, w)` of pyramid level `s`.
    pub fn map_size(&self, s: usize) -> (usize, usize) {
        let (mut h, mut w) = ((self.input_h - 4) / 4 + 1, (self.input_w - 4) / 4 + 1);
        for _ in 0..s {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h.max(1), w.max(1))
    }
}

/// One clip prepared for the network: frames resized to the input size and
/// per-face box tracks in input pixels, padded to the temporal window.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionInput {
    pub frames: Vec<Image>,
    /// `tracks[face][frame]`.
    pub tracks: Vec<Vec<FaceBox>>,
}

impl MotionInput {
    /// `tracks[face][frame]` are boxes in source-frame pixels.
    pub fn new(
        cfg: &SceneMotionConfig,
        frames: &[&Image],
        tracks: &[Vec<FaceBox>],
    ) -> Result<Self> {
        let first = frames.first().ok_or(Error::Empty("clip frames"))?;
        if tracks.is_empty() {
            return Err(Error::Empty("face tracks"));
        }
        let (sx, sy) = (
            cfg.input_w as f64 / first.width() as f64,
            cfg.input_h as f64 / first.height() as f64,
        );
        let t = frames.len().max(cfg.frames);
        let mut out_frames: Vec<Image> = frames
            .iter()
            .map(|f| f.resize(cfg.input_w, cfg.input_h))
            .collect();
        while out_frames.len() < t {
            out_frames.push(out_frames.last().unwrap().clone());
        }
        let mut out_tracks = Vec::with_capacity(tracks.len());
        for tr in tracks {
            if tr.len() != frames.len() {
                return Err(Error::LengthMismatch {
                    expected: frames.len(),
                    found: tr.len(),
                });
            }
            let mut boxes: Vec<FaceBox> = tr
                .iter()
                .map(|b| FaceBox::new(b.x * sx, b.y * sy, b.w * sx, b.h * sy))
                .collect();
            while boxes.len() < t {
                boxes.push(*boxes.last().unwrap());
            }
            if boxes.iter().any(|b| !(b.w > 0.0 && b.h > 0.0)) {
                return Err(Error::DegenerateBox { w: 0.0, h: 0.0 });
            }
            out_tracks.push(boxes);
        }
        Ok(Self {
            frames: out_frames,
            tracks: out_tracks,
        })
    }

    /// Tracks follow `face_id`; a face missing from a frame reuses its
    /// nearest earlier (or first) box.
    pub fn from_clip(cfg: &SceneMotionConfig, clip: &ClipSample) -> Result<Self> {
        let first = clip.frames.first().ok_or(Error::Empty("clip frames"))?;
        let ids: Vec<u32> = first.faces.iter().map(|f| f.face_id).collect();
        let mut tracks = Vec::with_capacity(ids.len());
        for id in &ids {
            let mut tr: Vec<Option<FaceBox>> = clip
                .frames
                .iter()
                .map(|fr| {
                    fr.faces
                        .iter()
                        .find(|f| f.face_id == *id)
                        .map(|f| f.face_box)
                })
                .collect();
            let seed = tr
                .iter()
                .flatten()
                .next()
                .copied()
                .ok_or(Error::Empty("face track"))?;
            let mut last = seed;
            for b in tr.iter_mut() {
                match b {
                    Some(v) => last = *v,
                    None => *b = Some(last),
                }
            }
            tracks.push(tr.into_iter().map(Option::unwrap).collect());
        }
        let frames: Vec<&Image> = clip.frames.iter().map(|f| &f.image).collect();
        Self::new(cfg, &frames, &tracks)
    }

    /// Left-right mirror of frames and boxes.
    pub fn mirrored(&self) -> Self {
        let w = self.frames.first().map_or(0.0, |f| f.width() as f64);
        Self {
            frames: self.frames.iter().map(Image::mirrored).collect(),
            tracks: self
                .tracks
                .iter()
                .map(|tr| {
                    tr.iter()
                        .map(|b| FaceBox::new(w - b.x - b.w, b.y, b.w, b.h))
                        .collect()
                })
                .collect(),
        }
    }

    /// The clip played backwards.
    pub fn reversed(&self) -> Self {
        let rev = |v: &Vec<FaceBox>| v.iter().rev().copied().collect();
        Self {
            frames: self.frames.iter().rev().cloned().collect(),
            tracks: self.tracks.iter().map(rev).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `[faces][frames][GEOMETRY_DIM]`: box size relative to the input;
    /// centre displacement and log-scale change since the previous frame, in
    /// tenths of a face height, relative to the median over faces; the change
    /// of that relative displacement; and the displacement itself, absolute.
    pub fn geometry(&self, input_w: usize, input_h: usize) -> Vec<Vec<[f64; GEOMETRY_DIM]>> {
        let (n, t) = (self.tracks.len(), self.frames.len());
        let mut raw = vec![vec![[0.0f64; 3]; t]; n];
        let mut rel = vec![vec![[0.0f64; 3]; t]; n];
        for k in 1..t {
            for (i, tr) in self.tracks.iter().enumerate() {
                let (a, b) = (tr[k - 1], tr[k]);
                let ((ax, ay), (bx, by)) = (a.center(), b.center());
                raw[i][k] = [(bx - ax) / a.h, (by - ay) / a.h, math::log(b.h / a.h)]
                    .map(|v| v * MOTION_UNIT);
            }
            for c in 0..3 {
                let mut col: Vec<f64> = (0..n).map(|i| raw[i][k][c]).collect();
                col.sort_by(f64::total_cmp);
                let med = if n % 2 == 1 {
                    col[n / 2]
                } else {
                    0.5 * (col[n / 2 - 1] + col[n / 2])
                };
                for i in 0..n {
                    rel[i][k][c] = raw[i][k][c] - med;
                }
            }
        }
        (0..n)
            .map(|i| {
                (0..t)
                    .map(|k| {
                        let b = self.tracks[i][k];
                        let (m, r) = (rel[i][k], raw[i][k]);
                        let prev = if k > 0 { rel[i][k - 1] } else { [0.0; 3] };
                        let acc = if k > 1 {
                            [m[0] - prev[0], m[1] - prev[1]]
                        } else {
                            [0.0; 2]
                        };
                        [
                            b.w / input_w as f64,
                            b.h / input_h as f64,
                            m[0],
                            m[1],
                            m[2],
                            acc[0],
                            acc[1],
                            r[0],
                            r[1],
                            r[2],
                        ]
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionOutput {
    /// Fake probability per face track.
    pub face_scores: Vec<f64>,
    /// Fake probability per frame of the (padded) window.
    pub frame_scores: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SceneMotionNet {
    pub cfg: SceneMotionConfig,
    store: ParamStore,
    pyramid: Vec<Conv2d>,
    face_proj: Linear,
    bg_proj: Linear,
    geo_proj: Linear,
    temporal: Linear,
    scene_proj: Linear,
    face_pool: AttentionPool,
    frame_pool: AttentionPool,
    face_head: Linear,
    frame_head: Linear,
}

impl Model for SceneMotionNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl SceneMotionNet {
    pub fn new(cfg: SceneMotionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;
        let mut pyramid = Vec::new();
        let mut in_ch = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let (k, stride, pad) = if i == 0 { (4, 4, 0) } else { (3, 2, 1) };
            pyramid.push(Conv2d::new(
                s,
                r,
                &alloc::format!("motion.pyramid{i}"),
                in_ch,
                w,
                k,
                stride,
                pad,
                1.0,
            ));
            in_ch = w;
        }
        let cells = cfg.roi_output * cfg.roi_output;
        let pooled: usize = cfg.widths.iter().map(|w| w * cells).sum();
        let d = cfg.embed_dim;
        let face_proj = Linear::new(s, r, "motion.face_proj", pooled, d);
        let bg_proj = Linear::with_gain(s, r, "motion.bg_proj", pooled, d, 0.5);
        let geo_proj = Linear::new(s, r, "motion.geo_proj", GEOMETRY_DIM, d);
        let temporal = Linear::new(s, r, "motion.temporal", 3 * d, d);
        let scene_proj = Linear::new(s, r, "motion.scene_proj", *cfg.widths.last().unwrap(), d);
        let face_pool = AttentionPool::new(s, r, "motion.face_pool", d);
        let frame_pool = AttentionPool::new(s, r, "motion.frame_pool", d);
        let face_head = Linear::new(s, r, "motion.face_head", d, 2);
        let frame_head = Linear::new(s, r, "motion.frame_head", d, 2);
        Ok(Self {
            cfg,
            store,
            pyramid,
            face_proj,
            bg_proj,
            geo_proj,
            temporal,
            scene_proj,
            face_pool,
            frame_pool,
            face_head,
            frame_head,
        })
    }

    /// Feature maps of one input-sized frame, one per pyramid level.
    pub fn extract_multiscale_features(&self, tape: &mut Tape, frame: &Image) -> Result<Vec<Var>> {
        if frame.width() != self.cfg.input_w || frame.height() != self.cfg.input_h {
            return Err(Error::Shape(alloc::format!(
                "scene_motion expects {}x{} frames",
                self.cfg.input_w,
                self.cfg.input_h
            )));
        }
        let mut h = tape.constant(self.cfg.norm.apply(frame));
        let mut maps = Vec::with_capacity(self.pyramid.len());
        for conv in &self.pyramid {
            let y = conv.forward(tape, &self.store, h);
            h = tape.silu(y);
            maps.push(h);
        }
        Ok(maps)
    }

    /// Numeric feature maps of one frame.
    pub fn feature_maps(&self, frame: &Image) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let maps = self.extract_multiscale_features(&mut tape, frame)?;
        Ok(maps.iter().map(|&m| tape.value(m).clone()).collect())
    }

    fn region_samplers(
        &self,
        region: &FaceBox,
        exclude: Option<&FaceBox>,
    ) -> Result<Vec<Rc<Sampler>>> {
        (0..self.cfg.widths.len())
            .map(|s| {
                let (h, w) = self.cfg.map_size(s);
                Sampler::roi_align(
                    h,
                    w,
                    self.cfg.stride(s) as f64,
                    region,
                    self.cfg.roi_output,
                    self.cfg.roi_samples,
                    exclude,
                )
                .map(Rc::new)
            })
            .collect()
    }

    /// Pools `region` from all levels into one `[1, sum(c_s * g^2)]` row.
    fn pool(&self, tape: &mut Tape, maps: &[Var], samplers: &[Rc<Sampler>]) -> Var {
        let parts: Vec<Var> = maps
            .iter()
            .zip(samplers)
            .map(|(&m, s)| {
                let p = tape.sample(m, s.clone());
                let n = tape.value(p).len();
                tape.reshape(p, &[n])
            })
            .collect();
        let v = tape.concat(&parts);
        let n = tape.value(v).len();
        tape.reshape(v, &[1, n])
    }

    /// `([faces, 2], [frames, 2])` logits.
    pub fn forward(&self, tape: &mut Tape, input: &MotionInput) -> Result<(Var, Var)> {
        let (n, t) = (input.tracks.len(), input.len());
        if n == 0 {
            return Err(Error::Empty("face tracks"));
        }
        let d = self.cfg.embed_dim;
        let geometry = input.geometry(self.cfg.input_w, self.cfg.input_h);
        // per frame: [n, d] region tokens and a [1, d] scene token
        let mut tokens: Vec<Var> = Vec::with_capacity(t);
        let mut scene: Vec<Var> = Vec::with_capacity(t);
        for k in 0..t {
            let maps = self.extract_multiscale_features(tape, &input.frames[k])?;
            let mut face_rows = Vec::with_capacity(n);
            let mut bg_rows = Vec::with_capacity(n);
            for tr in &input.tracks {
                let b = tr[k];
                let fs = self.region_samplers(&b, None)?;
                let bs = self.region_samplers(&b.dilate(self.cfg.background_dilation), Some(&b))?;
                face_rows.push(self.pool(tape, &maps, &fs));
                bg_rows.push(self.pool(tape, &maps, &bs));
            }
            let faces = tape.concat(&face_rows);
            let bgs = tape.concat(&bg_rows);
            let geo: Vec<f64> = geometry.iter().flat_map(|g| g[k]).collect();
            let geo = tape.constant(Tensor::from_vec(&[n, GEOMETRY_DIM], geo));
            let a = self.face_proj.forward(tape, &self.store, faces);
            let b = self.bg_proj.forward(tape, &self.store, bgs);
            let g = self.geo_proj.forward(tape, &self.store, geo);
            let ab = tape.add(a, b);
            let x = tape.add(ab, g);
            tokens.push(tape.silu(x));

            let top = *maps.last().unwrap();
            let (h, w) = self.cfg.map_size(self.cfg.widths.len() - 1);
            let gap = tape.sample(top, Rc::new(Sampler::global_average(h, w)));
            let gap = tape.transpose(gap);
            let s = self.scene_proj.forward(tape, &self.store, gap);
            scene.push(tape.silu(s));
        }
        // temporal change of each token, raw and relative to the frame mean
        let mut hidden: Vec<Var> = Vec::with_capacity(t);
        let zeros = tape.constant(Tensor::zeros(&[n, d]));
        for k in 0..t {
            let delta = if k == 0 {
                zeros
            } else {
                tape.sub(tokens[k], tokens[k - 1])
            };
            let mean = tape.mean_rows(delta);
            let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
            let mean = tape.reshape(mean, &[1, d]);
            let spread = tape.matmul(ones, mean);
            let rel = tape.sub(delta, spread);
            let cat = concat_cols(tape, &[tokens[k], delta, rel]);
            let h = self.temporal.forward(tape, &self.store, cat);
            hidden.push(tape.silu(h));
        }
        let mut face_logits = Vec::with_capacity(n);
        for i in 0..n {
            let seq: Vec<Var> = hidden.iter().map(|&h| tape.slice_rows(h, i, 1)).collect();
            let seq = tape.concat(&seq);
            let pooled = self.face_pool.forward(tape, &self.store, seq);
            face_logits.push(self.face_head.forward(tape, &self.store, pooled));
        }
        let mut frame_logits = Vec::with_capacity(t);
        for k in 0..t {
            let all = tape.concat(&[hidden[k], scene[k]]);
            let pooled = self.frame_pool.forward(tape, &self.store, all);
            frame_logits.push(self.frame_head.forward(tape, &self.store, pooled));
        }
        let faces = tape.concat(&face_logits);
        let frames = tape.concat(&frame_logits);
        if !tape.value(faces).is_finite() || !tape.value(frames).is_finite() {
            return Err(Error::NonFinite("scene_motion activations"));
        }
        Ok((faces, frames))
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        input: &MotionInput,
        y_fa: &[bool],
        y_fr: bool,
    ) -> Result<Var> {
        let (faces, frames) = self.forward(tape, input)?;
        loss_sp(
            tape,
            faces,
            frames,
            y_fa,
            y_fr,
            self.cfg.lambda_fa,
            self.cfg.lambda_fr,
        )
    }

    pub fn predict(&self, input: &MotionInput) -> Result<MotionOutput> {
        let mut tape = Tape::new();
        let (faces, frames) = self.forward(&mut tape, input)?;
        let p = |v: &Tensor| {
            v.data()
                .chunks_exact(2)
                .map(|r| math::sigmoid(r[1] - r[0]))
                .collect()
        };
        Ok(MotionOutput {
            face_scores: p(tape.value(faces)),
            frame_scores: p(tape.value(frames)),
        })
    }
}

/// `lambda_fa * CE(face logits) + lambda_fr * CE(frame logits)`, every frame
/// row targeting `y_fr`.
pub fn loss_sp(
    tape: &mut Tape,
    face_logits: Var,
    frame_logits: Var,
    y_fa: &[bool],
    y_fr: bool,
    lambda_fa: f64,
    lambda_fr: f64,
) -> Result<Var> {
    if y_fa.is_empty() {
        return Err(Error::Empty("faces"));
    }
    let (rows, _) = tape.value(face_logits).as_matrix();
    if rows != y_fa.len() {
        return Err(Error::LengthMismatch {
            expected: rows,
            found: y_fa.len(),
        });
    }
    let face_t: Vec<usize> = y_fa.iter().map(|&f| usize::from(f)).collect();
    let (frames, _) = tape.value(frame_logits).as_matrix();
    let frame_t = vec![usize::from(y_fr); frames];
    let ce_fa = tape.cross_entropy(face_logits, &face_t);
    let ce_fr = tape.cross_entropy(frame_logits, &frame_t);
    let a = tape.scale(ce_fa, lambda_fa);
    let b = tape.scale(ce_fr, lambda_fr);
    Ok(tape.add(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SceneMotionConfig {
        SceneMotionConfig {
            input_h: 32,
            input_w: 48,
            frames: 2,
            widths: vec![4, 4, 4],
            roi_output: 2,
            embed_dim: 16,
            ..SceneMotionConfig::default()
        }
    }

    fn frame(w: usize, h: usize, shift: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = (((x + shift) * 5 + y * 3) % 13) as f32 / 12.0;
                img.set_pixel(x, y, [v, 0.5, 1.0 - v]);
            }
        }
        img
    }

    fn input(cfg: &SceneMotionConfig, n_faces: usize) -> MotionInput {
        let frames = [frame(48, 32, 0), frame(48, 32, 1)];
        let refs: Vec<&Image> = frames.iter().collect();
        let tracks: Vec<Vec<FaceBox>> = (0..n_faces)
            .map(|i| {
                vec![
                    FaceBox::new(4.0 + 12.0 * i as f64, 6.0, 8.0, 10.0),
                    FaceBox::new(5.0 + 12.0 * i as f64, 6.5, 8.0, 10.0),
                ]
            })
            .collect();
        MotionInput::new(cfg, &refs, &tracks).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::zeros(&[3, 2]));
        let g = t.constant(Tensor::zeros(&[4, 2]));
        let l = loss_sp(&mut t, f, g, &[true, false, true], true, 0.5, 0.5).unwrap();
        assert!((t.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss_sp(&mut t, f, g, &[], true, 0.5, 0.5).is_err());
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::from_vec(&[1, 2], vec![-50.0, 50.0]));
        let g = t.constant(Tensor::from_vec(&[1, 2], vec![-50.0, 50.0]));
        let l = loss_sp(&mut t, f, g, &[true], true, 0.5, 0.5).unwrap();
        assert!(t.value(l).item() < 1e-12);
    }

    #[test]
    fn map_sizes_follow_strides() {
        let cfg = SceneMotionConfig {
            input_h: 64,
            input_w: 96,
            ..tiny()
        };
        let net = SceneMotionNet::new(cfg.clone(), 1).unwrap();
        let maps = net.feature_maps(&frame(96, 64, 0)).unwrap();
        let dims: Vec<(usize, usize)> = maps.iter().map(|m| (m.shape()[1], m.shape()[2])).collect();
        assert_eq!(dims, vec![(16, 24), (8, 12), (4, 6)]);
        let big = SceneMotionConfig {
            input_h: 128,
            input_w: 192,
            ..cfg
        };
        let net2 = SceneMotionNet::new(big, 1).unwrap();
        let maps2 = net2.feature_maps(&frame(192, 128, 0)).unwrap();
        for (a, b) in maps.iter().zip(&maps2) {
            assert_eq!(
                (b.shape()[1], b.shape()[2]),
                (2 * a.shape()[1], 2 * a.shape()[2])
            );
        }
    }

    #[test]
    fn static_frames_give_equal_features() {
        let cfg = tiny();
        let net = SceneMotionNet::new(cfg, 2).unwrap();
        let img = Image::filled(48, 32, [0.4, 0.3, 0.2]);
        let a = net.feature_maps(&img).unwrap();
        let b = net.feature_maps(&img.clone()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn face_order_is_a_set() {
        let cfg = tiny();
        let net = SceneMotionNet::new(cfg.clone(), 3).unwrap();
        let mut inp = input(&cfg, 3);
        let base = net.predict(&inp).unwrap();
        inp.tracks.swap(0, 2);
        let perm = net.predict(&inp).unwrap();
        assert!((base.face_scores[0] - perm.face_scores[2]).abs() < 1e-12);
        assert!((base.face_scores[1] - perm.face_scores[1]).abs() < 1e-12);
        for (a, b) in base.frame_scores.iter().zip(&perm.frame_scores) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_tracks_score_identically() {
        let cfg = tiny();
        let net = SceneMotionNet::new(cfg.clone(), 4).unwrap();
        let mut inp = input(&cfg, 2);
        inp.tracks.push(inp.tracks[0].clone());
        let out = net.predict(&inp).unwrap();
        assert_eq!(out.face_scores[0], out.face_scores[2]);
    }

    #[test]
    fn short_clips_are_edge_padded() {
        let cfg = SceneMotionConfig {
            frames: 4,
            ..tiny()
        };
        let f = frame(48, 32, 0);
        let inp = MotionInput::new(&cfg, &[&f], &[vec![FaceBox::new(2.0, 2.0, 8.0, 8.0)]]).unwrap();
        assert_eq!(inp.len(), 4);
        assert!(inp.frames.iter().all(|x| *x == inp.frames[0]));
        let net = SceneMotionNet::new(cfg.clone(), 5).unwrap();
        let out = net.predict(&inp).unwrap();
        assert_eq!(out.frame_scores.len(), 4);
        let maps: Vec<_> = inp
            .frames
            .iter()
            .map(|fr| net.feature_maps(fr).unwrap())
            .collect();
        assert!(maps.iter().all(|m| *m == maps[0]));
    }

    #[test]
    fn reproducible_from_seed() {
        let cfg = tiny();
        let a = SceneMotionNet::new(cfg.clone(), 9)
            .unwrap()
            .predict(&input(&cfg, 2))
            .unwrap();
        let b = SceneMotionNet::new(cfg.clone(), 9)
            .unwrap()
            .predict(&input(&cfg, 2))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn relative_geometry_cancels_common_motion() {
        let cfg = tiny();
        let inp = input(&cfg, 3);
        let g = inp.geometry(cfg.input_w, cfg.input_h);
        for face in &g {
            for v in &face[1][2..7] {
                assert!(v.abs() < 1e-12);
            }
            for c in 7..10 {
                assert!((face[1][c] - g[0][1][c]).abs() < 1e-12);
            }
        }
    }
}
