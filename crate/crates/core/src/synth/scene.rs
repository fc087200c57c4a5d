//! Scene specifications and their renderer.
//!
//! A [`SceneSpec`] fixes everything about a clip: the background, camera
//! pan, and for every person the body and face attributes, gaze, motion and
//! injected anomalies. Rendering is a pure function of the spec.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::color::shift_hue;
use super::raster;
use crate::body_face::mismatch_rule;
use crate::body_face::{AttributeGuess, AttributePrediction};
use crate::gaze::gaze_rule;
use crate::image::Image;
use crate::math;
use crate::model::{
    AgeClass, Attributes, ClipRecord, FaceBox, FaceRecord, Flag, FrameRecord, GenderClass, ModuleId,
};
use crate::{Error, Result};

/// Largest IoU allowed between two face boxes of the same frame.
pub const MAX_FACE_IOU: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    MotionJitter,
    AppearanceMismatch,
    GazeOutlier,
    BodyFaceMismatch,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::MotionJitter,
        AnomalyKind::AppearanceMismatch,
        AnomalyKind::GazeOutlier,
        AnomalyKind::BodyFaceMismatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::MotionJitter => "motion_jitter",
            AnomalyKind::AppearanceMismatch => "appearance_mismatch",
            AnomalyKind::GazeOutlier => "gaze_outlier",
            AnomalyKind::BodyFaceMismatch => "body_face_mismatch",
        }
    }

    /// The module designed to catch this anomaly.
    pub fn module(self) -> ModuleId {
        match self {
            AnomalyKind::MotionJitter => ModuleId::M1,
            AnomalyKind::AppearanceMismatch => ModuleId::M2,
            AnomalyKind::GazeOutlier => ModuleId::M3,
            AnomalyKind::BodyFaceMismatch => ModuleId::M4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GazeTarget {
    Camera,
    /// Pupil offset as a fraction of the eye's semi-axes.
    Away {
        dx: f64,
        dy: f64,
    },
}

impl GazeTarget {
    pub fn is_locked(&self) -> bool {
        matches!(self, GazeTarget::Camera)
    }
}

/// How the group's gaze is arranged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GazeLayout {
    /// Everyone looks at the camera except gaze-outlier fakes.
    Locked,
    /// More faces look away than at the camera.
    Dispersed,
    /// Roughly half look away; the rule flags nobody.
    Balanced,
}

/// Per-face appearance edits; the identity is `(0, 1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    /// Hue rotation in turns.
    pub hue_shift: f64,
    pub illumination: f64,
    /// Block size in pixels of a resolution loss; 1 means none.
    pub resolution: f64,
}

impl Appearance {
    pub const IDENTITY: Appearance = Appearance {
        hue_shift: 0.0,
        illumination: 1.0,
        resolution: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sway {
    pub amp_x: f64,
    pub amp_y: f64,
    /// Cycles per frame.
    pub freq: f64,
    pub phase_x: f64,
    pub phase_y: f64,
}

impl Sway {
    fn at(&self, t: f64) -> (f64, f64) {
        let w = 2.0 * PI * self.freq * t;
        (
            self.amp_x * math::sin(w + self.phase_x),
            self.amp_y * math::sin(w + self.phase_y),
        )
    }
}

/// Frame-wise head offset from the body: `[dx, dy, relative scale change]`.
pub type JitterStep = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceSpec {
    pub face_id: u32,
    /// Head centre at frame 0 in scene coordinates.
    pub x: f64,
    pub y: f64,
    pub head_w: f64,
    pub head_h: f64,
    /// Attributes shown by the body (the person's ground truth).
    pub body: Attributes,
    /// Attributes rendered on the face.
    pub face: Attributes,
    pub skin: [f32; 3],
    pub clothes: [f32; 3],
    pub gaze: GazeTarget,
    pub appearance: Appearance,
    pub sway: Sway,
    pub jitter: Option<Vec<JitterStep>>,
    pub fake: bool,
    pub anomalies: Vec<AnomalyKind>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f32; 3],
    pub accent: [f32; 3],
    pub floor: [f32; 3],
    pub horizon: f64,
    pub stripe_period: f64,
    pub stripe_angle: f64,
    pub wave: f64,
    pub panels: Vec<Panel>,
}

impl Background {
    fn color(&self, x: f64, y: f64) -> [f32; 3] {
        if y >= self.horizon {
            let shade = 0.9 + 0.1 * math::sin(x * 0.07 + y * 0.31);
            return self.floor.map(|c| c * shade as f32);
        }
        for p in &self.panels {
            if x >= p.x && x < p.x + p.w && y >= p.y && y < p.y + p.h {
                return p.color;
            }
        }
        let (s, c) = (math::sin(self.stripe_angle), math::cos(self.stripe_angle));
        let phase = (x * c + y * s) / self.stripe_period;
        let stripe = phase - math::floor(phase) < 0.5;
        let wave = 1.0 + self.wave * math::sin(x / 23.0) * math::cos(y / 17.0);
        let base = if stripe { self.base } else { self.accent };
        base.map(|v| (v as f64 * wave) as f32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f64,
}

impl Default for Canvas {
    fn default() -> Self {
        Self {
            width: 320,
            height: 180,
            frames: 4,
            fps: 25.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: Canvas,
    /// Camera translation per frame in pixels.
    pub pan: (f64, f64),
    /// Per-channel scene lighting gain.
    pub lighting: [f32; 3],
    pub noise_sigma: f32,
    pub layout: GazeLayout,
    pub background: Background,
    pub faces: Vec<FaceSpec>,
}

/// Head placement of one face in one frame (image pixels).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadPose {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Where the neck meets the body, unaffected by head jitter.
    pub neck_x: f64,
    pub neck_y: f64,
}

impl HeadPose {
    pub fn face_box(&self) -> FaceBox {
        FaceBox::new(
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.w,
            self.h,
        )
    }
}

const SKIN: [[f32; 3]; 5] = [
    [0.96, 0.80, 0.69],
    [0.90, 0.70, 0.56],
    [0.78, 0.58, 0.43],
    [0.58, 0.40, 0.28],
    [0.42, 0.29, 0.20],
];
const CLOTHES: [[f32; 3]; 8] = [
    [0.80, 0.15, 0.15],
    [0.15, 0.35, 0.75],
    [0.20, 0.60, 0.25],
    [0.85, 0.60, 0.10],
    [0.50, 0.20, 0.60],
    [0.10, 0.55, 0.60],
    [0.85, 0.85, 0.80],
    [0.25, 0.25, 0.30],
];
const EYE_WHITE: [f32; 3] = [0.97, 0.97, 0.97];
const PUPIL: [f32; 3] = [0.05, 0.05, 0.08];
const MOUTH: [f32; 3] = [0.62, 0.22, 0.22];
const PANTS: [f32; 3] = [0.18, 0.18, 0.24];
const CANE: [f32; 3] = [0.30, 0.17, 0.07];
const TIE: [f32; 3] = [0.08, 0.08, 0.12];

pub fn hair_color(age: AgeClass) -> [f32; 3] {
    match age {
        AgeClass::Child => [0.93, 0.78, 0.33],
        AgeClass::Middle => [0.28, 0.16, 0.07],
        AgeClass::Senior => [0.82, 0.82, 0.85],
    }
}

fn random_attributes<R: Rng>(rng: &mut R) -> Attributes {
    Attributes {
        age: AgeClass::from_index(rng.gen_range(0..3)),
        gender: GenderClass::from_index(rng.gen_range(0..2)),
    }
}

fn sign<R: Rng>(rng: &mut R) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Largest number of gaze outliers an `n`-face camera-locked frame can carry
/// while the consensus rule still flags them.
pub fn max_gaze_outliers(n: usize) -> usize {
    if n == 2 {
        1
    } else {
        n.saturating_sub(2) / 2
    }
}

/// Largest number of fakes in an `n`-face scene (fakes stay a minority,
/// except that one of two faces may be fake).
pub fn max_fakes(n: usize) -> usize {
    if n <= 2 {
        1
    } else {
        (n - 1) / 2
    }
}

impl SceneSpec {
    /// Draws a scene from `seed`. `primary` is the anomaly that at least one
    /// fake must carry; `None` gives an all-real control scene.
    pub fn sample(
        seed: u64,
        primary: Option<AnomalyKind>,
        n_faces: usize,
        canvas: Canvas,
    ) -> Result<Self> {
        if !(2..=8).contains(&n_faces) {
            return Err(Error::InvalidConfig(format!(
                "n_faces must be in 2..=8, got {n_faces}"
            )));
        }
        if primary == Some(AnomalyKind::GazeOutlier) && max_gaze_outliers(n_faces) == 0 {
            return Err(Error::InvalidConfig(format!(
                "a gaze outlier needs 2 or >= 4 faces, got {n_faces}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_faces;
        let layout = if primary == Some(AnomalyKind::GazeOutlier) {
            GazeLayout::Locked
        } else {
            let u: f64 = rng.gen();
            if u < 0.55 {
                GazeLayout::Locked
            } else if u < 0.85 || n == 2 {
                GazeLayout::Dispersed
            } else {
                GazeLayout::Balanced
            }
        };

        // which faces are fake and what they carry
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_fake = if primary.is_some() {
            rng.gen_range(1..=max_fakes(n))
        } else {
            0
        };
        let mut kinds: Vec<Vec<AnomalyKind>> = vec![Vec::new(); n];
        let mut n_gaze = 0;
        for (k, &i) in order[..n_fake].iter().enumerate() {
            let n_kinds = if rng.gen_bool(0.5) { 2 } else { 1 };
            while kinds[i].len() < n_kinds {
                let kind = if k == 0 && kinds[i].is_empty() {
                    primary.unwrap()
                } else {
                    AnomalyKind::ALL[rng.gen_range(0..4)]
                };
                if kinds[i].contains(&kind) {
                    continue;
                }
                if kind == AnomalyKind::GazeOutlier {
                    if layout != GazeLayout::Locked || n_gaze >= max_gaze_outliers(n) {
                        continue;
                    }
                    n_gaze += 1;
                }
                kinds[i].push(kind);
            }
            kinds[i].sort();
        }

        let mut off_camera = vec![false; n];
        match layout {
            GazeLayout::Locked => {
                for i in 0..n {
                    off_camera[i] = kinds[i].contains(&AnomalyKind::GazeOutlier);
                }
            }
            GazeLayout::Dispersed | GazeLayout::Balanced => {
                let n_off = if layout == GazeLayout::Dispersed {
                    rng.gen_range(n / 2 + 1..=n)
                } else {
                    n / 2
                };
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                for &i in &idx[..n_off] {
                    off_camera[i] = true;
                }
            }
        }

        let slot = canvas.width as f64 / n as f64;
        let mut faces = Vec::with_capacity(n);
        for i in 0..n {
            let body = random_attributes(&mut rng);
            let face = if kinds[i].contains(&AnomalyKind::BodyFaceMismatch) {
                loop {
                    let f = random_attributes(&mut rng);
                    if f != body {
                        break f;
                    }
                }
            } else {
                body
            };
            let gaze = if off_camera[i] {
                GazeTarget::Away {
                    dx: sign(&mut rng) * rng.gen_range(0.45..0.6),
                    dy: rng.gen_range(-0.2..0.2),
                }
            } else {
                GazeTarget::Camera
            };
            let appearance = if kinds[i].contains(&AnomalyKind::AppearanceMismatch) {
                loop {
                    let mut a = Appearance::IDENTITY;
                    if rng.gen_bool(0.6) {
                        a.hue_shift = sign(&mut rng) * rng.gen_range(0.07..0.14);
                    }
                    if rng.gen_bool(0.6) {
                        a.illumination = if rng.gen_bool(0.5) {
                            rng.gen_range(0.55..0.7)
                        } else {
                            rng.gen_range(1.35..1.55)
                        };
                    }
                    if rng.gen_bool(0.6) {
                        a.resolution = rng.gen_range(3.0..4.5);
                    }
                    if !a.is_identity() {
                        break a;
                    }
                }
            } else {
                Appearance::IDENTITY
            };
            let jitter = kinds[i].contains(&AnomalyKind::MotionJitter).then(|| {
                (0..canvas.frames)
                    .map(|_| {
                        [
                            sign(&mut rng) * rng.gen_range(2.0..4.0),
                            sign(&mut rng) * rng.gen_range(1.0..3.0),
                            sign(&mut rng) * rng.gen_range(0.05..0.1),
                        ]
                    })
                    .collect()
            });
            let skin_base = SKIN[rng.gen_range(0..SKIN.len())];
            let tweak: f32 = rng.gen_range(-0.03..0.03);
            faces.push(FaceSpec {
                face_id: i as u32,
                x: 0.0,
                y: 0.0,
                head_w: 0.0,
                head_h: 0.0,
                body,
                face,
                skin: skin_base.map(|c| (c + tweak).clamp(0.0, 1.0)),
                clothes: CLOTHES[rng.gen_range(0..CLOTHES.len())],
                gaze,
                appearance,
                sway: Sway {
                    amp_x: rng.gen_range(0.0..2.5),
                    amp_y: rng.gen_range(0.0..1.2),
                    freq: rng.gen_range(0.03..0.08),
                    phase_x: rng.gen_range(0.0..2.0 * PI),
                    phase_y: rng.gen_range(0.0..2.0 * PI),
                },
                jitter,
                fake: !kinds[i].is_empty(),
                anomalies: kinds[i].clone(),
            });
        }

        let background = Background {
            base: [
                rng.gen_range(0.35..0.7),
                rng.gen_range(0.35..0.7),
                rng.gen_range(0.35..0.7),
            ],
            accent: [
                rng.gen_range(0.3..0.65),
                rng.gen_range(0.3..0.65),
                rng.gen_range(0.3..0.65),
            ],
            floor: [
                rng.gen_range(0.2..0.45),
                rng.gen_range(0.2..0.4),
                rng.gen_range(0.15..0.35),
            ],
            horizon: canvas.height as f64 * rng.gen_range(0.72..0.85),
            stripe_period: rng.gen_range(9.0..30.0),
            stripe_angle: rng.gen_range(0.0..PI),
            wave: rng.gen_range(0.0..0.12),
            panels: (0..rng.gen_range(1..4))
                .map(|_| Panel {
                    x: rng.gen_range(-20.0..canvas.width as f64),
                    y: rng.gen_range(0.0..canvas.height as f64 * 0.5),
                    w: rng.gen_range(20.0..70.0),
                    h: rng.gen_range(15.0..50.0),
                    color: [
                        rng.gen_range(0.3..0.9),
                        rng.gen_range(0.3..0.9),
                        rng.gen_range(0.3..0.9),
                    ],
                })
                .collect(),
        };
        let mut spec = SceneSpec {
            seed,
            canvas,
            pan: (rng.gen_range(-1.0..1.0), rng.gen_range(-0.4..0.4)),
            lighting: {
                let g: f32 = rng.gen_range(0.88..1.12);
                [
                    g * rng.gen_range(0.97..1.03),
                    g,
                    g * rng.gen_range(0.97..1.03),
                ]
            },
            noise_sigma: rng.gen_range(0.004..0.012),
            layout,
            background,
            faces,
        };

        // placement: one row of slots, resampled until boxes fit and separate
        for _attempt in 0..200 {
            let size = (0.5 * slot).min(26.0);
            for (i, f) in spec.faces.iter_mut().enumerate() {
                f.head_w = size * rng.gen_range(0.82..1.0);
                f.head_h = f.head_w * rng.gen_range(1.15..1.3);
                f.x = (i as f64 + 0.5) * slot + rng.gen_range(-0.1..0.1) * slot;
                f.y = canvas.height as f64 * rng.gen_range(0.2..0.36);
            }
            if spec.placement_ok() {
                return Ok(spec);
            }
        }
        Err(Error::InvalidConfig(format!(
            "could not place {n} faces for seed {seed}"
        )))
    }

    fn placement_ok(&self) -> bool {
        let (w, h) = (self.canvas.width as f64, self.canvas.height as f64);
        for t in 0..self.canvas.frames {
            let boxes: Vec<FaceBox> = (0..self.faces.len()).map(|i| self.face_box(i, t)).collect();
            for (a, b) in boxes.iter().enumerate() {
                if b.x < 1.0 || b.y < 1.0 || b.right() > w - 1.0 || b.bottom() > h - 1.0 {
                    return false;
                }
                if boxes[a + 1..].iter().any(|o| o.iou(b) > MAX_FACE_IOU) {
                    return false;
                }
            }
        }
        true
    }

    pub fn head_pose(&self, i: usize, t: usize) -> HeadPose {
        let f = &self.faces[i];
        let tf = t as f64;
        let (sx, sy) = f.sway.at(tf);
        let nx = f.x - self.pan.0 * tf + sx;
        let cy = f.y - self.pan.1 * tf + sy;
        let [dx, dy, ds] = f
            .jitter
            .as_ref()
            .map_or([0.0; 3], |j| j[t.min(j.len() - 1)]);
        HeadPose {
            cx: nx + dx,
            cy: cy + dy,
            w: f.head_w * (1.0 + ds),
            h: f.head_h * (1.0 + ds),
            neck_x: nx,
            neck_y: cy + f.head_h / 2.0,
        }
    }

    pub fn face_box(&self, i: usize, t: usize) -> FaceBox {
        self.head_pose(i, t).face_box()
    }

    /// Checks the invariants a spec must satisfy.
    pub fn validate(&self) -> Result<()> {
        for f in &self.faces {
            if f.fake == f.anomalies.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "face {} fake flag disagrees with anomalies",
                    f.face_id
                )));
            }
            let bf = f.anomalies.contains(&AnomalyKind::BodyFaceMismatch);
            if bf == (f.face == f.body) {
                return Err(Error::InvalidConfig(format!(
                    "face {} attributes disagree with anomalies",
                    f.face_id
                )));
            }
            if f.anomalies.contains(&AnomalyKind::AppearanceMismatch) == f.appearance.is_identity()
            {
                return Err(Error::InvalidConfig(format!(
                    "face {} appearance disagrees with anomalies",
                    f.face_id
                )));
            }
            if f.anomalies.contains(&AnomalyKind::MotionJitter) != f.jitter.is_some() {
                return Err(Error::InvalidConfig(format!(
                    "face {} jitter disagrees with anomalies",
                    f.face_id
                )));
            }
        }
        if !self.placement_ok() {
            return Err(Error::InvalidConfig(
                "face boxes overlap or leave the frame".into(),
            ));
        }
        Ok(())
    }

    /// What the gaze and body-face rules say about each face when fed the
    /// generator's own ground truth.
    pub fn rule_flags(&self) -> (Vec<Flag>, Vec<Flag>) {
        let locked: Vec<bool> = self.faces.iter().map(|f| f.gaze.is_locked()).collect();
        let exact = |a: Attributes| {
            let mut age_conf = [0.0; 3];
            age_conf[a.age.index()] = 1.0;
            let mut gender_conf = [0.0; 2];
            gender_conf[a.gender.index()] = 1.0;
            AttributeGuess {
                age: a.age,
                gender: a.gender,
                age_conf,
                gender_conf,
            }
        };
        let m4 = self
            .faces
            .iter()
            .map(|f| {
                mismatch_rule(
                    &AttributePrediction {
                        face: exact(f.face),
                        body: exact(f.body),
                    },
                    None,
                )
            })
            .collect();
        (gaze_rule(&locked), m4)
    }

    /// Manifest record for the clip. `path_of(t)` names frame `t`'s image.
    pub fn clip_record(&self, clip_id: &str, path_of: impl Fn(usize) -> String) -> ClipRecord {
        let frames = (0..self.canvas.frames)
            .map(|t| FrameRecord {
                frame_id: t as u32,
                image_path: path_of(t),
                faces: self
                    .faces
                    .iter()
                    .enumerate()
                    .map(|(i, f)| FaceRecord {
                        face_id: f.face_id,
                        bbox: self.face_box(i, t).to_array(),
                        label: u8::from(f.fake),
                        gaze_locked: Some(f.gaze.is_locked()),
                        age: Some(f.body.age),
                        gender: Some(f.body.gender),
                    })
                    .collect(),
            })
            .collect();
        ClipRecord {
            clip_id: clip_id.into(),
            fps: self.canvas.fps,
            frames,
        }
    }

    /// Renders frame `t`, quantized to 8 bits.
    pub fn render_frame(&self, t: usize) -> Image {
        let (w, h) = (self.canvas.width, self.canvas.height);
        let mut img = Image::new(w, h);
        let (ox, oy) = (self.pan.0 * t as f64, self.pan.1 * t as f64);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(
                    x,
                    y,
                    self.background
                        .color(x as f64 + 0.5 + ox, y as f64 + 0.5 + oy),
                );
            }
        }
        let mut order: Vec<usize> = (0..self.faces.len()).collect();
        order.sort_by(|&a, &b| self.faces[a].y.total_cmp(&self.faces[b].y));
        for i in order {
            self.draw_person(&mut img, i, t);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (0xA5A5_0000 + t as u64));
        let sigma = self.noise_sigma as f64;
        for px in img.data_mut().chunks_exact_mut(3) {
            for c in 0..3 {
                let n = (math::normal(&mut rng) * sigma) as f32;
                px[c] = (px[c] * self.lighting[c] + n).clamp(0.0, 1.0);
            }
        }
        img.quantized()
    }

    fn draw_person(&self, img: &mut Image, i: usize, t: usize) {
        let f = &self.faces[i];
        let p = self.head_pose(i, t);
        let (hw, hh) = (f.head_w, f.head_h);

        // body, anchored at the neck so head jitter shows as misalignment
        let top = p.neck_y + 0.08 * hh;
        let (torso_w, torso_h, leg_h) = match f.body.age {
            AgeClass::Child => (1.15 * hw, 1.7 * hh, 0.9 * hh),
            AgeClass::Middle => (1.75 * hw, 2.6 * hh, 1.3 * hh),
            AgeClass::Senior => (1.75 * hw, 2.4 * hh, 1.3 * hh),
        };
        let cx = p.neck_x;
        let legs_top = top + torso_h - 0.05 * hh;
        raster::rect(
            img,
            cx - 0.38 * torso_w,
            legs_top,
            0.3 * torso_w,
            leg_h,
            PANTS,
        );
        raster::rect(
            img,
            cx + 0.08 * torso_w,
            legs_top,
            0.3 * torso_w,
            leg_h,
            PANTS,
        );
        match f.body.gender {
            GenderClass::Male => {
                raster::rect(img, cx - torso_w / 2.0, top, torso_w, torso_h, f.clothes);
                raster::polygon(
                    img,
                    &[
                        (cx - 0.07 * hw, top),
                        (cx + 0.07 * hw, top),
                        (cx + 0.12 * hw, top + 0.55 * torso_h),
                        (cx - 0.12 * hw, top + 0.55 * torso_h),
                    ],
                    TIE,
                );
            }
            GenderClass::Female => {
                raster::polygon(
                    img,
                    &[
                        (cx - 0.35 * torso_w, top),
                        (cx + 0.35 * torso_w, top),
                        (cx + 0.68 * torso_w, top + torso_h),
                        (cx - 0.68 * torso_w, top + torso_h),
                    ],
                    f.clothes,
                );
            }
        }
        if f.body.age == AgeClass::Senior {
            let cane_x = cx + 0.62 * torso_w + 0.25 * hw;
            let width = (0.14 * hw).max(2.0);
            raster::line(
                img,
                (cane_x, top + 0.35 * torso_h),
                (cane_x, legs_top + leg_h),
                width,
                CANE,
            );
            raster::line(
                img,
                (cane_x - 0.35 * hw, top + 0.35 * torso_h),
                (cane_x + 0.05 * hw, top + 0.35 * torso_h),
                width,
                CANE,
            );
        }
        raster::rect(
            img,
            p.neck_x - 0.14 * hw,
            p.neck_y - 0.1 * hh,
            0.28 * hw,
            0.22 * hh,
            f.skin,
        );

        // head
        let (a, b) = (p.w / 2.0, p.h / 2.0);
        let head_top = p.cy - b;
        let hair = hair_color(f.face.age);
        if f.face.gender == GenderClass::Female {
            raster::ellipse_clipped(
                img,
                p.cx,
                p.cy + 0.04 * p.h,
                1.1 * a,
                1.0 * b,
                f64::NEG_INFINITY,
                p.cy + 0.32 * p.h,
                hair,
            );
        }
        raster::ellipse(img, p.cx, p.cy, a, b, f.skin);
        raster::ellipse_clipped(
            img,
            p.cx,
            p.cy,
            a,
            b,
            f64::NEG_INFINITY,
            head_top + 0.17 * p.h,
            hair,
        );
        let scale = if f.face.age == AgeClass::Child {
            1.2
        } else {
            1.0
        };
        let (rx, ry) = (0.14 * p.w * scale, 0.09 * p.h * scale);
        let eye_y = head_top + 0.3 * p.h;
        let (pdx, pdy) = match f.gaze {
            GazeTarget::Camera => (0.0, 0.0),
            GazeTarget::Away { dx, dy } => (dx * rx, dy * ry),
        };
        for side in [-1.0, 1.0] {
            let ex = p.cx + side * 0.22 * p.w;
            raster::ellipse(img, ex, eye_y, rx, ry, EYE_WHITE);
            let r = 0.6 * ry.min(rx);
            raster::ellipse_masked(
                img,
                (ex + pdx, eye_y + pdy, r, r),
                (ex, eye_y, rx, ry),
                PUPIL,
            );
        }
        let mouth_y = head_top + 0.76 * p.h;
        raster::rect(
            img,
            p.cx - 0.15 * p.w,
            mouth_y,
            0.3 * p.w,
            (0.05 * p.h).max(1.0),
            MOUTH,
        );
        if f.face.gender == GenderClass::Male {
            let m = hair.map(|c| c * 0.75);
            raster::rect(
                img,
                p.cx - 0.2 * p.w,
                mouth_y - 0.09 * p.h,
                0.4 * p.w,
                0.07 * p.h,
                m,
            );
        }
        match f.face.age {
            AgeClass::Child => {
                for side in [-1.0, 1.0] {
                    raster::ellipse(
                        img,
                        p.cx + side * 0.28 * p.w,
                        head_top + 0.58 * p.h,
                        0.08 * p.w,
                        0.06 * p.h,
                        [0.95, 0.55, 0.55],
                    );
                }
            }
            AgeClass::Senior => {
                let line = f.skin.map(|c| c * 0.55);
                for side in [-1.0, 1.0] {
                    let x0 = p.cx + side * 0.2 * p.w;
                    raster::line(
                        img,
                        (x0, head_top + 0.5 * p.h),
                        (x0 + side * 0.1 * p.w, head_top + 0.68 * p.h),
                        1.0,
                        line,
                    );
                }
            }
            AgeClass::Middle => {}
        }
        if !f.appearance.is_identity() {
            apply_appearance(img, &p, &f.appearance);
        }
    }
}

/// Applies a face's appearance edits to the pixels of its head ellipse
/// (slightly enlarged to include hair).
fn apply_appearance(img: &mut Image, p: &HeadPose, app: &Appearance) {
    let (a, b) = (0.56 * p.w, 0.52 * p.h);
    let x0 = math::floor(p.cx - a).max(0.0) as usize;
    let y0 = math::floor(p.cy - b).max(0.0) as usize;
    let x1 = (math::ceil(p.cx + a) as usize).min(img.width());
    let y1 = (math::ceil(p.cy + b) as usize).min(img.height());
    let inside = |x: usize, y: usize| {
        let (dx, dy) = ((x as f64 + 0.5 - p.cx) / a, (y as f64 + 0.5 - p.cy) / b);
        dx * dx + dy * dy <= 1.0
    };
    if app.resolution > 1.0 {
        let block = app.resolution;
        let nbx = math::ceil((x1 - x0) as f64 / block) as usize;
        let nby = math::ceil((y1 - y0) as f64 / block) as usize;
        let cell = |x: usize, y: usize| {
            let bx = (((x - x0) as f64) / block) as usize;
            let by = (((y - y0) as f64) / block) as usize;
            by * nbx + bx
        };
        let mut sums = vec![([0.0f64; 3], 0usize); nbx.max(1) * nby.max(1)];
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x, y) {
                    let c = &mut sums[cell(x, y)];
                    let px = img.pixel(x, y);
                    for k in 0..3 {
                        c.0[k] += px[k] as f64;
                    }
                    c.1 += 1;
                }
            }
        }
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x, y) {
                    let (s, n) = sums[cell(x, y)];
                    img.set_pixel(x, y, s.map(|v| (v / n as f64) as f32));
                }
            }
        }
    }
    for y in y0..y1 {
        for x in x0..x1 {
            if inside(x, y) {
                let mut px = img.pixel(x, y);
                if app.hue_shift != 0.0 {
                    px = shift_hue(px, app.hue_shift as f32, 1.25);
                }
                let g = app.illumination as f32;
                img.set_pixel(x, y, px.map(|c| (c * g).clamp(0.0, 1.0)));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, kind: Option<AnomalyKind>, n: usize) -> SceneSpec {
        SceneSpec::sample(seed, kind, n, Canvas::default()).unwrap()
    }

    #[test]
    fn sampled_specs_are_valid() {
        for seed in 0..60 {
            let kinds = [
                None,
                Some(AnomalyKind::MotionJitter),
                Some(AnomalyKind::AppearanceMismatch),
                Some(AnomalyKind::BodyFaceMismatch),
            ];
            for (k, kind) in kinds.iter().enumerate() {
                let n = 2 + (seed as usize + k) % 7;
                let s = spec(seed, *kind, n);
                s.validate().unwrap();
                assert_eq!(s.faces.len(), n);
                if let Some(kind) = kind {
                    assert!(s.faces.iter().any(|f| f.anomalies.contains(kind)));
                } else {
                    assert!(s.faces.iter().all(|f| !f.fake));
                }
            }
        }
    }

    #[test]
    fn rules_on_ground_truth_flag_exactly_the_injected_faces() {
        for seed in 0..200 {
            let n = [2, 4, 5, 6, 7, 8, 3][seed as usize % 7];
            let kind = if n == 3 {
                AnomalyKind::BodyFaceMismatch
            } else {
                AnomalyKind::GazeOutlier
            };
            for s in [
                spec(seed, Some(kind), n),
                spec(seed + 1000, Some(AnomalyKind::MotionJitter), n),
            ] {
                let (gaze, m4) = s.rule_flags();
                for (i, f) in s.faces.iter().enumerate() {
                    assert_eq!(
                        gaze[i].is_flagged(),
                        f.anomalies.contains(&AnomalyKind::GazeOutlier),
                        "seed {seed}"
                    );
                    assert_eq!(
                        m4[i].is_flagged(),
                        f.anomalies.contains(&AnomalyKind::BodyFaceMismatch)
                    );
                }
            }
        }
    }

    #[test]
    fn gaze_outlier_on_a_chosen_face() {
        let mut s = spec(7, None, 5);
        s.layout = GazeLayout::Locked;
        for f in &mut s.faces {
            f.gaze = GazeTarget::Camera;
        }
        s.faces[3].gaze = GazeTarget::Away { dx: 0.5, dy: 0.0 };
        let (gaze, _) = s.rule_flags();
        let flagged: Vec<usize> = (0..5).filter(|&i| gaze[i].is_flagged()).collect();
        assert_eq!(flagged, vec![3]);
    }

    #[test]
    fn fakes_stay_a_minority() {
        for seed in 0..100 {
            let n = 2 + seed as usize % 7;
            let s = spec(seed, Some(AnomalyKind::AppearanceMismatch), n);
            let k = s.faces.iter().filter(|f| f.fake).count();
            assert!(k >= 1 && k <= max_fakes(n));
        }
    }

    #[test]
    fn infeasible_requests_are_errors() {
        assert!(
            SceneSpec::sample(1, Some(AnomalyKind::GazeOutlier), 3, Canvas::default()).is_err()
        );
        assert!(SceneSpec::sample(1, None, 9, Canvas::default()).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = spec(3, Some(AnomalyKind::AppearanceMismatch), 4);
        let a = s.render_frame(1);
        let b = s.render_frame(1);
        assert_eq!(a, b);
        assert_eq!((a.width(), a.height()), (320, 180));
        assert_ne!(s.render_frame(0), a);
    }

    #[test]
    fn jitter_moves_the_head_but_not_the_neck() {
        let s = spec(11, Some(AnomalyKind::MotionJitter), 2);
        let i = s.faces.iter().position(|f| f.jitter.is_some()).unwrap();
        let p = s.head_pose(i, 0);
        assert!((p.cx - p.neck_x).abs() >= 2.0);
        let real = s.faces.iter().position(|f| f.jitter.is_none()).unwrap();
        let q = s.head_pose(real, 2);
        assert_eq!(q.cx, q.neck_x);
    }
}
