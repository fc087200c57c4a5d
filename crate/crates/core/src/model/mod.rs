//! Shared domain types: face boxes and samples, per-module verdicts, the
//! dataset manifest records, and the metrics report.

mod crop;
mod metrics;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::image::Image;

pub use crop::{crop_body, crop_eyes, crop_face, BodyCrop, CropPolicy, CropSize};
pub use metrics::{
    compute_face_metrics, compute_frame_complete_metrics, metrics_for_frames, roc_auc,
    AblationEntry, DegradationEntry, FaceMetrics, FacePrediction, FrameMetrics, MetricsReport,
};

/// Axis-aligned face box in pixels, `(x, y)` top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl FaceBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Intersection with the frame `[0, width) x [0, height)`; `None` when
    /// nothing is left.
    pub fn clamp(&self, width: usize, height: usize) -> Option<FaceBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width as f64);
        let y1 = self.bottom().min(height as f64);
        (x1 > x0 && y1 > y0).then(|| FaceBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn intersection(&self, other: &FaceBox) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &FaceBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Scales width and height by `factor` about the center.
    pub fn dilate(&self, factor: f64) -> FaceBox {
        let (cx, cy) = self.center();
        let (w, h) = (self.w * factor, self.h * factor);
        FaceBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> FaceBox {
        FaceBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleId {
    M1,
    M2,
    M3,
    M4,
}

impl ModuleId {
    pub const ALL: [ModuleId; 4] = [ModuleId::M1, ModuleId::M2, ModuleId::M3, ModuleId::M4];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The human cue each module models.
    pub fn cue(self) -> &'static str {
        match self {
            ModuleId::M1 => "scene-motion coherence",
            ModuleId::M2 => "inter-face appearance compatibility",
            ModuleId::M3 => "interpersonal gaze alignment",
            ModuleId::M4 => "face-body consistency",
        }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.index() + 1)
    }
}

/// A set of modules, stored as a bitmask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ModuleSet(u8);

impl ModuleSet {
    pub const EMPTY: ModuleSet = ModuleSet(0);
    pub const ALL: ModuleSet = ModuleSet(0b1111);

    pub fn from_modules(modules: &[ModuleId]) -> Self {
        let mut s = Self::EMPTY;
        for &m in modules {
            s.insert(m);
        }
        s
    }

    /// The cumulative ablation stack `M1 .. M{k}`.
    pub fn prefix(k: usize) -> Self {
        ModuleSet(((1u16 << k.min(4)) - 1) as u8)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Self {
        ModuleSet(bits & 0b1111)
    }

    pub fn insert(&mut self, m: ModuleId) {
        self.0 |= 1 << m.index();
    }

    pub fn contains(self, m: ModuleId) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset(self, other: ModuleSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: ModuleSet) -> ModuleSet {
        ModuleSet(self.0 | other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = ModuleId> {
        ModuleId::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    /// `"M1+M2+M3"` style label.
    pub fn label(self) -> String {
        let mut s = String::new();
        for (i, m) in self.iter().enumerate() {
            if i > 0 {
                s.push('+');
            }
            s.push_str(match m {
                ModuleId::M1 => "M1",
                ModuleId::M2 => "M2",
                ModuleId::M3 => "M3",
                ModuleId::M4 => "M4",
            });
        }
        s
    }
}

impl Serialize for ModuleSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for ModuleSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let v = Vec::<ModuleId>::deserialize(d)?;
        Ok(ModuleSet::from_modules(&v))
    }
}

/// Binary module decision, or an abstention (only the gaze rule abstains).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Flag {
    #[serde(rename = "0")]
    Clear,
    #[serde(rename = "1")]
    Flagged,
    #[serde(rename = "NA")]
    NotApplicable,
}

impl Flag {
    pub fn from_bool(fake: bool) -> Self {
        if fake {
            Flag::Flagged
        } else {
            Flag::Clear
        }
    }

    pub fn is_flagged(self) -> bool {
        self == Flag::Flagged
    }

    /// `Some(0.0 | 1.0)`, or `None` for an abstention.
    pub fn as_score(self) -> Option<f64> {
        match self {
            Flag::Clear => Some(0.0),
            Flag::Flagged => Some(1.0),
            Flag::NotApplicable => None,
        }
    }
}

/// One module's output for one face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleVerdict {
    pub module: ModuleId,
    pub score: Option<f64>,
    pub flag: Flag,
}

impl ModuleVerdict {
    /// Score-carrying verdict flagged at `threshold`.
    pub fn scored(module: ModuleId, score: f64, threshold: f64) -> Self {
        Self {
            module,
            score: Some(score),
            flag: Flag::from_bool(score >= threshold),
        }
    }

    pub fn flag_only(module: ModuleId, flag: Flag) -> Self {
        Self {
            module,
            score: None,
            flag,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeClass {
    Child,
    Middle,
    Senior,
}

impl AgeClass {
    pub const ALL: [AgeClass; 3] = [AgeClass::Child, AgeClass::Middle, AgeClass::Senior];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            AgeClass::Child => "child",
            AgeClass::Middle => "middle-aged",
            AgeClass::Senior => "senior",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenderClass {
    Male,
    Female,
}

impl GenderClass {
    pub const ALL: [GenderClass; 2] = [GenderClass::Male, GenderClass::Female];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            GenderClass::Male => "male",
            GenderClass::Female => "female",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub age: AgeClass,
    pub gender: GenderClass,
}

/// One face of one frame as written in the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub face_id: u32,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub gaze_locked: Option<bool>,
    pub age: Option<AgeClass>,
    pub gender: Option<GenderClass>,
}

impl FaceRecord {
    pub fn face_box(&self) -> FaceBox {
        FaceBox::from_array(self.bbox)
    }

    pub fn is_fake(&self) -> bool {
        self.label == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u32,
    pub image_path: String,
    pub faces: Vec<FaceRecord>,
}

/// One manifest line: a clip and its annotated frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub fps: f64,
    pub frames: Vec<FrameRecord>,
}

/// A face with its crops and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    pub face_id: u32,
    pub face_box: FaceBox,
    pub face_crop: Image,
    pub eye_crop: Image,
    pub body: BodyCrop,
    pub fake: bool,
    pub gaze_locked: Option<bool>,
    pub age: Option<AgeClass>,
    pub gender: Option<GenderClass>,
}

impl FaceSample {
    /// Builds the crops of `record` from `frame`.
    pub fn from_record(
        frame: &Image,
        record: &FaceRecord,
        policy: &CropPolicy,
    ) -> crate::Result<Self> {
        let b = record.face_box();
        Ok(Self {
            face_id: record.face_id,
            face_box: b,
            face_crop: crop_face(frame, &b, policy)?,
            eye_crop: crop_eyes(frame, &b, policy)?,
            body: crop_body(frame, &b, policy)?,
            fake: record.is_fake(),
            gaze_locked: record.gaze_locked,
            age: record.age,
            gender: record.gender,
        })
    }

    pub fn attributes(&self) -> Option<Attributes> {
        Some(Attributes {
            age: self.age?,
            gender: self.gender?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub frame_id: u32,
    pub image: Image,
    pub faces: Vec<FaceSample>,
}

impl FrameSample {
    /// Frame label: 1 iff any face is fake.
    pub fn is_fake(&self) -> bool {
        self.faces.iter().any(|f| f.fake)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub clip_id: String,
    pub fps: f64,
    pub frames: Vec<FrameSample>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_set_prefix_and_label() {
        assert_eq!(ModuleSet::prefix(1).label(), "M1");
        assert_eq!(ModuleSet::prefix(3).label(), "M1+M2+M3");
        assert_eq!(ModuleSet::prefix(4), ModuleSet::ALL);
        assert!(ModuleSet::prefix(2).is_subset(ModuleSet::prefix(3)));
        assert!(!ModuleSet::prefix(3).is_subset(ModuleSet::prefix(2)));
    }

    #[test]
    fn box_clamp_and_iou() {
        let b = FaceBox::new(-5.0, 10.0, 20.0, 20.0);
        let c = b.clamp(100, 25).unwrap();
        assert_eq!(c, FaceBox::new(0.0, 10.0, 15.0, 15.0));
        assert!(FaceBox::new(200.0, 0.0, 5.0, 5.0).clamp(100, 100).is_none());
        let a = FaceBox::new(0.0, 0.0, 10.0, 10.0);
        assert!((a.iou(&a.translate(5.0, 0.0)) - 50.0 / 150.0).abs() < 1e-12);
    }
}
