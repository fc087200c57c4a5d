//! Body-face module: age and gender predicted separately from the face crop
//! and from the body crop with the face blurred out, flagged on any
//! disagreement.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::gaze::check_input;
use crate::image::{pixel_span, Image, InputNorm};
use crate::math;
use crate::model::{AgeClass, Attributes, BodyCrop, CropSize, FaceBox, Flag, GenderClass};
use crate::nn::{Linear, Model, ParamStore, ResNetTrunk};
use crate::{Error, Result};

/// Largest fraction of the body crop the face box may cover.
pub const MAX_FACE_COVERAGE: f64 = 0.9;

/// Gaussian blur confined to `region`: only pixels inside are written and
/// only pixels inside are read, with the truncated kernel renormalized over
/// the taps that remain.
pub fn blur_region(img: &Image, region: &FaceBox, sigma: f64) -> Image {
    let (x0, x1, y0, y1) = pixel_span(region, img.width(), img.height());
    let mut out = img.clone();
    if x0 >= x1 || y0 >= y1 || !(sigma > 0.0) {
        return out;
    }
    let radius = math::ceil(3.0 * sigma) as usize;
    let kernel: Vec<f64> = (0..=radius)
        .map(|d| math::exp(-((d * d) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let (w, h) = (x1 - x0, y1 - y0);
    let mut tmp = vec![[0.0f64; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut norm) = ([0.0; 3], 0.0);
            for sx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                let k = kernel[x.abs_diff(sx)];
                let p = img.pixel(x0 + sx, y0 + y);
                for c in 0..3 {
                    acc[c] += k * p[c] as f64;
                }
                norm += k;
            }
            tmp[y * w + x] = acc.map(|v| v / norm);
        }
    }
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut norm) = ([0.0; 3], 0.0);
            for sy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                let k = kernel[y.abs_diff(sy)];
                let p = tmp[sy * w + x];
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
                norm += k;
            }
            out.set_pixel(x0 + x, y0 + y, acc.map(|v| (v / norm) as f32));
        }
    }
    out
}

/// Blurs the face out of a body crop with `sigma = 0.25 * face width`.
pub fn block_face_in_body(body: &Image, face: &FaceBox) -> Result<Image> {
    let frame = FaceBox::new(0.0, 0.0, body.width() as f64, body.height() as f64);
    let coverage = face.intersection(&frame) / frame.area();
    if coverage > MAX_FACE_COVERAGE {
        return Err(Error::FaceCoversBody { coverage });
    }
    if face.w <= 0.0 || face.h <= 0.0 {
        return Err(Error::DegenerateBox {
            w: face.w,
            h: face.h,
        });
    }
    Ok(blur_region(body, face, 0.25 * face.w))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeGuess {
    pub age: AgeClass,
    pub gender: GenderClass,
    pub age_conf: [f64; 3],
    pub gender_conf: [f64; 2],
}

impl AttributeGuess {
    pub fn attributes(&self) -> Attributes {
        Attributes {
            age: self.age,
            gender: self.gender,
        }
    }

    fn min_confidence(&self) -> f64 {
        self.age_conf[self.age.index()].min(self.gender_conf[self.gender.index()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributePrediction {
    pub face: AttributeGuess,
    pub body: AttributeGuess,
}

/// 1 iff the age classes or the gender classes differ. With a confidence
/// floor, a comparison where either side is less sure than the floor yields
/// 0.
pub fn mismatch_rule(pred: &AttributePrediction, confidence_floor: Option<f64>) -> Flag {
    if let Some(floor) = confidence_floor {
        if pred.face.min_confidence() < floor || pred.body.min_confidence() < floor {
            return Flag::Clear;
        }
    }
    Flag::from_bool(pred.face.age != pred.body.age || pred.face.gender != pred.body.gender)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeConfig {
    pub input: CropSize,
    pub widths: Vec<usize>,
    pub stem_stride: usize,
    pub norm: InputNorm,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            input: CropSize::new(224, 224),
            widths: vec![16, 32, 64],
            stem_stride: 2,
            norm: InputNorm::Centered,
        }
    }
}

impl AttributeConfig {
    pub fn desk_face() -> Self {
        Self {
            input: CropSize::new(32, 32),
            widths: vec![8, 16, 16],
            ..Self::default()
        }
    }

    pub fn desk_body() -> Self {
        Self {
            input: CropSize::new(24, 48),
            widths: vec![8, 16, 16],
            ..Self::default()
        }
    }
}

/// Residual convnet with an age head and a gender head.
#[derive(Clone, Debug)]
pub struct AttributeNet {
    pub cfg: AttributeConfig,
    store: ParamStore,
    trunk: ResNetTrunk,
    age: Linear,
    gender: Linear,
}

impl Model for AttributeNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl AttributeNet {
    pub fn new(name: &str, cfg: AttributeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let trunk = ResNetTrunk::with_stem_stride(
            &mut store,
            &mut rng,
            &alloc::format!("{name}.trunk"),
            3,
            &cfg.widths,
            cfg.stem_stride,
        );
        let age = Linear::new(
            &mut store,
            &mut rng,
            &alloc::format!("{name}.age"),
            trunk.width(),
            3,
        );
        let gender = Linear::new(
            &mut store,
            &mut rng,
            &alloc::format!("{name}.gender"),
            trunk.width(),
            2,
        );
        Self {
            cfg,
            store,
            trunk,
            age,
            gender,
        }
    }

    /// `([1, 3], [1, 2])` age and gender logits.
    pub fn logits(&self, tape: &mut Tape, img: &Image) -> Result<(Var, Var)> {
        check_input(img, self.cfg.input)?;
        let x = tape.constant(self.cfg.norm.apply(img));
        let f = self.trunk.forward(tape, &self.store, x);
        Ok((
            self.age.forward(tape, &self.store, f),
            self.gender.forward(tape, &self.store, f),
        ))
    }

    /// Sum of the mean age and mean gender cross-entropies.
    pub fn loss(&self, tape: &mut Tape, imgs: &[&Image], truth: &[Attributes]) -> Result<Var> {
        if imgs.is_empty() {
            return Err(Error::Empty("attribute batch"));
        }
        if imgs.len() != truth.len() {
            return Err(Error::LengthMismatch {
                expected: imgs.len(),
                found: truth.len(),
            });
        }
        let (mut ages, mut genders) = (Vec::new(), Vec::new());
        for img in imgs {
            let (a, g) = self.logits(tape, img)?;
            ages.push(a);
            genders.push(g);
        }
        let age_logits = tape.concat(&ages);
        let gender_logits = tape.concat(&genders);
        let at: Vec<usize> = truth.iter().map(|t| t.age.index()).collect();
        let gt: Vec<usize> = truth.iter().map(|t| t.gender.index()).collect();
        let la = tape.cross_entropy(age_logits, &at);
        let lg = tape.cross_entropy(gender_logits, &gt);
        Ok(tape.add(la, lg))
    }

    pub fn predict(&self, img: &Image) -> Result<AttributeGuess> {
        let mut tape = Tape::new();
        let (a, g) = self.logits(&mut tape, img)?;
        let mut age_conf = [0.0; 3];
        age_conf.copy_from_slice(tape.value(a).data());
        let mut gender_conf = [0.0; 2];
        gender_conf.copy_from_slice(tape.value(g).data());
        math::softmax_in_place(&mut age_conf);
        math::softmax_in_place(&mut gender_conf);
        if age_conf.iter().chain(&gender_conf).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attribute logits"));
        }
        Ok(AttributeGuess {
            age: AgeClass::from_index(argmax(&age_conf)),
            gender: GenderClass::from_index(argmax(&gender_conf)),
            age_conf,
            gender_conf,
        })
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// M4 outcome for one face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BodyFaceEvidence {
    Compared(AttributePrediction),
    /// No usable body region; the verdict defaults to 0.
    NoEvidence,
}

impl BodyFaceEvidence {
    pub fn flag(&self, confidence_floor: Option<f64>) -> Flag {
        match self {
            BodyFaceEvidence::Compared(p) => mismatch_rule(p, confidence_floor),
            BodyFaceEvidence::NoEvidence => Flag::Clear,
        }
    }
}

/// Runs both attribute nets on one face.
pub fn body_face_evidence(
    face_net: &AttributeNet,
    body_net: &AttributeNet,
    face_crop: &Image,
    body: Option<&BodyCrop>,
) -> Result<BodyFaceEvidence> {
    let Some(body) = body else {
        return Ok(BodyFaceEvidence::NoEvidence);
    };
    let blocked = match block_face_in_body(&body.image, &body.face_box) {
        Ok(img) => img,
        Err(Error::FaceCoversBody { .. }) => return Ok(BodyFaceEvidence::NoEvidence),
        Err(e) => return Err(e),
    };
    Ok(BodyFaceEvidence::Compared(AttributePrediction {
        face: face_net.predict(face_crop)?,
        body: body_net.predict(&blocked)?,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn guess(age: AgeClass, gender: GenderClass) -> AttributeGuess {
        let mut age_conf = [0.0; 3];
        age_conf[age.index()] = 1.0;
        let mut gender_conf = [0.0; 2];
        gender_conf[gender.index()] = 1.0;
        AttributeGuess {
            age,
            gender,
            age_conf,
            gender_conf,
        }
    }

    fn pair(fa: AgeClass, fg: GenderClass, ba: AgeClass, bg: GenderClass) -> AttributePrediction {
        AttributePrediction {
            face: guess(fa, fg),
            body: guess(ba, bg),
        }
    }

    fn textured(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = ((x * 7 + y * 13) % 11) as f32 / 10.0;
                img.set_pixel(x, y, [v, 1.0 - v, (x % 3) as f32 / 2.0]);
            }
        }
        img
    }

    #[test]
    fn worked_rule_cases() {
        use AgeClass::*;
        use GenderClass::*;
        assert_eq!(
            mismatch_rule(&pair(Child, Female, Child, Female), None),
            Flag::Clear
        );
        assert_eq!(
            mismatch_rule(&pair(Child, Male, Senior, Male), None),
            Flag::Flagged
        );
        assert_eq!(
            mismatch_rule(&pair(Middle, Female, Middle, Male), None),
            Flag::Flagged
        );
    }

    #[test]
    fn rule_truth_table_and_symmetry() {
        for fa in AgeClass::ALL {
            for fg in GenderClass::ALL {
                for ba in AgeClass::ALL {
                    for bg in GenderClass::ALL {
                        let p = pair(fa, fg, ba, bg);
                        let expected = if (fa, fg) == (ba, bg) {
                            Flag::Clear
                        } else {
                            Flag::Flagged
                        };
                        assert_eq!(mismatch_rule(&p, None), expected);
                        let swapped = AttributePrediction {
                            face: p.body,
                            body: p.face,
                        };
                        assert_eq!(mismatch_rule(&swapped, None), expected);
                    }
                }
            }
        }
    }

    #[test]
    fn confidence_floor_suppresses_unsure_flags() {
        let mut p = pair(
            AgeClass::Child,
            GenderClass::Male,
            AgeClass::Senior,
            GenderClass::Male,
        );
        p.body.age_conf = [0.3, 0.3, 0.4];
        assert_eq!(mismatch_rule(&p, None), Flag::Flagged);
        assert_eq!(mismatch_rule(&p, Some(0.6)), Flag::Clear);
    }

    #[test]
    fn blur_leaves_outside_pixels_alone() {
        let img = textured(24, 48);
        let face = FaceBox::new(8.0, 3.0, 8.0, 9.0);
        let out = block_face_in_body(&img, &face).unwrap();
        let (x0, x1, y0, y1) = pixel_span(&face, 24, 48);
        let mut changed = false;
        for y in 0..48 {
            for x in 0..24 {
                let inside = (x0..x1).contains(&x) && (y0..y1).contains(&y);
                if inside {
                    changed |= out.pixel(x, y) != img.pixel(x, y);
                } else {
                    assert_eq!(out.pixel(x, y), img.pixel(x, y));
                }
            }
        }
        assert!(changed);
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = Image::filled(20, 30, [0.25, 0.5, 0.75]);
        let out = block_face_in_body(&img, &FaceBox::new(4.0, 4.0, 10.0, 10.0)).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn wide_blur_tends_to_region_mean() {
        let img = textured(20, 20);
        let region = FaceBox::new(3.0, 5.0, 9.0, 7.0);
        let mean = img.mean_color(&region);
        let out = blur_region(&img, &region, 1e4);
        let (x0, x1, y0, y1) = pixel_span(&region, 20, 20);
        for y in y0..y1 {
            for x in x0..x1 {
                let p = out.pixel(x, y);
                for c in 0..3 {
                    assert!((p[c] as f64 - mean[c]).abs() < 2.0 / 255.0);
                }
            }
        }
    }

    #[test]
    fn face_covering_body_is_rejected() {
        let img = textured(10, 10);
        assert!(matches!(
            block_face_in_body(&img, &FaceBox::new(0.0, 0.0, 10.0, 9.5)),
            Err(Error::FaceCoversBody { .. })
        ));
    }

    #[test]
    fn prediction_is_deterministic_and_sized() {
        let net = AttributeNet::new("face", AttributeConfig::desk_face(), 5);
        let img = textured(32, 32);
        let a = net.predict(&img).unwrap();
        assert_eq!(a, net.predict(&img).unwrap());
        assert!((a.age_conf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(net.predict(&textured(24, 48)).is_err());
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let net = AttributeNet::new(
            "face",
            AttributeConfig {
                widths: vec![4, 4],
                ..AttributeConfig::desk_face()
            },
            9,
        );
        let img = textured(32, 32);
        let truth = [Attributes {
            age: AgeClass::Senior,
            gender: GenderClass::Female,
        }];
        let loss_at = |store: &ParamStore| {
            let mut n = net.clone();
            *n.store_mut() = store.clone();
            let mut t = Tape::new();
            let l = n.loss(&mut t, &[&img], &truth).unwrap();
            t.value(l).item()
        };
        let (_, grads) =
            crate::optim::loss_and_grad(net.store(), |t| net.loss(t, &[&img], &truth)).unwrap();
        let ids: Vec<_> = net.store().ids().collect();
        for &id in ids.iter().rev().take(4) {
            for k in 0..net.store().get(id).len().min(3) {
                let mut plus = net.store().clone();
                plus.get_mut(id).data_mut()[k] += 1e-4;
                let mut minus = net.store().clone();
                minus.get_mut(id).data_mut()[k] -= 1e-4;
                let fd = (loss_at(&plus) - loss_at(&minus)) / 2e-4;
                let an = grads.get(id).data()[k];
                assert!(
                    (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-4),
                    "{fd} vs {an}"
                );
            }
        }
    }
}
