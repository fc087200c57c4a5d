//! Gaze module: an eye-region classifier for camera-locked gaze and the
//! group-consensus rule that turns per-face gaze into anomaly verdicts.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::image::{Image, InputNorm};
use crate::math;
use crate::model::{CropSize, Flag};
use crate::nn::{Linear, Model, ParamStore, ResNetTrunk};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazeCounts {
    pub n_locked: usize,
    pub n_off: usize,
    pub n_total: usize,
}

impl GazeCounts {
    pub fn from_flags(locked: &[bool]) -> Self {
        let n_locked = locked.iter().filter(|&&l| l).count();
        Self {
            n_locked,
            n_off: locked.len() - n_locked,
            n_total: locked.len(),
        }
    }
}

/// Per-face verdicts for one frame from camera-locked flags.
///
/// When more faces look away than at the camera the whole frame abstains.
/// Otherwise an off-camera face is flagged if the locked faces outnumber
/// the others by more than one, or the frame has exactly two faces; every
/// other face gets 0.
pub fn gaze_rule(locked: &[bool]) -> Vec<Flag> {
    let c = GazeCounts::from_flags(locked);
    if c.n_off > c.n_locked {
        return vec![Flag::NotApplicable; c.n_total];
    }
    let outlier = c.n_locked - c.n_off > 1 || c.n_total == 2;
    locked
        .iter()
        .map(|&l| Flag::from_bool(!l && outlier))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GazeConfig {
    pub input: CropSize,
    pub widths: Vec<usize>,
    pub norm: InputNorm,
    /// `p_locked` at or above this counts as camera-locked.
    pub threshold: f64,
}

impl Default for GazeConfig {
    fn default() -> Self {
        Self {
            input: CropSize::new(224, 224),
            widths: vec![16, 32, 64],
            norm: InputNorm::Standardized,
            threshold: 0.5,
        }
    }
}

impl GazeConfig {
    pub fn desk() -> Self {
        Self {
            input: CropSize::new(32, 16),
            widths: vec![8, 16],
            ..Self::default()
        }
    }
}

/// Residual convnet over eye crops; class 1 is "locked on camera".
#[derive(Clone, Debug)]
pub struct GazeNet {
    pub cfg: GazeConfig,
    store: ParamStore,
    trunk: ResNetTrunk,
    head: Linear,
}

impl Model for GazeNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

pub(crate) fn check_input(img: &Image, size: CropSize) -> Result<()> {
    if img.width() != size.width || img.height() != size.height {
        return Err(Error::Shape(alloc::format!(
            "expected a {}x{} crop, got {}x{}",
            size.width,
            size.height,
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

impl GazeNet {
    pub fn new(cfg: GazeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let trunk = ResNetTrunk::new(&mut store, &mut rng, "gaze.trunk", 3, &cfg.widths);
        let head = Linear::new(&mut store, &mut rng, "gaze.head", trunk.width(), 2);
        Self {
            cfg,
            store,
            trunk,
            head,
        }
    }

    /// `[1, 2]` logits for one eye crop.
    pub fn logits(&self, tape: &mut Tape, crop: &Image) -> Result<Var> {
        check_input(crop, self.cfg.input)?;
        let x = tape.constant(self.cfg.norm.apply(crop));
        let f = self.trunk.forward(tape, &self.store, x);
        Ok(self.head.forward(tape, &self.store, f))
    }

    /// Mean cross-entropy over a batch of eye crops.
    pub fn loss(&self, tape: &mut Tape, crops: &[&Image], locked: &[bool]) -> Result<Var> {
        if crops.is_empty() {
            return Err(Error::Empty("gaze batch"));
        }
        if crops.len() != locked.len() {
            return Err(Error::LengthMismatch {
                expected: crops.len(),
                found: locked.len(),
            });
        }
        let rows = crops
            .iter()
            .map(|c| self.logits(tape, c))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.concat(&rows);
        let targets: Vec<usize> = locked.iter().map(|&l| usize::from(l)).collect();
        Ok(tape.cross_entropy(logits, &targets))
    }

    pub fn p_locked(&self, crop: &Image) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, crop)?;
        let d = tape.value(l).data();
        let p = math::sigmoid(d[1] - d[0]);
        if !p.is_finite() {
            return Err(Error::NonFinite("gaze logits"));
        }
        Ok(p)
    }

    /// Classifies every eye crop of a frame and applies [`gaze_rule`].
    pub fn frame_verdicts(&self, crops: &[&Image]) -> Result<(Vec<f64>, Vec<Flag>)> {
        let p = crops
            .iter()
            .map(|c| self.p_locked(c))
            .collect::<Result<Vec<_>>>()?;
        let locked: Vec<bool> = p.iter().map(|&p| p >= self.cfg.threshold).collect();
        Ok((p, gaze_rule(&locked)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight transcription of the three cases, for enumeration.
    fn oracle(locked: &[bool], i: usize) -> Flag {
        let nl = locked.iter().filter(|&&x| x).count() as i64;
        let no = locked.len() as i64 - nl;
        let nt = locked.len() as i64;
        if no > nl {
            Flag::NotApplicable
        } else if !locked[i] && (nl - no > 1 || nt == 2) {
            Flag::Flagged
        } else {
            Flag::Clear
        }
    }

    #[test]
    fn worked_cases() {
        let f = gaze_rule(&[true, true, false, true, true]);
        assert_eq!(
            f,
            vec![
                Flag::Clear,
                Flag::Clear,
                Flag::Flagged,
                Flag::Clear,
                Flag::Clear
            ]
        );
        assert_eq!(gaze_rule(&[true, false]), vec![Flag::Clear, Flag::Flagged]);
        assert_eq!(
            gaze_rule(&[true, false, false]),
            vec![Flag::NotApplicable; 3]
        );
    }

    #[test]
    fn balanced_frames_flag_nothing() {
        assert_eq!(gaze_rule(&[true, false, true, false]), vec![Flag::Clear; 4]);
        assert_eq!(gaze_rule(&[true, true, false]), vec![Flag::Clear; 3]);
    }

    #[test]
    fn exhaustive_up_to_six_faces() {
        for n in 1..=6usize {
            for bits in 0..(1u32 << n) {
                let locked: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
                let got = gaze_rule(&locked);
                for i in 0..n {
                    assert_eq!(got[i], oracle(&locked, i), "{locked:?} face {i}");
                    if locked[i] {
                        assert_ne!(got[i], Flag::Flagged);
                    }
                }
                let na = got.iter().filter(|f| **f == Flag::NotApplicable).count();
                assert!(na == 0 || na == n);
                let mut rev = locked.clone();
                rev.reverse();
                let mut back = gaze_rule(&rev);
                back.reverse();
                assert_eq!(back, got);
            }
        }
    }

    #[test]
    fn wrong_crop_size_is_an_error() {
        let net = GazeNet::new(GazeConfig::desk(), 1);
        assert!(net.p_locked(&Image::new(16, 16)).is_err());
        let a = net
            .p_locked(&Image::filled(32, 16, [0.3, 0.2, 0.1]))
            .unwrap();
        let b = net
            .p_locked(&Image::filled(32, 16, [0.3, 0.2, 0.1]))
            .unwrap();
        assert_eq!(a, b);
    }
}
