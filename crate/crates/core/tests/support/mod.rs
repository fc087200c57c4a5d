//! Independent oracles shared by the property tests and the acceptance
//! runner. Each oracle restates a rule from first principles rather than
//! calling into the implementation it checks.

#![allow(dead_code)]

use hicom_core::autograd::{Tape, Var};
use hicom_core::body_face::{mismatch_rule, AttributeGuess, AttributePrediction};
use hicom_core::fusion::{ablation_stack, FusionConfig, VerdictSet};
use hicom_core::gaze::gaze_rule;
use hicom_core::image::Image;
use hicom_core::inter_face::{InterFaceConfig, InterFaceNet};
use hicom_core::model::compute_frame_complete_metrics;
use hicom_core::model::{
    AgeClass, CropSize, FaceBox, FacePrediction, Flag, GenderClass, ModuleId, ModuleSet,
    ModuleVerdict,
};
use hicom_core::nn::Model;
use hicom_core::optim::loss_and_grad;
use hicom_core::scene_motion::{MotionInput, SceneMotionConfig, SceneMotionNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ----- gaze and attribute rules -----

/// Verdicts straight from the rule's case analysis: abstain when the faces
/// looking away outnumber those looking at the camera; otherwise flag an
/// off-camera face when locked faces lead by more than one or there are
/// exactly two faces.
pub fn gaze_oracle(locked: &[bool]) -> Vec<Flag> {
    let n_l = locked.iter().filter(|&&l| l).count() as i64;
    let n_o = locked.len() as i64 - n_l;
    if n_o > n_l {
        return vec![Flag::NotApplicable; locked.len()];
    }
    let fires = n_l - n_o > 1 || locked.len() == 2;
    locked
        .iter()
        .map(|&l| match (l, fires) {
            (true, _) => Flag::Clear,
            (false, true) => Flag::Flagged,
            (false, false) => Flag::Clear,
        })
        .collect()
}

/// `(cases, mismatches)` over every locked/off assignment with 1..=max_n faces.
pub fn gaze_exhaustive(max_n: usize) -> (usize, usize) {
    let (mut cases, mut bad) = (0, 0);
    for n in 1..=max_n {
        for mask in 0u32..(1 << n) {
            let locked: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            cases += 1;
            if gaze_rule(&locked) != gaze_oracle(&locked) {
                bad += 1;
            }
        }
    }
    (cases, bad)
}

fn confident(age: AgeClass, gender: GenderClass) -> AttributeGuess {
    let mut age_conf = [0.0; 3];
    let mut gender_conf = [0.0; 2];
    age_conf[age.index()] = 1.0;
    gender_conf[gender.index()] = 1.0;
    AttributeGuess {
        age,
        gender,
        age_conf,
        gender_conf,
    }
}

/// `(cases, mismatches)` over the 6 x 6 face/body attribute table.
pub fn mismatch_table() -> (usize, usize) {
    let classes: Vec<(AgeClass, GenderClass)> = AgeClass::ALL
        .iter()
        .flat_map(|&a| GenderClass::ALL.iter().map(move |&g| (a, g)))
        .collect();
    let (mut cases, mut bad) = (0, 0);
    for &(fa, fg) in &classes {
        for &(ba, bg) in &classes {
            cases += 1;
            let expect = if (fa, fg) == (ba, bg) {
                Flag::Clear
            } else {
                Flag::Flagged
            };
            let pred = AttributePrediction {
                face: confident(fa, fg),
                body: confident(ba, bg),
            };
            let swapped = AttributePrediction {
                face: pred.body,
                body: pred.face,
            };
            if mismatch_rule(&pred, None) != expect || mismatch_rule(&swapped, None) != expect {
                bad += 1;
            }
        }
    }
    (cases, bad)
}

// ----- frame-complete metrics -----

pub fn random_frames(rng: &mut ChaCha8Rng, n_frames: usize) -> Vec<Vec<FacePrediction>> {
    (0..n_frames)
        .map(|_| {
            let n = rng.gen_range(1..=6);
            (0..n)
                .map(|_| {
                    let truth = rng.gen_bool(0.35);
                    // Scores on a coarse grid so ties occur.
                    let score = rng.gen_range(0..20) as f64 / 19.0;
                    let fake = if rng.gen_bool(0.85) { truth } else { !truth };
                    FacePrediction { score, fake, truth }
                })
                .collect()
        })
        .collect()
}

/// Pairwise AUC with ties counted as one half; `None` without both classes.
pub fn auc_oracle(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(truth)
        .filter(|p| *p.1)
        .map(|p| *p.0)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(truth)
        .filter(|p| !*p.1)
        .map(|p| *p.0)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut s = 0.0;
    for &p in &pos {
        for &q in &neg {
            s += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(s / (pos.len() * neg.len()) as f64)
}

pub struct MetricCheck {
    pub fcac_equal: bool,
    pub fcau_error: f64,
    pub fcac: f64,
    pub fac: f64,
    /// Frames whose all-correct indicator exceeds their face accuracy.
    pub frame_violations: usize,
}

pub fn metric_check(frames: &[Vec<FacePrediction>]) -> MetricCheck {
    let got = compute_frame_complete_metrics(frames).expect("metrics");
    let complete = frames
        .iter()
        .filter(|f| f.iter().all(|p| p.fake == p.truth))
        .count();
    let fcac = complete as f64 / frames.len() as f64;
    let frame_scores: Vec<f64> = frames
        .iter()
        .map(|f| f.iter().map(|p| p.score).fold(0.0, f64::max))
        .collect();
    let frame_truth: Vec<bool> = frames.iter().map(|f| f.iter().any(|p| p.truth)).collect();
    let fcau = auc_oracle(&frame_scores, &frame_truth);
    let fcau_error = match (got.fcau, fcau) {
        (Some(a), Some(b)) => (a - b).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    let faces: Vec<&FacePrediction> = frames.iter().flatten().collect();
    let fac = faces.iter().filter(|p| p.fake == p.truth).count() as f64 / faces.len() as f64;
    let frame_violations = frames
        .iter()
        .filter(|f| {
            let all = f.iter().all(|p| p.fake == p.truth) as u8 as f64;
            let acc = f.iter().filter(|p| p.fake == p.truth).count() as f64 / f.len() as f64;
            all > acc
        })
        .count();
    MetricCheck {
        fcac_equal: got.fcac == fcac,
        fcau_error,
        fcac,
        fac,
        frame_violations,
    }
}

// ----- fusion -----

pub struct FusionCheck {
    pub patterns: usize,
    pub flips: usize,
    pub attribution_errors: usize,
    pub na_effects: usize,
}

/// Every M1/M2 score pattern, M3 in {0, 1, NA, absent} and M4 in {0, 1}
/// against every pair of nested subsets that start at M1.
pub fn fusion_check() -> FusionCheck {
    let cfg = FusionConfig::default();
    let subsets: Vec<ModuleSet> = (0u8..16)
        .map(|bits| {
            ModuleSet::from_modules(
                &ModuleId::ALL
                    .iter()
                    .copied()
                    .filter(|m| bits >> m.index() & 1 == 1)
                    .collect::<Vec<_>>(),
            )
        })
        .filter(|s| s.contains(ModuleId::M1))
        .collect();
    let mut out = FusionCheck {
        patterns: 0,
        flips: 0,
        attribution_errors: 0,
        na_effects: 0,
    };
    for s1 in [0.2, 0.8] {
        for s2 in [0.3, 0.7] {
            for f3 in [
                Some(Flag::Clear),
                Some(Flag::Flagged),
                Some(Flag::NotApplicable),
                None,
            ] {
                for f4 in [Flag::Clear, Flag::Flagged] {
                    out.patterns += 1;
                    let mut v = VerdictSet::new()
                        .with(ModuleVerdict::scored(ModuleId::M1, s1, cfg.m1_threshold))
                        .with(ModuleVerdict::scored(ModuleId::M2, s2, cfg.m2_threshold))
                        .with(ModuleVerdict::flag_only(ModuleId::M4, f4));
                    if let Some(f) = f3 {
                        v.insert(ModuleVerdict::flag_only(ModuleId::M3, f));
                    }
                    let flagged = |m: ModuleId| match m {
                        ModuleId::M1 => s1 >= cfg.m1_threshold,
                        ModuleId::M2 => s2 >= cfg.m2_threshold,
                        ModuleId::M3 => f3 == Some(Flag::Flagged),
                        ModuleId::M4 => f4 == Flag::Flagged,
                    };
                    for &s in &subsets {
                        let r = ablation_stack(&v, s, &cfg).expect("fusion");
                        let expect: Vec<ModuleId> = s.iter().filter(|&m| flagged(m)).collect();
                        if r.attribution != ModuleSet::from_modules(&expect)
                            || r.fake != !expect.is_empty()
                        {
                            out.attribution_errors += 1;
                        }
                        for &t in &subsets {
                            if s.iter().all(|m| t.contains(m))
                                && r.fake
                                && !ablation_stack(&v, t, &cfg).unwrap().fake
                            {
                                out.flips += 1;
                            }
                        }
                        if f3 == Some(Flag::NotApplicable) {
                            let mut absent = VerdictSet::new()
                                .with(ModuleVerdict::scored(ModuleId::M1, s1, cfg.m1_threshold))
                                .with(ModuleVerdict::scored(ModuleId::M2, s2, cfg.m2_threshold));
                            absent.insert(ModuleVerdict::flag_only(ModuleId::M4, f4));
                            if ablation_stack(&absent, s, &cfg).unwrap() != r {
                                out.na_effects += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

// ----- gradient checks -----

fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Box-Muller normals, normalized.
    let mut d: Vec<f64> = (0..n)
        .map(|_| {
            let (u, v): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
            (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        })
        .collect();
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    d.iter_mut().for_each(|x| *x /= norm);
    d
}

fn shift<M: Model>(model: &mut M, d: &[f64], step: f64) {
    let store = model.store_mut();
    let ids: Vec<_> = store.ids().collect();
    let mut k = 0;
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x += step * d[k];
            k += 1;
        }
    }
}

pub struct GradCheck {
    pub directions: usize,
    /// Largest relative error between analytic and central-difference
    /// directional derivatives.
    pub worst_rel: f64,
    /// Mean |directional derivative|, to show the check is not vacuous.
    pub mean_abs: f64,
}

/// Compares the analytic directional derivative with the central
/// difference of step `eps` along `directions` random unit directions in
/// parameter space.
pub fn gradcheck<M, F>(model: &mut M, directions: usize, eps: f64, seed: u64, loss: F) -> GradCheck
where
    M: Model,
    F: Fn(&M, &mut Tape) -> hicom_core::Result<Var>,
{
    let (_, grads) = loss_and_grad(model.store(), |t| loss(model, t)).expect("loss");
    let g: Vec<f64> = grads
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let saved = model.store().entries().to_vec();
    let value = |m: &M| {
        let mut t = Tape::new();
        let l = loss(m, &mut t).expect("loss");
        t.value(l).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut sum_abs) = (0.0f64, 0.0);
    for _ in 0..directions {
        let d = unit_direction(&mut rng, g.len());
        let analytic: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        shift(model, &d, eps);
        let plus = value(model);
        shift(model, &d, -2.0 * eps);
        let minus = value(model);
        model.store_mut().load_from(&saved).unwrap();
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        sum_abs += analytic.abs();
    }
    GradCheck {
        directions,
        worst_rel: worst,
        mean_abs: sum_abs / directions as f64,
    }
}

fn pattern(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            img.set_pixel(x, y, [rng.gen(), rng.gen(), rng.gen()]);
        }
    }
    img
}

pub fn tiny_motion() -> (SceneMotionNet, MotionInput, Vec<bool>) {
    let cfg = SceneMotionConfig {
        input_h: 32,
        input_w: 48,
        frames: 2,
        widths: vec![4, 4, 4],
        roi_output: 2,
        embed_dim: 8,
        ..SceneMotionConfig::default()
    };
    let frames = [pattern(48, 32, 1), pattern(48, 32, 2)];
    let refs: Vec<&Image> = frames.iter().collect();
    let tracks: Vec<Vec<FaceBox>> = (0..3)
        .map(|i| {
            let x = 3.0 + 14.0 * i as f64;
            vec![
                FaceBox::new(x, 6.0, 9.0, 11.0),
                FaceBox::new(x + 1.5, 7.0, 9.0, 11.0),
            ]
        })
        .collect();
    let input = MotionInput::new(&cfg, &refs, &tracks).expect("motion input");
    (
        SceneMotionNet::new(cfg, 11).expect("net"),
        input,
        vec![true, false, false],
    )
}

pub fn tiny_inter_face() -> (InterFaceNet, Vec<Image>, Vec<bool>) {
    let cfg = InterFaceConfig {
        input: CropSize::new(16, 16),
        patch: 8,
        width: 8,
        heads: 2,
        blocks: 1,
        embed_dim: 4,
        // A margin above every initial distance keeps all hinges active.
        margin: 50.0,
        ..InterFaceConfig::default()
    };
    let crops = (0..4).map(|i| pattern(16, 16, 100 + i)).collect();
    (
        InterFaceNet::new(cfg, 5).expect("net"),
        crops,
        vec![true, false, false, true],
    )
}

pub fn gradcheck_loss_sp(directions: usize, eps: f64) -> GradCheck {
    let (mut net, input, y) = tiny_motion();
    gradcheck(&mut net, directions, eps, 21, |m, t| {
        m.loss(t, &input, &y, true)
    })
}

pub fn gradcheck_loss_app(directions: usize, eps: f64) -> GradCheck {
    let (mut net, crops, y) = tiny_inter_face();
    let refs: Vec<&Image> = crops.iter().collect();
    gradcheck(&mut net, directions, eps, 22, |m, t| {
        m.frame_loss(t, &refs, &y, 3)
    })
}
