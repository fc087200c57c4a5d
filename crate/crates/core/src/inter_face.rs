//! Inter-face appearance module: a patch transformer embeds every face of a
//! frame and is trained jointly on real/fake classification and a pairwise
//! contrastive term that pulls same-label faces together and pushes
//! different-label faces at least `margin` apart.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::gaze::check_input;
use crate::image::{Image, InputNorm};
use crate::math;
use crate::model::CropSize;
use crate::nn::{Conv2d, LayerNorm, Linear, Model, ParamId, ParamStore, TransformerBlock};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Added under the square root so distance gradients stay finite at zero.
pub const DISTANCE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterFaceConfig {
    pub input: CropSize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub margin: f64,
    pub lambda_comp: f64,
    pub pair_cap: usize,
    pub norm: InputNorm,
}

impl Default for InterFaceConfig {
    fn default() -> Self {
        Self {
            input: CropSize::new(224, 224),
            patch: 16,
            width: 64,
            heads: 2,
            blocks: 4,
            embed_dim: 64,
            margin: 1.0,
            lambda_comp: 0.3,
            pair_cap: 32,
            norm: InputNorm::Centered,
        }
    }
}

impl InterFaceConfig {
    pub fn desk() -> Self {
        Self {
            input: CropSize::new(32, 32),
            patch: 8,
            width: 32,
            blocks: 2,
            embed_dim: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !(self.lambda_comp >= 0.0) {
            return Err(Error::InvalidConfig(
                "inter_face: margin > 0 and lambda_comp >= 0".into(),
            ));
        }
        if self.patch == 0
            || !self.input.width.is_multiple_of(self.patch)
            || !self.input.height.is_multiple_of(self.patch)
        {
            return Err(Error::InvalidConfig(
                "inter_face: patch must tile the input".into(),
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(
                "inter_face: width must divide into heads".into(),
            ));
        }
        Ok(())
    }

    fn tokens(&self) -> usize {
        (self.input.width / self.patch) * (self.input.height / self.patch)
    }
}

/// An unordered within-frame pair; `similar` means equal real/fake labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacePair {
    pub i: usize,
    pub j: usize,
    pub similar: bool,
}

/// Every pair of the frame when there are at most `cap`, otherwise a seeded
/// uniform subset of `cap` pairs that keeps at least one dissimilar pair
/// whenever the labels are mixed.
pub fn sample_pairs(labels: &[bool], cap: usize, seed: u64) -> Vec<FacePair> {
    let n = labels.len();
    let mut all = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            all.push(FacePair {
                i,
                j,
                similar: labels[i] == labels[j],
            });
        }
    }
    if all.len() <= cap {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    if cap > 0 && !all[..cap].iter().any(|p| !p.similar) {
        if let Some(k) = all[cap..].iter().position(|p| !p.similar) {
            all.swap(cap - 1, cap + k);
        }
    }
    all.truncate(cap);
    all
}

/// Mean over pairs of `similar * d + (1 - similar) * max(0, margin - d)`,
/// with `d` the (unsquared) embedding distance; 0 for no pairs.
pub fn contrastive_term(pairs: &[(bool, f64)], margin: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|&(similar, d)| if similar { d } else { (margin - d).max(0.0) })
        .sum();
    total / pairs.len() as f64
}

/// Euclidean distance between rows `i` and `j` of `[n, d]` embeddings.
pub fn pair_distance(tape: &mut Tape, embeddings: Var, i: usize, j: usize) -> Var {
    let a = tape.row(embeddings, i);
    let b = tape.row(embeddings, j);
    let d = tape.sub(a, b);
    let sq = tape.square(d);
    let s = tape.sum(sq);
    tape.sqrt(s, DISTANCE_EPS)
}

/// Tape version of [`contrastive_term`].
pub fn contrastive_term_var(
    tape: &mut Tape,
    embeddings: Var,
    pairs: &[FacePair],
    margin: f64,
) -> Option<Var> {
    if pairs.is_empty() {
        return None;
    }
    let terms: Vec<Var> = pairs
        .iter()
        .map(|p| {
            let d = pair_distance(tape, embeddings, p.i, p.j);
            if p.similar {
                d
            } else {
                let neg = tape.scale(d, -1.0);
                let gap = tape.add_scalar(neg, margin);
                tape.relu(gap)
            }
        })
        .collect();
    let all = tape.concat(&terms);
    Some(tape.mean(all))
}

/// `CE(logits, labels) + lambda_comp * contrastive_term`.
pub fn loss_app(
    tape: &mut Tape,
    logits: Var,
    labels: &[bool],
    embeddings: Var,
    pairs: &[FacePair],
    margin: f64,
    lambda_comp: f64,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Empty("faces"));
    }
    let targets: Vec<usize> = labels.iter().map(|&f| usize::from(f)).collect();
    let ce = tape.cross_entropy(logits, &targets);
    if lambda_comp == 0.0 {
        return Ok(ce);
    }
    Ok(
        match contrastive_term_var(tape, embeddings, pairs, margin) {
            Some(c) => {
                let c = tape.scale(c, lambda_comp);
                tape.add(ce, c)
            }
            None => ce,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceEmbedding {
    pub embedding: Vec<f64>,
    /// `[real, fake]` logits.
    pub logits: [f64; 2],
}

impl FaceEmbedding {
    pub fn distance(&self, other: &FaceEmbedding) -> f64 {
        let s: f64 = self
            .embedding
            .iter()
            .zip(&other.embedding)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        math::sqrt(s)
    }

    pub fn margin(&self) -> f64 {
        self.logits[1] - self.logits[0]
    }
}

/// How per-face evidence maps to the M2 fake score:
/// `sigmoid(w_logit * margin + w_distance * median_distance + bias)`, where
/// `margin` is the face's [relative margin](relative_margins) and
/// `median_distance` the median embedding distance from the face to the
/// other faces of its frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCalibration {
    pub w_logit: f64,
    pub w_distance: f64,
    pub bias: f64,
}

impl Default for ScoreCalibration {
    /// The classifier head alone.
    fn default() -> Self {
        Self {
            w_logit: 1.0,
            w_distance: 0.0,
            bias: 0.0,
        }
    }
}

impl ScoreCalibration {
    pub fn score(&self, margin: f64, median_distance: f64) -> f64 {
        math::sigmoid(self.w_logit * margin + self.w_distance * median_distance + self.bias)
    }

    /// Logistic regression on `(margin, median_distance, fake)` triples by
    /// Newton iterations with a small ridge penalty.
    pub fn fit(samples: &[(f64, f64, bool)]) -> Result<Self> {
        if samples.is_empty() || samples.iter().all(|s| s.2) || samples.iter().all(|s| !s.2) {
            return Err(Error::InvalidConfig(
                "calibration needs both classes".into(),
            ));
        }
        let ridge = 1e-3;
        let mut w = [1.0, 0.0, 0.0];
        for _ in 0..50 {
            let mut g = [0.0; 3];
            let mut h = [[0.0; 3]; 3];
            for &(m, d, y) in samples {
                let x = [m, d, 1.0];
                let p = math::sigmoid(w[0] * x[0] + w[1] * x[1] + w[2]);
                let r = p - f64::from(u8::from(y));
                for a in 0..3 {
                    g[a] += r * x[a];
                    for b in 0..3 {
                        h[a][b] += p * (1.0 - p) * x[a] * x[b];
                    }
                }
            }
            for a in 0..2 {
                g[a] += ridge * samples.len() as f64 * w[a];
                h[a][a] += ridge * samples.len() as f64;
            }
            let step =
                solve3(h, g).ok_or(Error::InvalidConfig("singular calibration system".into()))?;
            for a in 0..3 {
                w[a] -= step[a];
            }
            if step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-10 {
                break;
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("calibration"));
        }
        Ok(Self {
            w_logit: w[0],
            w_distance: w[1],
            bias: w[2],
        })
    }
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in 0..3 {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some([b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]])
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Median distance from each face to the others of its frame; 0 for a
/// single face.
pub fn median_distances(faces: &[FaceEmbedding]) -> Vec<f64> {
    (0..faces.len())
        .map(|i| {
            median(
                (0..faces.len())
                    .filter(|&j| j != i)
                    .map(|j| faces[i].distance(&faces[j]))
                    .collect(),
            )
        })
        .collect()
}

/// Each face's classifier margin minus the median margin of the other
/// faces of its frame; 0 for a single face. Changes that shift every face
/// of a frame alike (lighting, blur, compression) cancel out.
pub fn relative_margins(faces: &[FaceEmbedding]) -> Vec<f64> {
    (0..faces.len())
        .map(|i| {
            let others: Vec<f64> = (0..faces.len())
                .filter(|&j| j != i)
                .map(|j| faces[j].margin())
                .collect();
            if others.is_empty() {
                0.0
            } else {
                faces[i].margin() - median(others)
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct InterFaceNet {
    pub cfg: InterFaceConfig,
    pub calibration: ScoreCalibration,
    store: ParamStore,
    patch: Conv2d,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    embed: Linear,
    classify: Linear,
}

impl Model for InterFaceNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl InterFaceNet {
    pub fn new(cfg: InterFaceConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = cfg.width;
        let patch = Conv2d::new(
            &mut store,
            &mut rng,
            "app.patch",
            3,
            w,
            cfg.patch,
            cfg.patch,
            0,
            1.0,
        );
        let n = cfg.tokens();
        let pos_init = (0..n * w).map(|_| 0.02 * math::normal(&mut rng)).collect();
        let pos = store.add("app.pos", Tensor::from_vec(&[n, w], pos_init));
        let blocks = (0..cfg.blocks)
            .map(|b| {
                TransformerBlock::new(
                    &mut store,
                    &mut rng,
                    &alloc::format!("app.block{b}"),
                    w,
                    cfg.heads,
                )
            })
            .collect();
        let norm = LayerNorm::new(&mut store, "app.norm", w);
        let embed = Linear::new(&mut store, &mut rng, "app.embed", w, cfg.embed_dim);
        let classify = Linear::new(&mut store, &mut rng, "app.classify", w, 2);
        Ok(Self {
            cfg,
            calibration: ScoreCalibration::default(),
            store,
            patch,
            pos,
            blocks,
            norm,
            embed,
            classify,
        })
    }

    fn pooled(&self, tape: &mut Tape, crop: &Image) -> Result<Var> {
        check_input(crop, self.cfg.input)?;
        let x = tape.constant(self.cfg.norm.apply(crop));
        let p = self.patch.forward(tape, &self.store, x);
        let tokens = tape.reshape(p, &[self.cfg.width, self.cfg.tokens()]);
        let tokens = tape.transpose(tokens);
        let pos = tape.param(&self.store, self.pos);
        let mut h = tape.add(tokens, pos);
        for b in &self.blocks {
            h = b.forward(tape, &self.store, h);
        }
        let h = self.norm.forward(tape, &self.store, h);
        let m = tape.mean_rows(h);
        Ok(tape.reshape(m, &[1, self.cfg.width]))
    }

    /// `([n, embed_dim], [n, 2])` embeddings and logits, one row per crop.
    pub fn embed_faces(&self, tape: &mut Tape, crops: &[&Image]) -> Result<(Var, Var)> {
        if crops.is_empty() {
            return Err(Error::Empty("face crops"));
        }
        let (mut emb, mut log) = (Vec::new(), Vec::new());
        for c in crops {
            let p = self.pooled(tape, c)?;
            emb.push(self.embed.forward(tape, &self.store, p));
            log.push(self.classify.forward(tape, &self.store, p));
        }
        Ok((tape.concat(&emb), tape.concat(&log)))
    }

    /// [`loss_app`] for one frame with pairs drawn by [`sample_pairs`].
    pub fn frame_loss(
        &self,
        tape: &mut Tape,
        crops: &[&Image],
        labels: &[bool],
        pair_seed: u64,
    ) -> Result<Var> {
        if crops.len() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: crops.len(),
                found: labels.len(),
            });
        }
        let (emb, logits) = self.embed_faces(tape, crops)?;
        let pairs = sample_pairs(labels, self.cfg.pair_cap, pair_seed);
        loss_app(
            tape,
            logits,
            labels,
            emb,
            &pairs,
            self.cfg.margin,
            self.cfg.lambda_comp,
        )
    }

    pub fn embed(&self, crops: &[&Image]) -> Result<Vec<FaceEmbedding>> {
        let mut out = Vec::with_capacity(crops.len());
        for c in crops {
            let mut tape = Tape::new();
            let (e, l) = self.embed_faces(&mut tape, &[c])?;
            let logits = tape.value(l).data();
            let embedding = tape.value(e).data().to_vec();
            if embedding.iter().chain(logits).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("inter-face outputs"));
            }
            out.push(FaceEmbedding {
                embedding,
                logits: [logits[0], logits[1]],
            });
        }
        Ok(out)
    }

    /// Calibrated fake scores for all faces of one frame.
    pub fn frame_scores(&self, crops: &[&Image]) -> Result<Vec<f64>> {
        let e = self.embed(crops)?;
        let d = median_distances(&e);
        let m = relative_margins(&e);
        Ok(m.iter()
            .zip(&d)
            .map(|(&m, &d)| self.calibration.score(m, d))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn hinge_cases() {
        assert!((contrastive_term(&[(true, 0.2)], 1.0) - 0.2).abs() < 1e-12);
        assert!((contrastive_term(&[(false, 0.4)], 1.0) - 0.6).abs() < 1e-12);
        assert_eq!(contrastive_term(&[(false, 1.5)], 1.0), 0.0);
        assert_eq!(contrastive_term(&[], 1.0), 0.0);
    }

    #[test]
    fn pair_counts() {
        assert_eq!(sample_pairs(&[false, true, false], 32, 0).len(), 3);
        assert!(sample_pairs(&[true], 32, 0).is_empty());
        let mut labels = [false; 10];
        labels[7] = true;
        for seed in 0..50 {
            let p = sample_pairs(&labels, 32, seed);
            assert_eq!(p.len(), 32);
            assert!(p.iter().any(|p| !p.similar));
            assert!(p
                .iter()
                .all(|p| p.i < p.j && p.similar == (labels[p.i] == labels[p.j])));
            let mut uniq = p.clone();
            uniq.sort_by_key(|p| (p.i, p.j));
            uniq.dedup();
            assert_eq!(uniq.len(), 32);
        }
        assert_eq!(sample_pairs(&labels, 32, 4), sample_pairs(&labels, 32, 4));
    }

    #[test]
    fn contrastive_is_order_invariant() {
        let a = [(true, 0.3), (false, 0.2), (false, 2.0), (true, 1.1)];
        let mut b = a;
        b.reverse();
        assert!((contrastive_term(&a, 1.0) - contrastive_term(&b, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn shrinking_dissimilar_distances_raises_hinge() {
        let base = [(false, 0.8), (false, 0.5), (true, 0.3)];
        let shrunk = [(false, 0.6), (false, 0.3), (true, 0.3)];
        assert!(contrastive_term(&shrunk, 1.0) > contrastive_term(&base, 1.0));
    }

    fn crop(seed: u32) -> Image {
        let mut img = Image::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                let v = ((x as u32 * 31 + y as u32 * 17 + seed * 7) % 23) as f32 / 22.0;
                img.set_pixel(x, y, [v, 0.5 * v, 1.0 - v]);
            }
        }
        img
    }

    #[test]
    fn identical_crops_embed_identically_and_batching_is_free() {
        let net = InterFaceNet::new(InterFaceConfig::desk(), 3).unwrap();
        let (a, b, c) = (crop(1), crop(1), crop(2));
        let e = net.embed(&[&a, &b, &c]).unwrap();
        assert_eq!(e[0], e[1]);
        assert!(e[0].distance(&e[1]) == 0.0);
        let mut tape = Tape::new();
        let (emb, _) = net.embed_faces(&mut tape, &[&a, &b, &c]).unwrap();
        let rows = tape.value(emb).data();
        let d = net.cfg.embed_dim;
        for (k, f) in e.iter().enumerate() {
            for (x, y) in rows[k * d..(k + 1) * d].iter().zip(&f.embedding) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(net.embed(&[&Image::new(16, 16)]).is_err());
    }

    #[test]
    fn zero_lambda_is_plain_cross_entropy() {
        let net = InterFaceNet::new(
            InterFaceConfig {
                lambda_comp: 0.0,
                ..InterFaceConfig::desk()
            },
            3,
        )
        .unwrap();
        let (a, b) = (crop(1), crop(5));
        let mut t = Tape::new();
        let l = net
            .frame_loss(&mut t, &[&a, &b], &[false, true], 0)
            .unwrap();
        let mut t2 = Tape::new();
        let (_, logits) = net.embed_faces(&mut t2, &[&a, &b]).unwrap();
        let ce = t2.cross_entropy(logits, &[0, 1]);
        assert_eq!(t.value(l).item(), t2.value(ce).item());
    }

    #[test]
    fn perfect_predictions_drive_loss_to_zero() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::from_vec(&[2, 2], vec![40.0, -40.0, 40.0, -40.0]));
        let emb = t.constant(Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]));
        let pairs = sample_pairs(&[false, false], 32, 0);
        let l = loss_app(&mut t, logits, &[false, false], emb, &pairs, 1.0, 0.3).unwrap();
        // only the distance epsilon remains: 0.3 * sqrt(1e-12)
        assert!(t.value(l).item() < 1e-6);
    }

    #[test]
    fn calibration_fit_separates_classes() {
        let mut s = Vec::new();
        for k in 0..40 {
            let x = k as f64 / 10.0;
            s.push((x - 3.0, x, k % 2 == 0 && k > 20));
            s.push((-2.0, 0.1 * x, false));
        }
        let c = ScoreCalibration::fit(&s).unwrap();
        assert!(c.w_logit.is_finite() && c.bias.is_finite());
        assert!(ScoreCalibration::fit(&[(0.0, 0.0, true)]).is_err());
    }

    #[test]
    fn median_distance_of_outlier_is_largest() {
        let e = |v: f64| FaceEmbedding {
            embedding: vec![v, 0.0],
            logits: [0.0, 0.0],
        };
        let d = median_distances(&[e(0.0), e(0.1), e(-0.1), e(3.0)]);
        assert!(d[3] > d[0] && d[3] > d[1] && d[3] > d[2]);
        assert_eq!(median_distances(&[e(1.0)]), vec![0.0]);
    }
}
