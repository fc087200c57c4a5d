//! Test-time image perturbations at graded severities.
//!
//! Severity runs from 0 (identity) to [`MAX_SEVERITY`]. Random choices are
//! drawn from a caller-supplied seed so a clip sees the same realization in
//! every frame.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::color::shift_hue;
use crate::image::Image;
use crate::math;
use crate::{Error, Result};

pub const MAX_SEVERITY: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    ColorManipulation,
    EdgeManipulation,
    BlockwiseDistortion,
    ImageCorruption,
    ConvolutionMask,
    ExternalEffects,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 6] = [
        PerturbationKind::ColorManipulation,
        PerturbationKind::EdgeManipulation,
        PerturbationKind::BlockwiseDistortion,
        PerturbationKind::ImageCorruption,
        PerturbationKind::ConvolutionMask,
        PerturbationKind::ExternalEffects,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::ColorManipulation => "color_manipulation",
            PerturbationKind::EdgeManipulation => "edge_manipulation",
            PerturbationKind::BlockwiseDistortion => "blockwise_distortion",
            PerturbationKind::ImageCorruption => "image_corruption",
            PerturbationKind::ConvolutionMask => "convolution_mask",
            PerturbationKind::ExternalEffects => "external_effects",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub severity: u8,
}

impl Perturbation {
    pub fn new(kind: PerturbationKind, severity: u8) -> Result<Self> {
        if severity > MAX_SEVERITY {
            return Err(Error::InvalidConfig(format!(
                "severity {severity} exceeds {MAX_SEVERITY}"
            )));
        }
        Ok(Self { kind, severity })
    }

    /// Applies the perturbation; `seed` fixes its random realization.
    pub fn apply(&self, img: &Image, seed: u64) -> Image {
        let s = self.severity as f64;
        if self.severity == 0 {
            return img.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((self.kind as u64) << 56));
        match self.kind {
            PerturbationKind::ColorManipulation => {
                let turns = (0.03 * s * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }) as f32;
                let sat = (1.0 - 0.12 * s) as f32;
                map_pixels(img, |p| shift_hue(p, turns, sat))
            }
            PerturbationKind::EdgeManipulation => unsharp(img, 0.4 * s),
            PerturbationKind::BlockwiseDistortion => shuffle_blocks(img, 0.1 * s, &mut rng),
            PerturbationKind::ImageCorruption => {
                let sigma = 0.02 * s;
                let levels = [48.0f32, 32.0, 24.0, 16.0, 12.0][self.severity as usize - 1];
                let mut out = img.clone();
                for v in out.data_mut() {
                    let noisy = (*v as f64 + sigma * math::normal(&mut rng)).clamp(0.0, 1.0) as f32;
                    *v = libm::roundf(noisy * (levels - 1.0)) / (levels - 1.0);
                }
                out
            }
            PerturbationKind::ConvolutionMask => {
                if rng.gen_bool(0.5) {
                    let mut out = img.clone();
                    for _ in 0..self.severity {
                        out = convolve3(
                            &out,
                            &[1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0],
                            16.0,
                            0.0,
                        );
                    }
                    out
                } else {
                    let emb = convolve3(
                        img,
                        &[-2.0, -1.0, 0.0, -1.0, 1.0, 1.0, 0.0, 1.0, 2.0],
                        1.0,
                        0.5,
                    );
                    let mix = (0.15 * s) as f32;
                    let mut out = img.clone();
                    for (o, e) in out.data_mut().iter_mut().zip(emb.data()) {
                        *o = (*o * (1.0 - mix) + (e - 0.5 + *o) * mix).clamp(0.0, 1.0);
                    }
                    out
                }
            }
            PerturbationKind::ExternalEffects => {
                let mut out = img.clone();
                let (w, h) = (img.width() as f64, img.height() as f64);
                for _ in 0..self.severity {
                    let side = rng.gen_range(0.06..0.12);
                    let (ow, oh) = (side * w, side * w * rng.gen_range(0.6..1.4));
                    let (x0, y0) = (
                        rng.gen_range(0.0..(w - ow).max(1.0)),
                        rng.gen_range(0.0..(h - oh).max(1.0)),
                    );
                    let rgb = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
                    for y in (y0 as usize)..((y0 + oh) as usize).min(img.height()) {
                        for x in (x0 as usize)..((x0 + ow) as usize).min(img.width()) {
                            out.set_pixel(x, y, rgb);
                        }
                    }
                }
                out
            }
        }
    }
}

fn map_pixels(img: &Image, f: impl Fn([f32; 3]) -> [f32; 3]) -> Image {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let q = f([px[0], px[1], px[2]]);
        px.copy_from_slice(&q);
    }
    out
}

/// 3x3 convolution with replicated borders: `sum(k * x) / div + bias`.
fn convolve3(img: &Image, k: &[f32; 9], div: f32, bias: f32) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for dy in 0..3 {
                let yy = (y + dy).saturating_sub(1).min(h - 1);
                for dx in 0..3 {
                    let xx = (x + dx).saturating_sub(1).min(w - 1);
                    let p = img.pixel(xx, yy);
                    let kv = k[dy * 3 + dx];
                    for c in 0..3 {
                        acc[c] += kv * p[c];
                    }
                }
            }
            out.set_pixel(x, y, acc.map(|a| (a / div + bias).clamp(0.0, 1.0)));
        }
    }
    out
}

fn unsharp(img: &Image, amount: f64) -> Image {
    let blur = convolve3(
        img,
        &[1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0],
        16.0,
        0.0,
    );
    let a = amount as f32;
    let mut out = img.clone();
    for (o, b) in out.data_mut().iter_mut().zip(blur.data()) {
        *o = (*o + a * (*o - b)).clamp(0.0, 1.0);
    }
    out
}

const BLOCK: usize = 8;

/// Permutes 8x8 blocks inside a block-aligned window covering about
/// `fraction` of the image.
fn shuffle_blocks(img: &Image, fraction: f64, rng: &mut ChaCha8Rng) -> Image {
    let (bw, bh) = (img.width() / BLOCK, img.height() / BLOCK);
    if bw == 0 || bh == 0 {
        return img.clone();
    }
    let side = math::sqrt(fraction.clamp(0.0, 1.0));
    let (nw, nh) = (
        (math::round(bw as f64 * side) as usize).clamp(1, bw),
        (math::round(bh as f64 * side) as usize).clamp(1, bh),
    );
    let (ox, oy) = (rng.gen_range(0..=bw - nw), rng.gen_range(0..=bh - nh));
    let cells: Vec<(usize, usize)> = (0..nh)
        .flat_map(|j| (0..nw).map(move |i| (ox + i, oy + j)))
        .collect();
    let mut perm = cells.clone();
    perm.shuffle(rng);
    let mut out = img.clone();
    for (&(dx, dy), &(sx, sy)) in cells.iter().zip(&perm) {
        for y in 0..BLOCK {
            for x in 0..BLOCK {
                out.set_pixel(
                    dx * BLOCK + x,
                    dy * BLOCK + y,
                    img.pixel(sx * BLOCK + x, sy * BLOCK + y),
                );
            }
        }
    }
    out
}
