//! Bilinear region pooling (RoIAlign) expressed as a sparse linear sampler.
//!
//! A [`Sampler`] is a fixed list of `(output, input, weight)` triples over the
//! spatial positions of a feature map. It is built once from a box and the map
//! geometry, applied to every channel, and its transpose gives the backward
//! pass, so pooling is differentiable with respect to the map.

use alloc::vec::Vec;

use crate::math;
use crate::model::FaceBox;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sampler {
    input_h: usize,
    input_w: usize,
    outputs: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl Sampler {
    pub fn input_len(&self) -> usize {
        self.input_h * self.input_w
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        for &(o, i, w) in &self.entries {
            out[o as usize] += w * input[i as usize];
        }
    }

    pub fn apply_transpose(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for &(o, i, w) in &self.entries {
            grad_in[i as usize] += w * grad_out[o as usize];
        }
    }

    /// Global average pooling over the whole map.
    pub fn global_average(h: usize, w: usize) -> Self {
        let inv = 1.0 / (h * w) as f64;
        let entries = (0..h * w).map(|i| (0, i as u32, inv)).collect();
        Self {
            input_h: h,
            input_w: w,
            outputs: 1,
            entries,
        }
    }

    /// RoIAlign of `region` (image pixels) on a map with the given `stride`,
    /// pooled to a `grid x grid` output with `samples x samples` bilinear taps
    /// per bin. When `exclude` is set, taps falling inside it are dropped and
    /// each bin averages the remaining taps (a bin with none left pools to 0).
    pub fn roi_align(
        map_h: usize,
        map_w: usize,
        stride: f64,
        region: &FaceBox,
        grid: usize,
        samples: usize,
        exclude: Option<&FaceBox>,
    ) -> Result<Self> {
        let (x0, y0) = (region.x / stride, region.y / stride);
        let (rw, rh) = (region.w / stride, region.h / stride);
        if !(rw > 0.0 && rh > 0.0) {
            return Err(Error::DegenerateBox { w: rw, h: rh });
        }
        let mut entries = Vec::new();
        let (bw, bh) = (rw / grid as f64, rh / grid as f64);
        for gy in 0..grid {
            for gx in 0..grid {
                let out = (gy * grid + gx) as u32;
                let mut taps: Vec<(usize, f64)> = Vec::new();
                let mut n_taps = 0usize;
                for sy in 0..samples {
                    for sx in 0..samples {
                        let u = x0 + bw * (gx as f64 + (sx as f64 + 0.5) / samples as f64);
                        let v = y0 + bh * (gy as f64 + (sy as f64 + 0.5) / samples as f64);
                        if let Some(ex) = exclude {
                            let (px, py) = (u * stride, v * stride);
                            if px >= ex.x && px < ex.x + ex.w && py >= ex.y && py < ex.y + ex.h {
                                continue;
                            }
                        }
                        n_taps += 1;
                        bilinear_taps(map_h, map_w, u, v, &mut taps);
                    }
                }
                if n_taps == 0 {
                    continue;
                }
                let inv = 1.0 / n_taps as f64;
                for (i, w) in merge(taps) {
                    entries.push((out, i as u32, w * inv));
                }
            }
        }
        Ok(Self {
            input_h: map_h,
            input_w: map_w,
            outputs: grid * grid,
            entries,
        })
    }
}

/// Bilinear weights of the point `(u, v)` in map units, where cell `(i, j)`
/// has its center at `(j + 0.5, i + 0.5)`; coordinates clamp to the border.
fn bilinear_taps(h: usize, w: usize, u: f64, v: f64, taps: &mut Vec<(usize, f64)>) {
    let fx = math::clamp(u - 0.5, 0.0, (w - 1) as f64);
    let fy = math::clamp(v - 0.5, 0.0, (h - 1) as f64);
    let (ix, iy) = (math::floor(fx) as usize, math::floor(fy) as usize);
    let (ix1, iy1) = ((ix + 1).min(w - 1), (iy + 1).min(h - 1));
    let (ax, ay) = (fx - ix as f64, fy - iy as f64);
    for (yy, wy) in [(iy, 1.0 - ay), (iy1, ay)] {
        for (xx, wx) in [(ix, 1.0 - ax), (ix1, ax)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                taps.push((yy * w + xx, wgt));
            }
        }
    }
}

fn merge(mut taps: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    taps.sort_by_key(|t| t.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(taps.len());
    for (i, w) in taps {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += w,
            _ => out.push((i, w)),
        }
    }
    out
}

/// RoIAlign of every channel of a `[c, h, w]` map, flattened channel-major.
pub fn pool_region(
    map: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    sampler: &Sampler,
) -> Vec<f64> {
    let n = sampler.outputs();
    let mut out = alloc::vec![0.0; channels * n];
    for c in 0..channels {
        sampler.apply(
            &map[c * h * w..(c + 1) * h * w],
            &mut out[c * n..(c + 1) * n],
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Independent bilinear sampler: evaluates the map as a continuous
    /// function point by point.
    fn sample_point(map: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
        let x = (u - 0.5).max(0.0).min((w - 1) as f64);
        let y = (v - 0.5).max(0.0).min((h - 1) as f64);
        let (x0, y0) = (x.floor(), y.floor());
        let (x1, y1) = (
            (x0 + 1.0).min((w - 1) as f64),
            (y0 + 1.0).min((h - 1) as f64),
        );
        let at = |yy: f64, xx: f64| map[yy as usize * w + xx as usize];
        let (tx, ty) = (x - x0, y - y0);
        at(y0, x0) * (1.0 - tx) * (1.0 - ty)
            + at(y0, x1) * tx * (1.0 - ty)
            + at(y1, x0) * (1.0 - tx) * ty
            + at(y1, x1) * tx * ty
    }

    fn test_map(h: usize, w: usize) -> Vec<f64> {
        (0..h * w)
            .map(|i| ((i as f64) * 0.37).sin() + (i / w) as f64 * 0.1)
            .collect()
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let map = vec![2.5; 6 * 8];
        let b = FaceBox::new(3.3, 5.1, 14.2, 9.7);
        let s = Sampler::roi_align(6, 8, 4.0, &b, 3, 2, None).unwrap();
        let out = pool_region(&map, 1, 6, 8, &s);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn integer_aligned_box_matches_bruteforce_sampler() {
        let (h, w) = (7, 9);
        let map = test_map(h, w);
        // box covering map cells [2, 6) x [1, 4) at stride 2
        let b = FaceBox::new(4.0, 2.0, 8.0, 6.0);
        let (grid, samples) = (2, 2);
        let s = Sampler::roi_align(h, w, 2.0, &b, grid, samples, None).unwrap();
        let out = pool_region(&map, 1, h, w, &s);
        for gy in 0..grid {
            for gx in 0..grid {
                let mut acc = 0.0;
                for sy in 0..samples {
                    for sx in 0..samples {
                        let u = 2.0 + 2.0 * (gx as f64 + (sx as f64 + 0.5) / 2.0);
                        let v = 1.0 + 1.5 * (gy as f64 + (sy as f64 + 0.5) / 2.0);
                        acc += sample_point(&map, h, w, u, v);
                    }
                }
                let expect = acc / 4.0;
                assert!((out[gy * grid + gx] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_sample_per_cell_on_aligned_box_is_direct_crop() {
        // grid bins of exactly one cell, a single tap at each cell center
        let (h, w) = (6, 6);
        let map = test_map(h, w);
        let b = FaceBox::new(4.0, 4.0, 12.0, 12.0);
        let s = Sampler::roi_align(h, w, 4.0, &b, 3, 1, None).unwrap();
        let out = pool_region(&map, 1, h, w, &s);
        for gy in 0..3 {
            for gx in 0..3 {
                assert!((out[gy * 3 + gx] - map[(1 + gy) * w + 1 + gx]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_by_one_stride_on_translated_map_is_identical() {
        let (h, w) = (8, 10);
        let map = test_map(h, w);
        let mut shifted = vec![0.0; h * w];
        for i in 0..h {
            for j in 1..w {
                shifted[i * w + j] = map[i * w + j - 1];
            }
        }
        let b = FaceBox::new(9.0, 6.5, 13.0, 11.0);
        let b2 = FaceBox::new(9.0 + 4.0, 6.5, 13.0, 11.0);
        let s1 = Sampler::roi_align(h, w, 4.0, &b, 3, 2, None).unwrap();
        let s2 = Sampler::roi_align(h, w, 4.0, &b2, 3, 2, None).unwrap();
        let o1 = pool_region(&map, 1, h, w, &s1);
        let o2 = pool_region(&shifted, 1, h, w, &s2);
        for (a, b) in o1.iter().zip(&o2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_area_box_is_rejected() {
        let b = FaceBox {
            x: 1.0,
            y: 1.0,
            w: 0.0,
            h: 3.0,
        };
        assert!(Sampler::roi_align(4, 4, 1.0, &b, 2, 1, None).is_err());
    }

    #[test]
    fn excluded_region_drops_taps() {
        let outer = FaceBox::new(0.0, 0.0, 8.0, 8.0);
        let inner = FaceBox::new(2.0, 2.0, 4.0, 4.0);
        let s = Sampler::roi_align(8, 8, 1.0, &outer, 2, 4, Some(&inner)).unwrap();
        for &(_, i, _) in &s.entries {
            let (y, x) = (i as usize / 8, i as usize % 8);
            assert!(
                !(3..5).contains(&x) || !(3..5).contains(&y),
                "tap at center cell ({y},{x})"
            );
        }
        // each bin's weights still sum to one
        let mut sums = [0.0; 4];
        for &(o, _, w) in &s.entries {
            sums[o as usize] += w;
        }
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn transpose_is_adjoint() {
        let b = FaceBox::new(1.3, 2.2, 9.1, 7.4);
        let s = Sampler::roi_align(5, 6, 2.0, &b, 3, 2, None).unwrap();
        let x = test_map(5, 6);
        let y: Vec<f64> = (0..9).map(|i| (i as f64 * 1.7).cos()).collect();
        let mut sx = vec![0.0; 9];
        s.apply(&x, &mut sx);
        let mut sty = vec![0.0; 30];
        s.apply_transpose(&y, &mut sty);
        let lhs: f64 = sx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&sty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
