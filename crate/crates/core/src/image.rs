//! RGB raster images with values in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::model::FaceBox;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Interleaved RGB, row-major, `f32` channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::LengthMismatch {
                expected: width * height * 3,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::LengthMismatch {
                expected: width * height * 3,
                found: bytes.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    /// Rounds to 8-bit, clamping to `[0, 1]` first.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8)
            .collect()
    }

    /// The image as it would read back from an 8-bit file.
    pub fn quantized(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|&v| ((v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8) as f32 / 255.0)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// `i + 0.5`), clamped at the borders.
    pub fn sample(&self, u: f64, v: f64) -> [f32; 3] {
        let fx = math::clamp(u - 0.5, 0.0, (self.width - 1) as f64);
        let fy = math::clamp(v - 0.5, 0.0, (self.height - 1) as f64);
        let (x0, y0) = (math::floor(fx) as usize, math::floor(fy) as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
        let (p00, p01, p10, p11) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + (p01[c] - p00[c]) * ax;
            let bot = p10[c] + (p11[c] - p10[c]) * ax;
            out[c] = top + (bot - top) * ay;
        }
        out
    }

    /// Resamples `region` (pixels, assumed inside the image) to
    /// `out_w x out_h`. Each output pixel averages a grid of bilinear taps
    /// sized to its source footprint, so downscaling does not alias.
    pub fn resample_region(&self, region: &FaceBox, out_w: usize, out_h: usize) -> Image {
        let sx = region.w / out_w as f64;
        let sy = region.h / out_h as f64;
        let nx = (math::ceil(sx - 1e-9) as usize).max(1);
        let ny = (math::ceil(sy - 1e-9) as usize).max(1);
        let inv = 1.0 / (nx * ny) as f32;
        let mut out = Image::new(out_w, out_h);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = [0.0f32; 3];
                for j in 0..ny {
                    let v = region.y + sy * (oy as f64 + (j as f64 + 0.5) / ny as f64);
                    for i in 0..nx {
                        let u = region.x + sx * (ox as f64 + (i as f64 + 0.5) / nx as f64);
                        let p = self.sample(u, v);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                out.set_pixel(ox, oy, [acc[0] * inv, acc[1] * inv, acc[2] * inv]);
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        let full = FaceBox::new(0.0, 0.0, self.width as f64, self.height as f64);
        self.resample_region(&full, out_w, out_h)
    }

    pub fn mirrored(&self) -> Image {
        let mut out = Image::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Mean color over the pixels whose centers fall inside `region`.
    pub fn mean_color(&self, region: &FaceBox) -> [f64; 3] {
        let (x0, x1, y0, y1) = pixel_span(region, self.width, self.height);
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = self.pixel(x, y);
                for c in 0..3 {
                    acc[c] += p[c] as f64;
                }
                n += 1;
            }
        }
        acc.map(|v| v / n.max(1) as f64)
    }

    /// Channel-first `[3, h, w]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f64;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data)
    }

    /// Channel-first tensor with every channel standardized to zero mean and
    /// unit variance over the image.
    pub fn to_chw_standardized(&self) -> Tensor {
        let mut t = self.to_chw();
        let n = self.width * self.height;
        for chunk in t.data_mut().chunks_exact_mut(n) {
            let mean = chunk.iter().sum::<f64>() / n as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / math::sqrt(var + 1e-4);
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        t
    }
}

/// How a crop is turned into network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    /// `2x - 1`, keeping absolute color.
    Centered,
    /// Per-channel zero mean, unit variance over the image.
    Standardized,
}

impl InputNorm {
    pub fn apply(self, img: &Image) -> Tensor {
        match self {
            InputNorm::Centered => {
                let mut t = img.to_chw();
                t.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
                t
            }
            InputNorm::Standardized => img.to_chw_standardized(),
        }
    }
}

/// Integer pixel range `[x0, x1) x [y0, y1)` of pixels whose centers lie in
/// `region`, clipped to the image.
pub fn pixel_span(region: &FaceBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let lo = |v: f64, max: usize| math::ceil(v - 0.5).max(0.0).min(max as f64) as usize;
    (
        lo(region.x, width),
        lo(region.right(), width),
        lo(region.y, height),
        lo(region.bottom(), height),
    )
}
