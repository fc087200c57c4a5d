use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::model::FaceBox;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSize {
    pub width: usize,
    pub height: usize,
}

impl CropSize {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }
}

/// Crop geometry and output sizes for the per-face modules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropPolicy {
    pub face_size: CropSize,
    pub eye_size: CropSize,
    pub body_size: CropSize,
    /// Eye band height as a fraction of the face box, from its top.
    pub eye_height_frac: f64,
    /// Widening of the eye band on each side, as a fraction of box width.
    pub eye_lateral_expand: f64,
    pub body_width_factor: f64,
    pub body_height_factor: f64,
    /// Boxes narrower or shorter than this (after clamping) are unusable.
    pub min_box_side: f64,
}

impl Default for CropPolicy {
    fn default() -> Self {
        Self {
            face_size: CropSize::new(224, 224),
            eye_size: CropSize::new(224, 224),
            body_size: CropSize::new(224, 224),
            eye_height_frac: 0.4,
            eye_lateral_expand: 0.1,
            body_width_factor: 3.0,
            body_height_factor: 5.0,
            min_box_side: 4.0,
        }
    }
}

impl CropPolicy {
    /// Small crops for CPU-scale training.
    pub fn desk() -> Self {
        Self {
            face_size: CropSize::new(32, 32),
            eye_size: CropSize::new(32, 16),
            body_size: CropSize::new(24, 48),
            ..Self::default()
        }
    }
}

fn usable(frame: &Image, region: &FaceBox, policy: &CropPolicy) -> Result<FaceBox> {
    let clamped = region
        .clamp(frame.width(), frame.height())
        .ok_or(Error::DegenerateBox { w: 0.0, h: 0.0 })?;
    if clamped.w < policy.min_box_side || clamped.h < policy.min_box_side {
        return Err(Error::DegenerateBox {
            w: clamped.w,
            h: clamped.h,
        });
    }
    Ok(clamped)
}

pub fn crop_face(frame: &Image, face: &FaceBox, policy: &CropPolicy) -> Result<Image> {
    let region = usable(frame, face, policy)?;
    Ok(frame.resample_region(&region, policy.face_size.width, policy.face_size.height))
}

/// Upper band of the face box, widened laterally.
pub fn crop_eyes(frame: &Image, face: &FaceBox, policy: &CropPolicy) -> Result<Image> {
    usable(frame, face, policy)?;
    let pad = face.w * policy.eye_lateral_expand;
    let band = FaceBox::new(
        face.x - pad,
        face.y,
        face.w + 2.0 * pad,
        face.h * policy.eye_height_frac,
    );
    let region = band
        .clamp(frame.width(), frame.height())
        .ok_or(Error::DegenerateBox {
            w: band.w,
            h: band.h,
        })?;
    Ok(frame.resample_region(&region, policy.eye_size.width, policy.eye_size.height))
}

/// A body crop and where the face sits inside it (crop pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct BodyCrop {
    pub image: Image,
    pub face_box: FaceBox,
}

/// The face box widened about its center and extended downward, clamped to
/// the frame.
pub fn crop_body(frame: &Image, face: &FaceBox, policy: &CropPolicy) -> Result<BodyCrop> {
    let face = usable(frame, face, policy)?;
    let (cx, _) = face.center();
    let w = face.w * policy.body_width_factor;
    let region = FaceBox::new(cx - w / 2.0, face.y, w, face.h * policy.body_height_factor)
        .clamp(frame.width(), frame.height())
        .ok_or(Error::DegenerateBox { w, h: face.h })?;
    let (ow, oh) = (policy.body_size.width, policy.body_size.height);
    let image = frame.resample_region(&region, ow, oh);
    let (sx, sy) = (ow as f64 / region.w, oh as f64 / region.h);
    let face_box = FaceBox::new(
        (face.x - region.x) * sx,
        (face.y - region.y) * sy,
        face.w * sx,
        face.h * sy,
    );
    Ok(BodyCrop { image, face_box })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frame(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(
                    x,
                    y,
                    [
                        x as f32 / w as f32,
                        y as f32 / h as f32,
                        ((x * y) % 7) as f32 / 7.0,
                    ],
                );
            }
        }
        img
    }

    fn policy() -> CropPolicy {
        CropPolicy {
            face_size: CropSize::new(16, 16),
            eye_size: CropSize::new(16, 8),
            body_size: CropSize::new(12, 20),
            ..CropPolicy::default()
        }
    }

    #[test]
    fn crops_are_deterministic() {
        let f = gradient_frame(64, 48);
        let b = FaceBox::new(20.3, 7.7, 12.0, 14.5);
        let p = policy();
        assert_eq!(
            crop_face(&f, &b, &p).unwrap(),
            crop_face(&f, &b, &p).unwrap()
        );
        assert_eq!(
            crop_eyes(&f, &b, &p).unwrap(),
            crop_eyes(&f, &b, &p).unwrap()
        );
        assert_eq!(
            crop_body(&f, &b, &p).unwrap(),
            crop_body(&f, &b, &p).unwrap()
        );
    }

    #[test]
    fn corner_box_is_clamped_with_unchanged_output_size() {
        let f = gradient_frame(64, 48);
        let b = FaceBox::new(-6.0, -4.0, 14.0, 14.0);
        let p = policy();
        let face = crop_face(&f, &b, &p).unwrap();
        assert_eq!((face.width(), face.height()), (16, 16));
        let body = crop_body(&f, &FaceBox::new(55.0, 40.0, 12.0, 12.0), &p).unwrap();
        assert_eq!((body.image.width(), body.image.height()), (12, 20));
    }

    #[test]
    fn full_frame_box_body_crop_equals_resized_frame() {
        let f = gradient_frame(40, 30);
        let b = FaceBox::new(0.0, 0.0, 40.0, 30.0);
        let p = policy();
        let body = crop_body(&f, &b, &p).unwrap();
        assert_eq!(body.image, f.resize(12, 20));
        assert_eq!(body.face_box, FaceBox::new(0.0, 0.0, 12.0, 20.0));
    }

    #[test]
    fn degenerate_box_is_an_error() {
        let f = gradient_frame(64, 48);
        let p = policy();
        assert!(matches!(
            crop_face(&f, &FaceBox::new(5.0, 5.0, 3.0, 10.0), &p),
            Err(Error::DegenerateBox { .. })
        ));
        assert!(crop_eyes(&f, &FaceBox::new(62.0, 5.0, 10.0, 10.0), &p).is_err());
        assert!(crop_body(&f, &FaceBox::new(100.0, 5.0, 10.0, 10.0), &p).is_err());
    }

    #[test]
    fn eye_band_geometry() {
        // left half black, right half white; the eye band of a box centered on
        // the seam should be symmetric
        let mut f = Image::new(40, 40);
        for y in 0..40 {
            for x in 20..40 {
                f.set_pixel(x, y, [1.0; 3]);
            }
        }
        let p = policy();
        let eyes = crop_eyes(&f, &FaceBox::new(10.0, 10.0, 20.0, 20.0), &p).unwrap();
        let left = eyes.pixel(0, 4)[0];
        let right = eyes.pixel(15, 4)[0];
        assert!(left < 0.01 && right > 0.99);
    }
}
