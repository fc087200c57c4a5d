//! Anti-aliased shape filling on [`Image`]s with 4x4 supersampled coverage.

use crate::image::Image;
use crate::math;

const SUB: usize = 4;

fn blend(img: &mut Image, x: usize, y: usize, rgb: [f32; 3], alpha: f32) {
    if alpha <= 0.0 {
        return;
    }
    let p = img.pixel(x, y);
    let a = alpha.min(1.0);
    img.set_pixel(
        x,
        y,
        [
            p[0] + (rgb[0] - p[0]) * a,
            p[1] + (rgb[1] - p[1]) * a,
            p[2] + (rgb[2] - p[2]) * a,
        ],
    );
}

/// Calls `inside(u, v)` on a 4x4 grid per pixel of the bounding box and
/// blends `rgb` by the covered fraction.
fn fill_by<F: Fn(f64, f64) -> bool>(
    img: &mut Image,
    bbox: (f64, f64, f64, f64),
    rgb: [f32; 3],
    inside: F,
) {
    let (x0, y0, x1, y1) = bbox;
    let xs = math::floor(x0).max(0.0) as usize;
    let ys = math::floor(y0).max(0.0) as usize;
    let xe = (math::ceil(x1).max(0.0) as usize).min(img.width());
    let ye = (math::ceil(y1).max(0.0) as usize).min(img.height());
    for y in ys..ye {
        for x in xs..xe {
            let mut hits = 0;
            for sy in 0..SUB {
                let v = y as f64 + (sy as f64 + 0.5) / SUB as f64;
                for sx in 0..SUB {
                    let u = x as f64 + (sx as f64 + 0.5) / SUB as f64;
                    hits += usize::from(inside(u, v));
                }
            }
            blend(img, x, y, rgb, hits as f32 / (SUB * SUB) as f32);
        }
    }
}

/// Axis-aligned ellipse, center `(cx, cy)`, semi-axes `(a, b)`.
pub fn ellipse(img: &mut Image, cx: f64, cy: f64, a: f64, b: f64, rgb: [f32; 3]) {
    ellipse_clipped(img, cx, cy, a, b, f64::NEG_INFINITY, f64::INFINITY, rgb);
}

/// Ellipse restricted to rows `y_min <= v < y_max`.
#[allow(clippy::too_many_arguments)]
pub fn ellipse_clipped(
    img: &mut Image,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    y_min: f64,
    y_max: f64,
    rgb: [f32; 3],
) {
    if a <= 0.0 || b <= 0.0 {
        return;
    }
    let bbox = (cx - a, (cy - b).max(y_min), cx + a, (cy + b).min(y_max));
    fill_by(img, bbox, rgb, |u, v| {
        let (dx, dy) = ((u - cx) / a, (v - cy) / b);
        v >= y_min && v < y_max && dx * dx + dy * dy <= 1.0
    });
}

/// Ellipse `e` drawn only where it overlaps ellipse `mask`, both given as
/// `(cx, cy, a, b)`.
pub fn ellipse_masked(
    img: &mut Image,
    e: (f64, f64, f64, f64),
    mask: (f64, f64, f64, f64),
    rgb: [f32; 3],
) {
    let (cx, cy, a, b) = e;
    let (mx, my, ma, mb) = mask;
    if a <= 0.0 || b <= 0.0 || ma <= 0.0 || mb <= 0.0 {
        return;
    }
    fill_by(img, (cx - a, cy - b, cx + a, cy + b), rgb, |u, v| {
        let (dx, dy) = ((u - cx) / a, (v - cy) / b);
        let (ex, ey) = ((u - mx) / ma, (v - my) / mb);
        dx * dx + dy * dy <= 1.0 && ex * ex + ey * ey <= 1.0
    });
}

pub fn rect(img: &mut Image, x: f64, y: f64, w: f64, h: f64, rgb: [f32; 3]) {
    fill_by(img, (x, y, x + w, y + h), rgb, |u, v| {
        u >= x && u < x + w && v >= y && v < y + h
    });
}

/// Convex polygon given in either winding order.
pub fn polygon(img: &mut Image, pts: &[(f64, f64)], rgb: [f32; 3]) {
    if pts.len() < 3 {
        return;
    }
    let mut bbox = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        bbox = (bbox.0.min(x), bbox.1.min(y), bbox.2.max(x), bbox.3.max(y));
    }
    fill_by(img, bbox, rgb, |u, v| {
        let mut pos = false;
        let mut neg = false;
        for k in 0..pts.len() {
            let (ax, ay) = pts[k];
            let (bx, by) = pts[(k + 1) % pts.len()];
            let c = (bx - ax) * (v - ay) - (by - ay) * (u - ax);
            pos |= c > 0.0;
            neg |= c < 0.0;
        }
        !(pos && neg)
    });
}

/// Thick segment as a quadrilateral.
pub fn line(img: &mut Image, a: (f64, f64), b: (f64, f64), width: f64, rgb: [f32; 3]) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = math::sqrt(dx * dx + dy * dy);
    if len == 0.0 {
        return;
    }
    let (nx, ny) = (-dy / len * width / 2.0, dx / len * width / 2.0);
    polygon(
        img,
        &[
            (a.0 + nx, a.1 + ny),
            (b.0 + nx, b.1 + ny),
            (b.0 - nx, b.1 - ny),
            (a.0 - nx, a.1 - ny),
        ],
        rgb,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filled_rect_covers_exact_pixels() {
        let mut img = Image::new(8, 8);
        rect(&mut img, 2.0, 3.0, 3.0, 2.0, [1.0, 0.0, 0.0]);
        for y in 0..8 {
            for x in 0..8 {
                let inside = (2..5).contains(&x) && (3..5).contains(&y);
                assert_eq!(img.pixel(x, y)[0], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn ellipse_area_is_close_to_pi_ab() {
        let mut img = Image::new(40, 40);
        ellipse(&mut img, 20.0, 20.0, 12.0, 7.0, [1.0, 1.0, 1.0]);
        let area: f32 = img.data().chunks_exact(3).map(|p| p[0]).sum();
        let expected = core::f64::consts::PI * 12.0 * 7.0;
        assert!((area as f64 - expected).abs() / expected < 0.02);
    }

    #[test]
    fn polygon_winding_does_not_matter() {
        let tri = [(1.0, 1.0), (9.0, 1.0), (5.0, 8.0)];
        let mut a = Image::new(10, 10);
        let mut b = Image::new(10, 10);
        polygon(&mut a, &tri, [0.0, 1.0, 0.0]);
        let rev = [tri[2], tri[1], tri[0]];
        polygon(&mut b, &rev, [0.0, 1.0, 0.0]);
        assert_eq!(a, b);
    }
}
