//! Minimal PNG charts: metric bars per ablation row and FAC-vs-severity
//! curves per perturbation kind. Text uses a built-in 3x5 pixel font.

use std::path::Path;

use anyhow::Result;
use hicom_core::image::Image;
use hicom_core::model::{AblationEntry, DegradationEntry};

use crate::io::write_png;

const WHITE: [f32; 3] = [1.0, 1.0, 1.0];
const INK: [f32; 3] = [0.15, 0.15, 0.15];
const GRID: [f32; 3] = [0.85, 0.85, 0.85];
const PALETTE: [[f32; 3]; 4] = [
    [0.26, 0.45, 0.70],
    [0.87, 0.52, 0.19],
    [0.33, 0.66, 0.41],
    [0.77, 0.31, 0.32],
];

fn glyph(c: char) -> Option<&'static str> {
    Some(match c.to_ascii_uppercase() {
        '0' => "111101101101111",
        '1' => "010110010010111",
        '2' => "111001111100111",
        '3' => "111001111001111",
        '4' => "101101111001001",
        '5' => "111100111001111",
        '6' => "111100111101111",
        '7' => "111001010010010",
        '8' => "111101111101111",
        '9' => "111101111001111",
        'A' => "010101111101101",
        'B' => "110101110101110",
        'C' => "011100100100011",
        'D' => "110101101101110",
        'E' => "111100110100111",
        'F' => "111100110100100",
        'G' => "011100101101011",
        'H' => "101101111101101",
        'I' => "111010010010111",
        'J' => "001001001101010",
        'K' => "101101110101101",
        'L' => "100100100100111",
        'M' => "101111111101101",
        'N' => "110101101101101",
        'O' => "010101101101010",
        'P' => "110101110100100",
        'Q' => "010101101110011",
        'R' => "110101110101101",
        'S' => "011100010001110",
        'T' => "111010010010010",
        'U' => "101101101101111",
        'V' => "101101101101010",
        'W' => "101101111111101",
        'X' => "101101010101101",
        'Y' => "101101010010010",
        'Z' => "111001010100111",
        '+' => "000010111010000",
        '-' => "000000111000000",
        '.' => "000000000000010",
        '_' => "000000000000111",
        ' ' => "000000000000000",
        _ => return None,
    })
}

struct Canvas {
    img: Image,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self {
            img: Image::filled(w, h, WHITE),
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [f32; 3]) {
        let (w, h) = (self.img.width() as i64, self.img.height() as i64);
        for y in y0.max(0)..y1.min(h) {
            for x in x0.max(0)..x1.min(w) {
                self.img.set_pixel(x as usize, y as usize, c);
            }
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [f32; 3]) {
        let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let (x, y) = (
                (x0 + t * (x1 - x0)).round() as i64,
                (y0 + t * (y1 - y0)).round() as i64,
            );
            self.rect(x - 1, y - 1, x + 1, y + 1, c);
        }
    }

    /// Draws `s` with its top-left corner at (x, y); returns the text width.
    fn text(&mut self, x: i64, y: i64, s: &str, scale: i64, c: [f32; 3]) -> i64 {
        let mut cx = x;
        for ch in s.chars() {
            if let Some(bits) = glyph(ch) {
                for (i, b) in bits.bytes().enumerate() {
                    if b == b'1' {
                        let (gx, gy) = ((i % 3) as i64, (i / 3) as i64);
                        self.rect(
                            cx + gx * scale,
                            y + gy * scale,
                            cx + (gx + 1) * scale,
                            y + (gy + 1) * scale,
                            c,
                        );
                    }
                }
            }
            cx += 4 * scale;
        }
        cx - x
    }

    fn text_width(s: &str, scale: i64) -> i64 {
        s.chars().count() as i64 * 4 * scale
    }
}

/// Plot area with a 0..1 y axis and gridlines every 0.2.
struct Axes {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

impl Axes {
    fn y(&self, v: f64) -> f64 {
        self.y1 as f64 - v.clamp(0.0, 1.0) * (self.y1 - self.y0) as f64
    }

    fn draw(&self, c: &mut Canvas) {
        for k in 0..=5 {
            let v = k as f64 / 5.0;
            let y = self.y(v).round() as i64;
            c.rect(self.x0, y, self.x1, y + 1, GRID);
            let label = format!("{v:.1}");
            c.text(
                self.x0 - Canvas::text_width(&label, 2) - 4,
                y - 5,
                &label,
                2,
                INK,
            );
        }
        c.rect(self.x0, self.y0, self.x0 + 1, self.y1 + 1, INK);
        c.rect(self.x0, self.y1, self.x1, self.y1 + 1, INK);
    }
}

pub fn ablation_bars(path: &Path, rows: &[AblationEntry]) -> Result<()> {
    const METRICS: [&str; 4] = ["FAC", "FAU", "FCAC", "FCAU"];
    let group_w = 130i64;
    let w = 80 + group_w * rows.len().max(1) as i64 + 20;
    let mut c = Canvas::new(w as usize, 320);
    let ax = Axes {
        x0: 70,
        y0: 40,
        x1: w - 20,
        y1: 260,
    };
    ax.draw(&mut c);
    let mut lx = ax.x0;
    for (k, name) in METRICS.iter().enumerate() {
        c.rect(lx, 12, lx + 12, 24, PALETTE[k]);
        lx += 16 + c.text(lx + 16, 13, name, 2, INK) + 12;
    }
    for (g, row) in rows.iter().enumerate() {
        let gx = ax.x0 + 10 + g as i64 * group_w;
        let vals = [Some(row.fac), row.fau, Some(row.fcac), row.fcau];
        for (k, v) in vals.iter().enumerate() {
            if let Some(v) = v {
                let bx = gx + k as i64 * 28;
                c.rect(bx, ax.y(*v).round() as i64, bx + 24, ax.y1, PALETTE[k]);
            }
        }
        let tw = Canvas::text_width(&row.label, 2);
        c.text(gx + (4 * 28 - tw) / 2, ax.y1 + 12, &row.label, 2, INK);
        let fcac = format!("{:.3}", row.fcac);
        c.text(
            gx + (4 * 28 - Canvas::text_width(&fcac, 2)) / 2,
            ax.y1 + 30,
            &fcac,
            2,
            INK,
        );
    }
    write_png(path, &c.img)
}

/// One panel per perturbation kind; lines per label with the clean value at
/// severity 0.
pub fn degradation_curves(path: &Path, rows: &[DegradationEntry]) -> Result<()> {
    let mut kinds: Vec<&str> = Vec::new();
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !kinds.contains(&r.perturbation.as_str()) {
            kinds.push(&r.perturbation);
        }
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let max_sev = rows.iter().map(|r| r.severity).max().unwrap_or(1).max(1) as f64;
    let (pw, ph, cols) = (300i64, 230i64, 3usize);
    let nrows = kinds.len().div_ceil(cols).max(1);
    let mut c = Canvas::new(
        (pw * cols as i64) as usize,
        (40 + ph * nrows as i64) as usize,
    );
    let mut lx = 60;
    for (k, l) in labels.iter().enumerate() {
        c.rect(lx, 12, lx + 12, 24, PALETTE[k % 4]);
        lx += 16 + c.text(lx + 16, 13, l, 2, INK) + 16;
    }
    for (p, kind) in kinds.iter().enumerate() {
        let (ox, oy) = ((p % cols) as i64 * pw, 40 + (p / cols) as i64 * ph);
        let ax = Axes {
            x0: ox + 60,
            y0: oy + 30,
            x1: ox + pw - 20,
            y1: oy + ph - 40,
        };
        ax.draw(&mut c);
        c.text(ax.x0, oy + 8, kind, 2, INK);
        let xof = |s: f64| ax.x0 as f64 + s / max_sev * (ax.x1 - ax.x0) as f64;
        for (k, l) in labels.iter().enumerate() {
            let mut pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.perturbation == *kind && r.label == *l)
                .map(|r| (r.severity as f64, r.fac))
                .collect();
            if let Some(r) = rows
                .iter()
                .find(|r| r.perturbation == *kind && r.label == *l)
            {
                pts.push((0.0, r.fac + r.fac_drop));
            }
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let pix: Vec<(f64, f64)> = pts.iter().map(|&(s, v)| (xof(s), ax.y(v))).collect();
            for seg in pix.windows(2) {
                c.line(seg[0], seg[1], PALETTE[k % 4]);
            }
        }
        for s in 0..=max_sev as u8 {
            let x = xof(s as f64).round() as i64;
            c.text(x - 2, ax.y1 + 8, &s.to_string(), 2, INK);
        }
    }
    write_png(path, &c.img)
}
