//! Minimal PNG line plots: one panel per metric, no text.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const PANEL_W: u32 = 260;
const PANEL_H: u32 = 200;
const MARGIN: u32 = 20;

pub struct Series<'a> {
    pub values: &'a [f64],
    pub color: [u8; 3],
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn panel(img: &mut RgbImage, left: u32, series: &[Series]) {
    let (x0, y0) = (left + MARGIN, MARGIN);
    let (w, h) = (PANEL_W - 2 * MARGIN, PANEL_H - 2 * MARGIN);
    let axis = Rgb([0, 0, 0]);
    line(img, (x0 as i64, y0 as i64), (x0 as i64, (y0 + h) as i64), axis);
    line(img, (x0 as i64, (y0 + h) as i64), ((x0 + w) as i64, (y0 + h) as i64), axis);

    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    for s in series {
        let n = s.values.len();
        let pts: Vec<Option<(i64, i64)>> = s
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                v.is_finite().then(|| {
                    let fx = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
                    let fy = (v - lo) / span;
                    ((x0 as f64 + fx * w as f64).round() as i64, ((y0 + h) as f64 - fy * h as f64).round() as i64)
                })
            })
            .collect();
        for pair in pts.windows(2) {
            if let (Some(a), Some(b)) = (pair[0], pair[1]) {
                line(img, a, b, Rgb(s.color));
            }
        }
    }
}

/// Writes panels side by side, each scaled to its own value range.
pub fn write_panels(path: &Path, panels: &[Vec<Series>]) -> Result<()> {
    let mut img = RgbImage::from_pixel(PANEL_W * panels.len().max(1) as u32, PANEL_H, Rgb([255, 255, 255]));
    for (i, p) in panels.iter().enumerate() {
        panel(&mut img, i as u32 * PANEL_W, p);
    }
    img.save_with_format(path, image::ImageFormat::Png).with_context(|| format!("writing {}", path.display()))
}
