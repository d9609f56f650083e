//! Bare PNG line charts: a frame and one coloured polyline per series.
//! No labels; the CSV next to each chart carries the numbers.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Axes {
    pub log_x: bool,
    pub log_y: bool,
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Renders `series` (points in data space) into a `w × h` image.
pub fn render(series: &[Vec<(f64, f64)>], axes: Axes, w: u32, h: u32) -> Result<RgbImage> {
    let tx = |v: f64, log: bool| if log { v.max(f64::MIN_POSITIVE).log10() } else { v };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| s.iter().map(|&(x, y)| (tx(x, axes.log_x), tx(y, axes.log_y))).filter(|p| p.0.is_finite() && p.1.is_finite()).collect())
        .collect();
    let all: Vec<&(f64, f64)> = pts.iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::Config("nothing to plot".into()));
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &&(x, y) in &all {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let (sx, sy) = (span(xmin, xmax), span(ymin, ymax));
    let m = 20.0;
    let (pw, ph) = (w as f64 - 2.0 * m, h as f64 - 2.0 * m);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let grey = Rgb([120, 120, 120]);
    let (l, r, t, b) = (m, m + pw, m, m + ph);
    for (p, q) in [((l, t), (r, t)), ((r, t), (r, b)), ((r, b), (l, b)), ((l, b), (l, t))] {
        draw_line(&mut img, p, q, grey);
    }
    for (i, s) in pts.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        let px: Vec<(f64, f64)> = s.iter().map(|&(x, y)| (m + (x - xmin) / sx * pw, m + ph - (y - ymin) / sy * ph)).collect();
        for seg in px.windows(2) {
            draw_line(&mut img, seg[0], seg[1], c);
        }
        if let [only] = px[..] {
            draw_line(&mut img, only, only, c);
        }
    }
    Ok(img)
}

pub fn save(path: &Path, series: &[Vec<(f64, f64)>], axes: Axes) -> Result<()> {
    render(series, axes, 640, 400)?.save(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}
