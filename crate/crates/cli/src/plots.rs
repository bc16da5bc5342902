//! Diagnostic images: per-trial loss curves and affinity heatmaps, drawn
//! directly onto PNG buffers.

use std::path::Path;

use anyhow::{Context, Result};
use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;

use mlrdsc_core::selfexpress::LossBreakdown;

const WIDTH: u32 = 900;
const HEIGHT: u32 = 540;
const MARGIN: u32 = 40;

const SERIES: [(&str, Rgb<u8>); 5] = [
    ("total", Rgb([0, 0, 0])),
    ("recon", Rgb([30, 90, 200])),
    ("exp", Rgb([20, 140, 60])),
    ("lc", Rgb([220, 140, 20])),
    ("ld", Rgb([190, 40, 40])),
];

fn draw_line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: Rgb<u8>) {
    // Bresenham.
    let (mut x0, mut y0) = from;
    let (x1, y1) = to;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Log-scaled loss curves for the five objective terms; one pixel column
/// range per epoch, colored legend squares in the top-right corner.
pub fn loss_curve_png(history: &[LossBreakdown], path: &Path) -> Result<()> {
    anyhow::ensure!(!history.is_empty(), "no loss history to plot");
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));

    let values = |b: &LossBreakdown| [b.total, b.recon, b.exp, b.lc, b.ld];
    let floor = 1e-12f64;
    let logv = |v: f64| v.max(floor).log10();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for b in history {
        for v in values(b) {
            let l = logv(v);
            lo = lo.min(l);
            hi = hi.max(l);
        }
    }
    if !(hi > lo) {
        hi = lo + 1.0;
    }

    let plot_w = (WIDTH - 2 * MARGIN) as f64;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let x_at = |i: usize| {
        let frac = if history.len() > 1 {
            i as f64 / (history.len() - 1) as f64
        } else {
            0.0
        };
        (MARGIN as f64 + frac * plot_w) as i64
    };
    let y_at = |v: f64| {
        let frac = (logv(v) - lo) / (hi - lo);
        (HEIGHT as f64 - MARGIN as f64 - frac * plot_h) as i64
    };

    // Axes box.
    let frame = Rgb([120, 120, 120]);
    let (left, right) = (MARGIN as i64, (WIDTH - MARGIN) as i64);
    let (top, bottom) = (MARGIN as i64, (HEIGHT - MARGIN) as i64);
    draw_line(&mut img, (left, bottom), (right, bottom), frame);
    draw_line(&mut img, (left, top), (left, bottom), frame);
    // Decade tick marks on the y axis.
    let mut decade = lo.ceil() as i64;
    while (decade as f64) <= hi {
        let y = y_at(10f64.powi(decade as i32));
        draw_line(&mut img, (left - 4, y), (left, y), frame);
        decade += 1;
    }

    for (series_idx, (_, color)) in SERIES.iter().enumerate() {
        let mut prev: Option<(i64, i64)> = None;
        for (i, b) in history.iter().enumerate() {
            let v = values(b)[series_idx];
            let point = (x_at(i), y_at(v));
            if let Some(p) = prev {
                draw_line(&mut img, p, point, *color);
            }
            prev = Some(point);
        }
        // Legend swatch.
        let lx = (WIDTH - MARGIN - 90) as i64 + 18 * series_idx as i64;
        for dy in 0..8 {
            draw_line(&mut img, (lx, top - 20 + dy), (lx + 12, top - 20 + dy), *color);
        }
    }

    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Grayscale heatmap of a (typically affinity) matrix; brighter means a
/// stronger entry, normalized by the matrix maximum.
pub fn heatmap_png(matrix: &Array2<f64>, path: &Path) -> Result<()> {
    let (rows, cols) = matrix.dim();
    anyhow::ensure!(rows > 0 && cols > 0, "empty matrix");
    let max = matrix.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut img = GrayImage::new(cols as u32, rows as u32);
    for ((i, j), &v) in matrix.indexed_iter() {
        let shade = (v.abs() * scale).round().clamp(0.0, 255.0) as u8;
        img.put_pixel(j as u32, i as u32, Luma([shade]));
    }
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
