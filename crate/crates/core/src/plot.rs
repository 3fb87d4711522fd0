//! Minimal raster drawing for scatter plots and heatmap panels. Output carries
//! no timestamps or text, so identical inputs give identical PNG bytes.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::Result;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const POINT: Rgb<u8> = Rgb([31, 119, 180]);

pub(crate) struct Canvas {
    img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Self { img: RgbImage::from_pixel(width, height, BACKGROUND) }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    pub fn rect_outline(&mut self, x0: i64, y0: i64, x1: i64, y1: i64) {
        for x in x0..=x1 {
            self.put(x, y0, AXIS);
            self.put(x, y1, AXIS);
        }
        for y in y0..=y1 {
            self.put(x0, y, AXIS);
            self.put(x1, y, AXIS);
        }
    }

    pub fn dot(&mut self, cx: i64, cy: i64, r: i64) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(cx + dx, cy + dy, POINT);
                }
            }
        }
    }

    /// Draws `values` (rows = image x, columns = image y from the bottom) into
    /// the box at (x0, y0) of size w × h, mapping [0, 1] through a colormap.
    pub fn heatmap(&mut self, values: ArrayView2<f64>, x0: u32, y0: u32, w: u32, h: u32) {
        let (rows, cols) = values.dim();
        if rows == 0 || cols == 0 {
            return;
        }
        for py in 0..h {
            let c = ((h - 1 - py) as usize * cols) / h as usize;
            for px in 0..w {
                let r = (px as usize * rows) / w as usize;
                self.put((x0 + px) as i64, (y0 + py) as i64, colormap(values[[r, c]]));
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Piecewise-linear dark-blue → teal → yellow map on [0, 1].
fn colormap(v: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 3] = [[68.0, 1.0, 84.0], [33.0, 145.0, 140.0], [253.0, 231.0, 37.0]];
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let t = v * 2.0;
    let i = (t.floor() as usize).min(1);
    let f = t - i as f64;
    let mix = |k: usize| (STOPS[i][k] + (STOPS[i + 1][k] - STOPS[i][k]) * f).round() as u8;
    Rgb([mix(0), mix(1), mix(2)])
}

/// Scatter plot of (x, y) pairs with a framed axis box.
pub(crate) fn scatter_png(points: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    const W: i64 = 480;
    const H: i64 = 360;
    const MARGIN: i64 = 30;
    let mut canvas = Canvas::new(W as u32, H as u32);
    canvas.rect_outline(MARGIN, MARGIN, W - MARGIN, H - MARGIN);
    let span = |sel: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(sel).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(sel).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) }
    };
    let (xlo, xhi) = span(|p| p.0);
    let (ylo, yhi) = span(|p| p.1);
    let inner_w = (W - 2 * MARGIN - 10) as f64;
    let inner_h = (H - 2 * MARGIN - 10) as f64;
    for &(x, y) in points {
        let px = MARGIN + 5 + ((x - xlo) / (xhi - xlo) * inner_w).round() as i64;
        let py = H - MARGIN - 5 - ((y - ylo) / (yhi - ylo) * inner_h).round() as i64;
        canvas.dot(px, py, 2);
    }
    canvas.save(path)
}
