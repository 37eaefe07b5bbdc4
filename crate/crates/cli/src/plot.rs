//! Minimal raster plots: scatter, grouped bars and heatmap overlays. There is
//! no text rendering; the numbers behind every plot are written to CSV next
//! to it.

use image::{Rgb, RgbImage};

use causal_probe::tensor::{ImageTensor, ScalarField};

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

const MARGIN: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Dot,
    Cross,
    Square,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub color: [u8; 3],
    pub marker: Marker,
    pub points: Vec<(f64, f64)>,
}

fn blank(w: u32, h: u32) -> RgbImage {
    RgbImage::from_pixel(w, h, Rgb([255, 255, 255]))
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn frame(img: &mut RgbImage) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let m = MARGIN as i64;
    for x in m..=w - m {
        put(img, x, h - m, [0, 0, 0]);
        put(img, x, m, [200, 200, 200]);
    }
    for y in m..=h - m {
        put(img, m, y, [0, 0, 0]);
        put(img, w - m, y, [200, 200, 200]);
    }
    // five ticks per axis
    for i in 0..=4 {
        let x = m + (w - 2 * m) * i / 4;
        let y = m + (h - 2 * m) * i / 4;
        for d in 1..5 {
            put(img, x, h - m + d, [0, 0, 0]);
            put(img, m - d, y, [0, 0, 0]);
        }
    }
}

fn draw_marker(img: &mut RgbImage, x: i64, y: i64, marker: Marker, c: [u8; 3]) {
    match marker {
        Marker::Dot => {
            for dy in -2..=2i64 {
                for dx in -2..=2i64 {
                    if dx * dx + dy * dy <= 5 {
                        put(img, x + dx, y + dy, c);
                    }
                }
            }
        }
        Marker::Cross => {
            for d in -4..=4 {
                put(img, x + d, y + d, c);
                put(img, x + d, y - d, c);
            }
        }
        Marker::Square => {
            for dy in -4..=4i64 {
                for dx in -4..=4i64 {
                    if dx.abs() == 4 || dy.abs() == 4 {
                        put(img, x + dx, y + dy, c);
                    }
                }
            }
        }
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Scatter plot. With `invert_x` the x axis grows to the left.
pub fn scatter(series: &[Series], invert_x: bool, size: (u32, u32)) -> RgbImage {
    let mut img = blank(size.0, size.1);
    frame(&mut img);
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (pw, ph) = ((size.0 - 2 * MARGIN) as f64, (size.1 - 2 * MARGIN) as f64);
    for s in series {
        for &(x, y) in &s.points {
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            let mut u = (x - x0) / (x1 - x0);
            if invert_x {
                u = 1.0 - u;
            }
            let v = (y - y0) / (y1 - y0);
            let px = MARGIN as f64 + u * pw;
            let py = MARGIN as f64 + (1.0 - v) * ph;
            draw_marker(&mut img, px.round() as i64, py.round() as i64, s.marker, s.color);
        }
    }
    img
}

/// Grouped bar chart over `[-1, 1]` with a zero line. `values[g][s]` is the
/// bar for series `s` in group `g`; `None` leaves a gap.
pub fn grouped_bars(values: &[Vec<Option<f64>>], size: (u32, u32)) -> RgbImage {
    let mut img = blank(size.0, size.1);
    frame(&mut img);
    let (w, h) = (size.0 as i64, size.1 as i64);
    let m = MARGIN as i64;
    let zero = m + (h - 2 * m) / 2;
    for x in m..=w - m {
        put(&mut img, x, zero, [120, 120, 120]);
    }
    let groups = values.len().max(1) as i64;
    let group_w = (w - 2 * m) / groups;
    for (g, bars) in values.iter().enumerate() {
        let n = bars.len().max(1) as i64;
        let bar_w = ((group_w - 8) / n).max(1);
        for (s, v) in bars.iter().enumerate() {
            let Some(v) = v.filter(|v| v.is_finite()) else { continue };
            let top = zero - (v.clamp(-1.0, 1.0) * ((h - 2 * m) / 2) as f64).round() as i64;
            let (a, b) = (top.min(zero), top.max(zero));
            let x_start = m + g as i64 * group_w + 4 + s as i64 * bar_w;
            let c = PALETTE[s % PALETTE.len()];
            for x in x_start..x_start + bar_w - 1 {
                for y in a..=b {
                    put(&mut img, x, y, c);
                }
            }
        }
    }
    img
}

/// Piecewise-linear blue, cyan, yellow, red ramp on `[0, 1]`.
pub fn colormap(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 1.0, 0.0], [0.9, 0.0, 0.0]];
    let s = v * 3.0;
    let i = (s.floor() as usize).min(2);
    let f = s - i as f32;
    let (a, b) = (stops[i], stops[i + 1]);
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * f)
}

/// Blend a max-normalised heatmap over an RGB frame.
pub fn overlay(frame: &ImageTensor, map: &ScalarField, alpha: f32) -> RgbImage {
    let (w, h) = frame.dims();
    let rgb = frame.to_rgb();
    let px = rgb.unit_samples();
    let max = map.data().iter().fold(0.0f32, |a, &v| a.max(v));
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = if max > 0.0 { map.data()[i].max(0.0) / max } else { 0.0 };
            let c = colormap(v);
            let out = [0, 1, 2].map(|k| {
                let blended = (1.0 - alpha) * px[3 * i + k] + alpha * c[k];
                causal_probe::tensor::unit_to_u8(blended)
            });
            img.put_pixel(x as u32, y as u32, Rgb(out));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_marks_the_points() {
        let s = Series {
            color: [255, 0, 0],
            marker: Marker::Dot,
            points: vec![(0.0, 0.0), (1.0, 1.0)],
        };
        let img = scatter(&[s], false, (200, 150));
        let red = img.pixels().filter(|p| p.0 == [255, 0, 0]).count();
        assert!(red >= 2 * 13);
    }

    #[test]
    fn bars_and_colormap() {
        let img = grouped_bars(&[vec![Some(0.5), None], vec![Some(-0.5), Some(1.0)]], (200, 150));
        assert!(img.pixels().any(|p| p.0 == PALETTE[1]));
        assert_eq!(colormap(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(colormap(1.0), [0.9, 0.0, 0.0]);
    }

    #[test]
    fn overlay_of_zero_map_is_tinted_frame() {
        let frame = ImageTensor::filled(4, 4, 3, 1.0).unwrap();
        let img = overlay(&frame, &ScalarField::zeros(4, 4).unwrap(), 0.5);
        assert_eq!(img.get_pixel(0, 0).0, [128, 128, 191]);
    }
}
