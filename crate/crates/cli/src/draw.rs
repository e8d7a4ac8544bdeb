//! Overlay and loss-curve rasters.
//!
//! No font is bundled, so plots carry no text; every plot is written next
//! to a CSV with the plotted numbers.

use image::{Rgb, RgbImage};
use imageproc::drawing::draw_line_segment_mut;
use matres_core::geometry::Transform;
use matres_core::Image;

pub const GT_COLOR: Rgb<u8> = Rgb([0, 200, 0]);
pub const EST_COLOR: Rgb<u8> = Rgb([220, 0, 0]);
/// Overlay magnification; 64 px frames are too small to read otherwise.
pub const OVERLAY_SCALE: u32 = 4;

fn to_rgb(img: &Image, scale: u32) -> RgbImage {
    let (c, h, w) = img.dims();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let (x, y) = ((x / scale) as usize, (y / scale) as usize);
        let px = |ch: usize| q(img.get(ch.min(c - 1), y, x));
        Rgb([px(0), px(1), px(2)])
    })
}

/// Image of the source frame's corners under `t`, in overlay pixels.
/// `None` when a corner maps to infinity.
pub fn quad(t: &Transform, frame: (usize, usize), scale: u32) -> Option<[(f32, f32); 4]> {
    let (h, w) = (frame.0 as f64 - 1.0, frame.1 as f64 - 1.0);
    let s = scale as f64;
    let mut out = [(0.0, 0.0); 4];
    for (o, (x, y)) in out.iter_mut().zip([(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]) {
        let (u, v) = t.apply(x, y)?;
        // Pixel centres sit at (p + 0.5) * scale in the magnified raster.
        *o = (((u + 0.5) * s) as f32, ((v + 0.5) * s) as f32);
    }
    Some(out)
}

fn draw_quad(canvas: &mut RgbImage, q: &[(f32, f32); 4], color: Rgb<u8>) {
    for i in 0..4 {
        let (a, b) = (q[i], q[(i + 1) % 4]);
        for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)] {
            draw_line_segment_mut(canvas, (a.0 + dx, a.1 + dy), (b.0 + dx, b.1 + dy), color);
        }
    }
}

/// The reference image with the ground-truth quadrilateral in green and
/// the estimated one in red.
pub fn overlay(reference: &Image, frame: (usize, usize), gt: &Transform, est: &Transform) -> RgbImage {
    let mut canvas = to_rgb(reference, OVERLAY_SCALE);
    for (t, color) in [(gt, GT_COLOR), (est, EST_COLOR)] {
        if let Some(q) = quad(t, frame, OVERLAY_SCALE) {
            draw_quad(&mut canvas, &q, color);
        }
    }
    canvas
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// One polyline per series on shared axes. The x axis spans iterations
/// 1..=longest series; the y axis spans the pooled value range.
pub fn line_plot(series: &[Vec<f64>], width: u32, height: u32) -> RgbImage {
    let mut canvas = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 20.0;
    let (x0, y0, x1, y1) = (margin, margin, width as f32 - margin, height as f32 - margin);
    let axis = Rgb([0, 0, 0]);
    draw_line_segment_mut(&mut canvas, (x0, y1), (x1, y1), axis);
    draw_line_segment_mut(&mut canvas, (x0, y0), (x0, y1), axis);
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let longest = series.iter().map(Vec::len).max().unwrap_or(0);
    if longest < 2 || !lo.is_finite() {
        return canvas;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |i: usize, v: f64| {
        let x = x0 + (x1 - x0) * i as f32 / (longest - 1) as f32;
        let y = y1 - (y1 - y0) * ((v - lo) / span) as f32;
        (x, y)
    };
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        for i in 1..s.len() {
            if s[i - 1].is_finite() && s[i].is_finite() {
                draw_line_segment_mut(&mut canvas, px(i - 1, s[i - 1]), px(i, s[i]), color);
            }
        }
    }
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quads_are_drawn_in_distinct_colors() {
        let img = Image::zeros(3, 16, 16);
        let gt = Transform::identity();
        let est = Transform::from_array([1.0, 0.0, 3.0, 0.0, 1.0, 2.0, 0.0, 0.0, 1.0]).unwrap();
        let out = overlay(&img, (16, 16), &gt, &est);
        assert_eq!(out.dimensions(), (64, 64));
        // Top-left corner of each quad.
        assert_eq!(*out.get_pixel(2, 2), GT_COLOR);
        assert_eq!(*out.get_pixel(14, 10), EST_COLOR);
        assert!(out.pixels().filter(|p| **p == GT_COLOR).count() > 100);
    }

    #[test]
    fn gray_images_fill_all_channels() {
        let img = Image::from_fn(1, 2, 2, |_, _, _| 1.0);
        assert_eq!(*to_rgb(&img, 1).get_pixel(1, 1), Rgb([255, 255, 255]));
    }

    #[test]
    fn decreasing_series_ends_low() {
        let out = line_plot(&[vec![1.0, 0.5, 0.0]], 100, 60);
        let color = Rgb(PALETTE[0]);
        assert_eq!(*out.get_pixel(20, 20), color);
        assert_eq!(*out.get_pixel(80, 40), color);
    }
}
