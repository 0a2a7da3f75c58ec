//! Minimal static line charts for run reports. No text rendering: each
//! series gets a fixed colour from [`PALETTE`], and callers print the
//! legend alongside the image.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("blue", [31, 119, 180]),
    ("orange", [255, 127, 14]),
    ("green", [44, 160, 44]),
    ("red", [214, 39, 40]),
    ("purple", [148, 103, 189]),
    ("brown", [140, 86, 75]),
    ("pink", [227, 119, 194]),
    ("gray", [127, 127, 127]),
];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: u32 = 640;
const H: u32 = 400;
const PAD: f64 = 40.0;

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Render `series` into a PNG with light gridlines at the quarter marks of
/// each axis. Returns the `(name, colour)` legend.
pub fn line_chart(series: &[Series], path: &Path) -> Result<Vec<(String, &'static str)>> {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if x_lo > x_hi {
        (x_lo, x_hi, y_lo, y_hi) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_hi - x_lo < 1e-12 {
        x_hi = x_lo + 1.0;
    }
    if y_hi - y_lo < 1e-12 {
        y_hi = y_lo + 1.0;
    }
    let to_px = |(x, y): (f64, f64)| {
        (
            PAD + (x - x_lo) / (x_hi - x_lo) * (W as f64 - 2.0 * PAD),
            H as f64 - PAD - (y - y_lo) / (y_hi - y_lo) * (H as f64 - 2.0 * PAD),
        )
    };

    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let grid = Rgb([225, 225, 225]);
    for q in 0..=4 {
        let f = q as f64 / 4.0;
        let x = x_lo + f * (x_hi - x_lo);
        let y = y_lo + f * (y_hi - y_lo);
        draw_line(&mut img, to_px((x, y_lo)), to_px((x, y_hi)), grid);
        draw_line(&mut img, to_px((x_lo, y)), to_px((x_hi, y)), grid);
    }
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, to_px((x_lo, y_lo)), to_px((x_hi, y_lo)), axis);
    draw_line(&mut img, to_px((x_lo, y_lo)), to_px((x_lo, y_hi)), axis);

    let mut legend = Vec::new();
    for (s, (cname, rgb)) in series.iter().zip(PALETTE.iter().cycle()) {
        let color = Rgb(*rgb);
        for w in s.points.windows(2) {
            draw_line(&mut img, to_px(w[0]), to_px(w[1]), color);
        }
        if let [p] = s.points.as_slice() {
            draw_line(&mut img, to_px(*p), to_px(*p), color);
        }
        legend.push((s.name.clone(), *cname));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    Ok(legend)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let s = Series {
            name: "a".into(),
            points: vec![(1.0, 0.5), (2.0, 0.7), (3.0, 0.6)],
        };
        let legend = line_chart(&[s], &path).unwrap();
        assert_eq!(legend, vec![("a".to_string(), "blue")]);
        let img = image::open(&path).unwrap().to_rgb8();
        assert!(img.pixels().any(|p| p.0 == PALETTE[0].1));
        line_chart(&[], &dir.path().join("empty.png")).unwrap();
    }
}
