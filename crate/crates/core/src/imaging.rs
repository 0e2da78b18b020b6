//! PNG export helpers.

use std::path::Path;

use image::{GrayImage, Luma, Rgb as Px, RgbImage};

use crate::error::{Error, Result};
use crate::radiance::Rgb;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_image(pixels: &[Rgb], width: usize, height: usize) -> Result<RgbImage> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument("pixel count does not match image size".into()));
    }
    Ok(RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let p = pixels[y as usize * width + x as usize];
        Px([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    }))
}

pub fn write_rgb_png(path: &Path, pixels: &[Rgb], width: usize, height: usize) -> Result<()> {
    rgb_to_image(pixels, width, height)?.save(path)?;
    Ok(())
}

/// Grayscale PNG with `values` scaled linearly so that `max` maps to 255.
pub fn write_gray_png(path: &Path, values: &[f64], width: usize, height: usize, max: f64) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::InvalidArgument("value count does not match image size".into()));
    }
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([to_u8(values[y as usize * width + x as usize] * scale)])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<(Vec<Rgb>, usize, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .collect();
    Ok((px, w, h))
}

/// Distinct plot colors, cycled by series index.
pub const PLOT_COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Px<u8>) {
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

/// Line chart of `(x, y)` series on a white canvas with a frame and a 5×5 grid; no text.
///
/// Axis ranges cover every finite point; non-finite points break the line.
pub fn line_plot(series: &[Vec<(f64, f64)>], width: u32, height: u32) -> Result<RgbImage> {
    if width < 32 || height < 32 {
        return Err(Error::InvalidArgument("plot canvas must be at least 32x32".into()));
    }
    let pts = series.iter().flatten().filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let mut img = RgbImage::from_pixel(width, height, Px([255, 255, 255]));
    let m = 16i64;
    let (w, h) = (width as i64 - 2 * m, height as i64 - 2 * m);
    let grid = Px([225, 225, 225]);
    for k in 0..=5 {
        let gx = m + w * k / 5;
        let gy = m + h * k / 5;
        draw_line(&mut img, (gx, m), (gx, m + h), grid);
        draw_line(&mut img, (m, gy), (m + w, gy), grid);
    }
    let frame = Px([0, 0, 0]);
    draw_line(&mut img, (m, m + h), (m + w, m + h), frame);
    draw_line(&mut img, (m, m), (m, m + h), frame);
    let to_px = |(x, y): (f64, f64)| {
        (
            m + ((x - x0) / (x1 - x0) * w as f64).round() as i64,
            m + h - ((y - y0) / (y1 - y0) * h as f64).round() as i64,
        )
    };
    for (i, s) in series.iter().enumerate() {
        let c = Px(PLOT_COLORS[i % PLOT_COLORS.len()]);
        for pair in s.windows(2) {
            let ok = pair.iter().all(|(x, y)| x.is_finite() && y.is_finite());
            if ok {
                draw_line(&mut img, to_px(pair[0]), to_px(pair[1]), c);
            }
        }
        for p in s.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let (px, py) = to_px(*p);
            for (ox, oy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
                draw_line(&mut img, (px + ox, py + oy), (px + ox, py + oy), c);
            }
        }
    }
    Ok(img)
}
