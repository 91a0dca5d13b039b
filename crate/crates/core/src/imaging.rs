//! 8-bit image export and preview grids.

use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::draw_line_segment_mut;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::LogRecord;

/// `[3, H, W]` (or `[1, 3, H, W]`) in `[-1, 1]` to 8-bit RGB.
pub fn to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        ref s => return Err(Error::Shape(format!("image tensor {s:?}"))),
    };
    if c != 3 {
        return Err(Error::Shape(format!("image tensor with {c} channels")));
    }
    let d = t.data();
    let q = |x: f32| ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    }))
}

/// 8-bit RGB back to `[3, H, W]` in `[-1, 1]`.
pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * h * w + i] = p.0[ch] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("rgb shape")
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// Tiles equally sized images row-major into `cols` columns with a `gap`
/// pixel border of `background`.
pub fn grid(images: &[RgbImage], cols: usize, gap: u32, background: [u8; 3]) -> Result<RgbImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("grid needs at least one image".into()))?;
    if cols == 0 {
        return Err(Error::InvalidArgument(
            "grid needs at least one column".into(),
        ));
    }
    let (w, h) = first.dimensions();
    if images.iter().any(|i| i.dimensions() != (w, h)) {
        return Err(Error::Shape("grid images differ in size".into()));
    }
    let cols_used = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let out_w = cols_used as u32 * (w + gap) + gap;
    let out_h = rows as u32 * (h + gap) + gap;
    let mut out = RgbImage::from_pixel(out_w, out_h, Rgb(background));
    for (k, img) in images.iter().enumerate() {
        let x0 = gap + (k % cols) as u32 * (w + gap);
        let y0 = gap + (k / cols) as u32 * (h + gap);
        image::imageops::replace(&mut out, img, x0 as i64, y0 as i64);
    }
    Ok(out)
}

const PANEL_W: u32 = 480;
const PANEL_H: u32 = 100;
const MARGIN: u32 = 8;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// One panel per series name, in order of first appearance, each scaled to
/// its own min/max over steps.
pub fn loss_plot(records: &[LogRecord]) -> Result<RgbImage> {
    let mut names: Vec<&str> = Vec::new();
    for r in records {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    if names.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to plot: the loss log is empty".into(),
        ));
    }
    let height = names.len() as u32 * (PANEL_H + MARGIN) + MARGIN;
    let mut img = RgbImage::from_pixel(PANEL_W + 2 * MARGIN, height, Rgb([255, 255, 255]));
    for (k, name) in names.iter().enumerate() {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.name == *name && r.value.is_finite())
            .map(|r| (r.step as f64, r.value))
            .collect();
        let x0 = MARGIN as f32;
        let y0 = (MARGIN + k as u32 * (PANEL_H + MARGIN)) as f32;
        let (w, h) = (PANEL_W as f32, PANEL_H as f32);
        let frame = Rgb([160, 160, 160]);
        for (a, b) in [
            ((x0, y0), (x0 + w, y0)),
            ((x0, y0 + h), (x0 + w, y0 + h)),
            ((x0, y0), (x0, y0 + h)),
            ((x0 + w, y0), (x0 + w, y0 + h)),
        ] {
            draw_line_segment_mut(&mut img, a, b, frame);
        }
        if pts.is_empty() {
            continue;
        }
        let (smin, smax) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                (a.min(p.0), b.max(p.0))
            });
        let (vmin, vmax) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                (a.min(p.1), b.max(p.1))
            });
        let sx = |s: f64| {
            x0 + 2.0
                + (w - 4.0)
                    * if smax > smin {
                        ((s - smin) / (smax - smin)) as f32
                    } else {
                        0.5
                    }
        };
        let sy = |v: f64| {
            y0 + h
                - 2.0
                - (h - 4.0)
                    * if vmax > vmin {
                        ((v - vmin) / (vmax - vmin)) as f32
                    } else {
                        0.5
                    }
        };
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        if pts.len() == 1 {
            let (x, y) = (sx(pts[0].0), sy(pts[0].1));
            draw_line_segment_mut(&mut img, (x - 2.0, y), (x + 2.0, y), color);
        }
        for p in pts.windows(2) {
            draw_line_segment_mut(
                &mut img,
                (sx(p[0].0), sy(p[0].1)),
                (sx(p[1].0), sy(p[1].1)),
                color,
            );
        }
    }
    Ok(img)
}
