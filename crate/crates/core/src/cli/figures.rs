//! Overlay panels: input image, ground truth, then one prediction per model.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::mask::Mask;

const GAP: u32 = 2;
const GT_COLOR: [u8; 3] = [40, 200, 60];
const PRED_COLOR: [u8; 3] = [220, 50, 40];

fn gray(image: &Image, i: usize, j: usize) -> u8 {
    (image.at(i, j, 0).clamp(0.0, 1.0) * 255.0).round() as u8
}

fn tile(image: &Image, mask: Option<(&Mask, [u8; 3])>) -> RgbImage {
    RgbImage::from_fn(image.width as u32, image.height as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        let g = gray(image, i, j);
        match mask {
            Some((m, c)) if m.get(0, i, j) => {
                let mix = |a: u8, b: u8| ((a as u16 + b as u16) / 2) as u8;
                Rgb([mix(g, c[0]), mix(g, c[1]), mix(g, c[2])])
            }
            _ => Rgb([g, g, g]),
        }
    })
}

/// Renders `image | image + gt | image + pred_1 | ...` side by side.
/// Masks are `1 x H x W`.
pub fn overlay_panel(image: &Image, gt: &Mask, predictions: &[&Mask]) -> Result<RgbImage> {
    let (h, w) = (image.height, image.width);
    for m in std::iter::once(gt).chain(predictions.iter().copied()) {
        if m.dims() != [1, h, w] {
            return Err(Error::Shape(format!("mask {:?} does not match image {h}x{w}", m.dims())));
        }
    }
    let mut tiles = vec![tile(image, None), tile(image, Some((gt, GT_COLOR)))];
    tiles.extend(predictions.iter().map(|p| tile(image, Some((p, PRED_COLOR)))));
    let n = tiles.len() as u32;
    let mut out = RgbImage::from_pixel(n * w as u32 + (n - 1) * GAP, h as u32, Rgb([255, 255, 255]));
    for (k, t) in tiles.iter().enumerate() {
        image::imageops::replace(&mut out, t, (k as u32 * (w as u32 + GAP)) as i64, 0);
    }
    Ok(out)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::format(path, e.to_string()))
}
