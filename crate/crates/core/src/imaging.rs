//! Image helpers: PNG I/O, bilinear sampling and crop resampling.
//!
//! Images are `[C, H, W]` float tensors with values in `[0,1]`.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::raster::CropBox;
use crate::tensor::Tensor;

/// Bilinear sample of channel `c` at pixel-space `(x, y)`; pixel centers are
/// at `+0.5` and coordinates clamp to the edge pixels.
pub fn sample_bilinear(img: &Tensor<f32>, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let d = &img.data()[c * h * w..(c + 1) * h * w];
    let at = |i: usize, j: usize| d[i * w + j] as f64;
    (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x1)) + ay * ((1.0 - ax) * at(y1, x0) + ax * at(y1, x1))
}

/// Resamples the crop box of a `[C, H, W]` source image to `[C, r, r]`.
pub fn resample_crop(img: &Tensor<f32>, crop: &CropBox, r: usize) -> Tensor<f32> {
    let c = img.shape()[0];
    let mut out = Tensor::zeros(&[c, r, r]);
    let plane = r * r;
    for i in 0..r {
        for j in 0..r {
            let [x, y] = crop.to_source([j as f64 + 0.5, i as f64 + 0.5], r);
            for ch in 0..c {
                out.data_mut()[ch * plane + i * r + j] = sample_bilinear(img, ch, x, y) as f32;
            }
        }
    }
    out
}

fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an 8-bit PNG as `[3, H, W]` (color) or `[1, H, W]` (grayscale).
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format("png", path, other),
    })?;
    let channels = if img.color().has_color() { 3 } else { 1 };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[channels, h, w]);
    let plane = h * w;
    if channels == 3 {
        let rgb = img.to_rgb8();
        for (x, y, p) in rgb.enumerate_pixels() {
            let o = y as usize * w + x as usize;
            for c in 0..3 {
                out.data_mut()[c * plane + o] = p[c] as f32 / 255.0;
            }
        }
    } else {
        let l = img.to_luma8();
        for (x, y, p) in l.enumerate_pixels() {
            out.data_mut()[y as usize * w + x as usize] = p[0] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Encodes `[3, H, W]` or `[1, H, W]` as an 8-bit PNG, written atomically.
pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let d = img.data();
    let mut bytes = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut bytes);
    let result = match c {
        3 => ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            let o = y as usize * w + x as usize;
            Rgb([to_u8(d[o]), to_u8(d[plane + o]), to_u8(d[2 * plane + o])])
        })
        .write_with_encoder(encoder),
        1 => ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(d[y as usize * w + x as usize])]))
            .write_with_encoder(encoder),
        _ => return Err(Error::Shape(format!("cannot encode {c}-channel image"))),
    };
    result.map_err(|e| Error::format("png", path, e))?;
    write_atomic(path, &bytes)
}

/// Rounds to the 8-bit grid, matching what a PNG round trip stores.
pub fn quantize_u8(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|x| to_u8(x) as f32 / 255.0)
}
