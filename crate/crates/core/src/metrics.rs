//! Image quality metrics on `[C, H, W]` (or `[1, C, H, W]`) images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn planes<T: Real>(img: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!("expected one [C, H, W] image, got {:?}", img.shape()))),
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (sa, sb) = (planes(a)?, planes(b)?);
    if sa != sb {
        return Err(Error::Shape(format!("image shapes differ: {sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

/// Peak signal-to-noise ratio for unit data range, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64().unwrap() - y.to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Mean SSIM over channels with a 7×7 uniform window, unit data range,
/// sample (N−1) covariance, averaged over all positions where the window
/// fits entirely.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (c, h, w) = same_shape(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}")));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let cov_norm = n / (n - 1.0);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.to_f64().unwrap()).collect();
        let pb: Vec<f64> = b.data()[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.to_f64().unwrap()).collect();
        for y in 0..oh {
            for x in 0..ow {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let o = (y + i) * w + x + j;
                        let (u, v) = (pa[o], pb[o]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = cov_norm * (saa / n - ma * ma);
                let vb = cov_norm * (sbb / n - mb * mb);
                let vab = cov_norm * (sab / n - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

/// Mean absolute difference.
pub fn mae<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs().to_f64().unwrap()).sum::<f64>() / a.len().max(1) as f64)
}

/// Splits `n` frames into the first 80% (train) and the rest (test).
pub fn train_test_split(n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let cut = (n * 4).div_ceil(5).min(n);
    (0..cut, cut..n)
}
