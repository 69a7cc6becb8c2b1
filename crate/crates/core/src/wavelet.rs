//! Single-level orthonormal Haar packing.
//!
//! A `[N, C, H, W]` image becomes `[N, 4C, H/2, W/2]`; source channel `c`
//! maps to packed channels `4c..4c+4` in the order LL, LH, HL, HH. For each
//! 2×2 block `(a b; c d)`:
//!
//! ```text
//! LL = (a + b + c + d) / 2    LH = (a − b + c − d) / 2
//! HL = (a + b − c − d) / 2    HH = (a − b − c + d) / 2
//! ```
//!
//! The transform is orthonormal, so the inverse is its transpose and energy
//! is preserved exactly.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const BANDS: usize = 4;

/// Packed sub-band representation produced by [`dwt`].
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPack<T: Real> {
    bands: Tensor<T>,
}

impl<T: Real> WaveletPack<T> {
    /// Wraps packed bands, checking the channel count is a multiple of 4.
    pub fn from_tensor(bands: Tensor<T>) -> Result<Self> {
        if bands.ndim() != 4 {
            return Err(Error::Shape(format!("wavelet pack must be 4-d, got {:?}", bands.shape())));
        }
        if !bands.shape()[1].is_multiple_of(BANDS) {
            return Err(Error::Shape(format!(
                "wavelet pack channel count {} is not divisible by 4",
                bands.shape()[1]
            )));
        }
        Ok(WaveletPack { bands })
    }

    pub fn bands(&self) -> &Tensor<T> {
        &self.bands
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.bands
    }

    /// Number of source-image channels.
    pub fn source_channels(&self) -> usize {
        self.bands.shape()[1] / BANDS
    }
}

pub fn dwt<T: Real>(image: &Tensor<T>) -> Result<WaveletPack<T>> {
    if image.ndim() != 4 {
        return Err(Error::Shape(format!("dwt expects [N,C,H,W], got {:?}", image.shape())));
    }
    let (_, _, h, w) = image.dims4();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidDimensions(format!("dwt needs even height and width, got {h}×{w}")));
    }
    Ok(WaveletPack {
        bands: dwt_raw(image),
    })
}

pub fn idwt<T: Real>(pack: &WaveletPack<T>) -> Tensor<T> {
    idwt_raw(&pack.bands)
}

fn dwt_raw<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let half = T::of(0.5);
    let mut out = Tensor::zeros(&[n, 4 * c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    let plane = ho * wo;
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let base = p * 4 * plane;
        for i in 0..ho {
            for j in 0..wo {
                let a = s[2 * i * w + 2 * j];
                let b = s[2 * i * w + 2 * j + 1];
                let cc = s[(2 * i + 1) * w + 2 * j];
                let d = s[(2 * i + 1) * w + 2 * j + 1];
                let o = i * wo + j;
                dst[base + o] = (a + b + cc + d) * half;
                dst[base + plane + o] = (a - b + cc - d) * half;
                dst[base + 2 * plane + o] = (a + b - cc - d) * half;
                dst[base + 3 * plane + o] = (a - b - cc + d) * half;
            }
        }
    }
    out
}

fn idwt_raw<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c4, ho, wo) = x.dims4();
    let c = c4 / BANDS;
    let (h, w) = (2 * ho, 2 * wo);
    let half = T::of(0.5);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    let plane = ho * wo;
    for p in 0..n * c {
        let base = p * 4 * plane;
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let o = i * wo + j;
                let ll = src[base + o];
                let lh = src[base + plane + o];
                let hl = src[base + 2 * plane + o];
                let hh = src[base + 3 * plane + o];
                d[2 * i * w + 2 * j] = (ll + lh + hl + hh) * half;
                d[2 * i * w + 2 * j + 1] = (ll - lh + hl - hh) * half;
                d[(2 * i + 1) * w + 2 * j] = (ll + lh - hl - hh) * half;
                d[(2 * i + 1) * w + 2 * j + 1] = (ll - lh - hl + hh) * half;
            }
        }
    }
    out
}

/// Differentiable [`dwt`]. The adjoint of an orthonormal transform is its
/// inverse, so the backward pass is an `idwt`.
pub fn dwt_var<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let (_, _, h, w) = g.value(x).dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "dwt_var needs even spatial dims, got {h}×{w}");
    let value = dwt_raw(g.value(x));
    g.op(&[x], value, |c| vec![Some(idwt_raw(c.grad))])
}

/// Differentiable [`idwt`]; backward is a `dwt`.
pub fn idwt_var<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    assert_eq!(g.value(x).shape()[1] % BANDS, 0, "idwt_var needs a multiple of 4 channels");
    let value = idwt_raw(g.value(x));
    g.op(&[x], value, |c| vec![Some(dwt_raw(c.grad))])
}
