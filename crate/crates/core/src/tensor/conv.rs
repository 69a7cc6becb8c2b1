//! im2col convolution kernels (cross-correlation, NCHW, square kernels).

use super::{gemm, Real, Tensor};

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: conv_output_size(h, k, stride, pad),
            wo: conv_output_size(w, k, stride, pad),
        }
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // contiguous run: ix = ox + kx - pad
                        let shift = kx as isize - g.pad as isize;
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize + shift;
                            *d = if ix >= 0 && ix < g.w as isize { srow[ix as usize] } else { T::zero() };
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < g.w as isize { srow[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            xrow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y[b] = W ⋆ x[b]` with `W: [cout, cin, k, k]`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, k, k2) = w.dims4();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    let g = ConvGeom::new(cin, h, wd, k, stride, pad);
    let plane = g.ho * g.wo;
    let kk = cin * k * k;
    let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * plane] };
    for b in 0..n {
        let xb = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        let yb = &mut out.data_mut()[b * cout * plane..(b + 1) * cout * plane];
        gemm(cout, plane, kk, T::one(), w.data(), false, cols, false, T::zero(), yb);
    }
    out
}

/// Gradients of `conv2d_forward` w.r.t. input and weight (each optional).
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let g = ConvGeom::new(cin, h, wd, k, stride, pad);
    let plane = g.ho * g.wo;
    let kk = cin * k * k;
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape()));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * plane] };
    let mut gcol = if need_x && !g.is_pointwise() { vec![T::zero(); kk * plane] } else { Vec::new() };
    for b in 0..n {
        let gyb = &gy.data()[b * cout * plane..(b + 1) * cout * plane];
        if let Some(gw) = gw.as_mut() {
            let xb = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
            let cols: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut col);
                &col
            };
            // gW += gy_b · colsᵀ
            gemm(cout, kk, plane, T::one(), gyb, false, cols, true, T::one(), gw.data_mut());
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx.data_mut()[b * cin * h * wd..(b + 1) * cin * h * wd];
            if g.is_pointwise() {
                gemm(kk, plane, cout, T::one(), w.data(), true, gyb, false, T::zero(), gxb);
            } else {
                gemm(kk, plane, cout, T::one(), w.data(), true, gyb, false, T::zero(), &mut gcol);
                col2im(&gcol, &g, gxb);
            }
        }
    }
    (gx, gw)
}
