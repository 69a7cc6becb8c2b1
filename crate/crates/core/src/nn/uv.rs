//! Sampling UV-space canvases into screen space through a UV rendering.

use crate::tensor::{Graph, Real, Tensor, Var};

/// Bilinear footprint of one covered pixel in a `T×T` canvas plane.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    batch: usize,
    pixel: usize,
    offsets: [usize; 4],
    weights: [T; 4],
}

/// A pixel is face when either UV channel is nonzero; the rasterizer writes
/// exact zeros everywhere else.
pub fn is_face<T: Real>(u: T, v: T) -> bool {
    u > T::zero() || v > T::zero()
}

/// Canvas texel `j` sits at `u = j/(T−1)`, so UV 0 and 1 land on the edge
/// texel centers and a linear ramp canvas reproduces UV exactly.
fn taps<T: Real>(uv: &Tensor<T>, size: usize) -> Vec<Tap<T>> {
    let (n, _, h, w) = uv.dims4();
    let plane = h * w;
    let span = T::of((size - 1) as f64);
    let last = size.saturating_sub(2);
    let mut out = Vec::new();
    for b in 0..n {
        let base = b * uv.shape()[1] * plane;
        for p in 0..plane {
            let (u, v) = (uv.data()[base + p], uv.data()[base + plane + p]);
            if !is_face(u, v) {
                continue;
            }
            let x = (u * span).max(T::zero()).min(span);
            let y = (v * span).max(T::zero()).min(span);
            let x0 = x.floor().to_usize().unwrap_or(0).min(last);
            let y0 = y.floor().to_usize().unwrap_or(0).min(last);
            let (ax, ay) = (x - T::of(x0 as f64), y - T::of(y0 as f64));
            let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
            let one = T::one();
            out.push(Tap {
                batch: b,
                pixel: p,
                offsets: [y0 * size + x0, y0 * size + x1, y1 * size + x0, y1 * size + x1],
                weights: [(one - ay) * (one - ax), (one - ay) * ax, ay * (one - ax), ay * ax],
            });
        }
    }
    out
}

fn gather<T: Real>(canvas: &Tensor<T>, taps: &[Tap<T>], n: usize, h: usize, w: usize) -> Tensor<T> {
    let (cn, c, size, _) = canvas.dims4();
    let (plane, tplane) = (h * w, size * size);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for t in taps {
        let cb = if cn == 1 { 0 } else { t.batch };
        for ch in 0..c {
            let src = &canvas.data()[(cb * c + ch) * tplane..(cb * c + ch + 1) * tplane];
            let v = (0..4).fold(T::zero(), |acc, k| acc + t.weights[k] * src[t.offsets[k]]);
            out.data_mut()[(t.batch * c + ch) * plane + t.pixel] = v;
        }
    }
    out
}

fn check_shapes<T: Real>(canvas: &Tensor<T>, uv: &Tensor<T>) {
    let (cn, _, th, tw) = canvas.dims4();
    assert_eq!(th, tw, "UV canvas must be square");
    assert!(th >= 2, "UV canvas must be at least 2×2");
    assert!(uv.shape()[1] >= 2, "UV rendering needs u and v channels");
    assert!(cn == 1 || cn == uv.shape()[0], "canvas batch must be 1 or match the rendering");
}

/// Samples `canvas [1|N, C, T, T]` at the UV of every face pixel of
/// `uv [N, ≥2, H, W]`; background pixels are zero.
pub fn sample_uv<T: Real>(canvas: &Tensor<T>, uv: &Tensor<T>) -> Tensor<T> {
    check_shapes(canvas, uv);
    let (n, _, h, w) = uv.dims4();
    gather(canvas, &taps(uv, canvas.shape()[2]), n, h, w)
}

/// Differentiable (w.r.t. the canvas) version of [`sample_uv`].
pub fn sample_uv_var<T: Real>(g: &mut Graph<T>, canvas: Var, uv: &Tensor<T>) -> Var {
    check_shapes(g.value(canvas), uv);
    let (n, _, h, w) = uv.dims4();
    let taps = taps(uv, g.shape(canvas)[2]);
    let value = gather(g.value(canvas), &taps, n, h, w);
    g.op(&[canvas], value, move |ctx| {
        let shape = ctx.inputs[0].shape();
        let (cn, c, size) = (shape[0], shape[1], shape[2]);
        let (plane, tplane) = (h * w, size * size);
        let mut grad = Tensor::zeros(shape);
        for t in &taps {
            let cb = if cn == 1 { 0 } else { t.batch };
            for ch in 0..c {
                let gv = ctx.grad.data()[(t.batch * c + ch) * plane + t.pixel];
                let dst = &mut grad.data_mut()[(cb * c + ch) * tplane..(cb * c + ch + 1) * tplane];
                for k in 0..4 {
                    dst[t.offsets[k]] += t.weights[k] * gv;
                }
            }
        }
        vec![Some(grad)]
    })
}

/// Face mask `[N, 1, H, W]` of a UV rendering.
pub fn face_mask<T: Real>(uv: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = uv.dims4();
    let plane = h * w;
    Tensor::from_fn(&[n, 1, h, w], |i| {
        let (b, p) = (i / plane, i % plane);
        let base = b * c * plane;
        if is_face(uv.data()[base + p], uv.data()[base + plane + p]) {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn ramp_canvas(size: usize) -> Tensor<f64> {
        let s = (size - 1) as f64;
        Tensor::from_fn(&[1, 2, size, size], |i| {
            let (ch, p) = (i / (size * size), i % (size * size));
            let (y, x) = (p / size, p % size);
            if ch == 0 {
                x as f64 / s
            } else {
                y as f64 / s
            }
        })
    }

    #[test]
    fn ramp_canvas_reproduces_uv() {
        let uv = Tensor::from_fn(&[1, 3, 5, 5], |i| if i >= 50 { 0.0 } else { ((i * 37) % 101) as f64 / 100.0 });
        let out = sample_uv(&ramp_canvas(8), &uv);
        for i in 0..50 {
            assert!((out.data()[i] - uv.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn background_pixels_are_zero() {
        let uv = Tensor::<f64>::zeros(&[2, 3, 4, 4]);
        let canvas = Tensor::full(&[1, 3, 8, 8], 0.7);
        assert!(sample_uv(&canvas, &uv).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let uv = Tensor::from_fn(&[1, 3, 3, 3], |i| if i % 5 == 0 { 0.0 } else { (i as f64 * 0.173).fract() });
        let canvas = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.61).sin());
        let weights = Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64 * 0.37).cos());
        let err = check_gradients(&[canvas], |g, v| {
            let s = sample_uv_var(g, v[0], &uv);
            let wv = g.constant(weights.clone());
            let p = g.mul(s, wv);
            g.sum(p)
        });
        assert!(err < 1e-6, "relative error {err}");
    }
}
