use super::uv::{face_mask, sample_uv};
use crate::tensor::{Real, Tensor};

/// Screen-space noise `[N, 1, H, W]`: face pixels sample `uv_noise
/// [1, 1, T, T]` at their UV, every other pixel takes `bg_noise
/// [1|N, 1, H, W]` unchanged.
pub fn map_noise_via_uv<T: Real>(uv_noise: &Tensor<T>, uv_rendering: &Tensor<T>, bg_noise: &Tensor<T>) -> Tensor<T> {
    let (n, _, h, w) = uv_rendering.dims4();
    let (bn, bc, bh, bw) = bg_noise.dims4();
    assert!(bc == 1 && bh == h && bw == w && (bn == 1 || bn == n), "background noise shape {:?}", bg_noise.shape());
    let face = sample_uv(uv_noise, uv_rendering);
    let mask = face_mask(uv_rendering);
    let plane = h * w;
    Tensor::from_fn(&[n, 1, h, w], |i| {
        if mask.data()[i] > T::zero() {
            face.data()[i]
        } else {
            let b = if bn == 1 { 0 } else { i / plane };
            bg_noise.data()[b * plane + i % plane]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_only_returns_fixed_noise() {
        let uv = Tensor::<f32>::zeros(&[1, 3, 6, 6]);
        let bg = Tensor::from_fn(&[1, 1, 6, 6], |i| i as f32 * 0.1 - 1.0);
        let canvas = Tensor::full(&[1, 1, 4, 4], 9.0);
        assert_eq!(map_noise_via_uv(&canvas, &uv, &bg), bg);
    }

    #[test]
    fn constant_canvas_fills_face() {
        let uv = Tensor::from_fn(&[1, 3, 4, 4], |i| if i < 16 && i % 2 == 0 { 0.5 } else { 0.0 });
        let bg = Tensor::full(&[1, 1, 4, 4], -3.0);
        let out = map_noise_via_uv(&Tensor::full(&[1, 1, 8, 8], 0.25), &uv, &bg);
        for (i, &v) in out.data().iter().enumerate() {
            assert_eq!(v, if i % 2 == 0 { 0.25 } else { -3.0 });
        }
    }
}
