//! Software triangle rasterizer for the UV and texture conditioning images.
//!
//! Projection is orthographic: posed geometry is already in source-image
//! pixels, so a crop box only translates and rescales `x`/`y`. Depth is
//! `−z` in crop pixels (smaller is nearer). Pixel `(i, j)` has its center at
//! `(j + 0.5, i + 0.5)`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphable::{evaluate_geometry, evaluate_texture, FaceParams, MorphableModel};
use crate::tensor::Tensor;

/// Square crop in source-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub center: [f64; 2],
    pub size: f64,
    /// `(width, height)` of the source image.
    pub source_resolution: [usize; 2],
}

impl CropBox {
    /// Covers the whole of a square `n×n` image, so crop pixels equal source
    /// pixels at resolution `n`.
    pub fn full(n: usize) -> Self {
        CropBox {
            center: [n as f64 / 2.0, n as f64 / 2.0],
            size: n as f64,
            source_resolution: [n, n],
        }
    }

    pub fn origin(&self) -> [f64; 2] {
        [self.center[0] - self.size / 2.0, self.center[1] - self.size / 2.0]
    }

    /// Source pixel → crop pixel at output resolution `r`.
    pub fn to_crop(&self, p: [f64; 2], r: usize) -> [f64; 2] {
        let k = r as f64 / self.size;
        let o = self.origin();
        [(p[0] - o[0]) * k, (p[1] - o[1]) * k]
    }

    /// Crop pixel at resolution `r` → source pixel.
    pub fn to_source(&self, p: [f64; 2], r: usize) -> [f64; 2] {
        let k = self.size / r as f64;
        let o = self.origin();
        [p[0] * k + o[0], p[1] * k + o[1]]
    }
}

/// Square box around the landmark bounding box, `enlarge` times its longer
/// side, shifted (never shrunk) to stay inside the image when it fits.
pub fn compute_crop_box(landmarks: &[[f64; 2]], enlarge: f64, image_size: [usize; 2]) -> Result<CropBox> {
    if landmarks.is_empty() {
        return Err(Error::EmptyLandmarks);
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in landmarks {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let size = enlarge * (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let mut center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    for d in 0..2 {
        let extent = image_size[d] as f64;
        if size <= extent {
            center[d] = center[d].clamp(size / 2.0, extent - size / 2.0);
        }
    }
    Ok(CropBox {
        center,
        size,
        source_resolution: image_size,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    /// Unit vector toward the light in posed space.
    pub direction: [f64; 3],
    pub ambient: f64,
    pub diffuse: f64,
}

impl Default for Lighting {
    fn default() -> Self {
        Lighting {
            direction: [0.0, 0.0, 1.0],
            ambient: 0.3,
            diffuse: 0.7,
        }
    }
}

impl Lighting {
    pub fn shade(&self, normal: &Vector3<f64>) -> f64 {
        let l = Vector3::from(self.direction);
        self.ambient + self.diffuse * normal.dot(&l).max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    Uv,
    Texture,
    Both,
}

/// Depth tolerance, in crop pixels, for the per-vertex visibility test.
pub const VISIBILITY_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// `[3, R, R]`: red = u, green = v, blue = 0; zero off the mesh.
    pub uv_image: Tensor<f32>,
    /// `[3, R, R]` shaded albedo.
    pub tex_image: Tensor<f32>,
    /// `R·R`, `+∞` off the mesh.
    pub depth: Vec<f32>,
    pub coverage: Vec<bool>,
    /// Per vertex: wins the depth test at its projected pixel.
    pub visibility: Vec<bool>,
    pub crop_box: CropBox,
    pub resolution: usize,
}

/// Area-weighted vertex normals of a triangle mesh.
pub fn vertex_normals(verts: &[Vector3<f64>], triangles: &[[usize; 3]]) -> Vec<Vector3<f64>> {
    let mut n = vec![Vector3::zeros(); verts.len()];
    for t in triangles {
        let face = (verts[t[1]] - verts[t[0]]).cross(&(verts[t[2]] - verts[t[0]]));
        for &i in t {
            n[i] += face;
        }
    }
    n.iter()
        .map(|v| {
            let len = v.norm();
            if len > 0.0 {
                v / len
            } else {
                *v
            }
        })
        .collect()
}

/// Snaps to a 1/256-pixel grid. Edge functions of snapped coordinates are
/// exact in `f64`, so integer crop shifts move the rendering bit-exactly.
fn snap(x: f64) -> f64 {
    (x * 256.0).round() / 256.0
}

/// Per-vertex attributes carried through rasterization.
pub struct Mesh<'a> {
    /// Crop-space `(x, y, depth)`.
    pub screen: Vec<[f64; 3]>,
    pub triangles: &'a [[usize; 3]],
    pub uv: &'a [[f64; 2]],
    /// Shaded color per vertex, or empty to skip the texture image.
    pub colors: Vec<[f64; 3]>,
}

/// Rasterizes `model` under `params` into the crop box at resolution `r`.
pub fn rasterize(
    model: &MorphableModel,
    params: &FaceParams,
    mode: RenderMode,
    crop: &CropBox,
    r: usize,
    lighting: &Lighting,
) -> Result<RenderOutput> {
    if r == 0 || !r.is_multiple_of(2) {
        return Err(Error::InvalidDimensions(format!("render resolution must be a positive even number, got {r}")));
    }
    let out = render_view(model, params, mode, r as f64 / crop.size, crop.origin(), [r, r], lighting)?;
    Ok(RenderOutput {
        uv_image: out.uv_image,
        tex_image: out.tex_image,
        depth: out.depth,
        coverage: out.coverage,
        visibility: out.visibility,
        crop_box: *crop,
        resolution: r,
    })
}

/// Renders directly in source-image pixels, `height×width`, no crop.
pub fn rasterize_frame(
    model: &MorphableModel,
    params: &FaceParams,
    mode: RenderMode,
    size: [usize; 2],
    lighting: &Lighting,
) -> Result<RasterBuffers> {
    render_view(model, params, mode, 1.0, [0.0, 0.0], size, lighting)
}

/// `k` scales source pixels to output pixels after subtracting `origin`;
/// `size` is `(height, width)`.
fn render_view(
    model: &MorphableModel,
    params: &FaceParams,
    mode: RenderMode,
    k: f64,
    origin: [f64; 2],
    size: [usize; 2],
    lighting: &Lighting,
) -> Result<RasterBuffers> {
    params.validate(model)?;
    let posed = evaluate_geometry(model, params);
    let (ox, oy) = (snap(origin[0] * k), snap(origin[1] * k));
    let screen = posed
        .iter()
        .map(|p| [snap(p.x * k) - ox, snap(p.y * k) - oy, -p.z * k])
        .collect();
    let colors = if mode == RenderMode::Uv {
        Vec::new()
    } else {
        let albedo = evaluate_texture(model, &params.theta_tex)?;
        let normals = vertex_normals(&posed, &model.triangles);
        albedo
            .iter()
            .zip(&normals)
            .map(|(a, n)| {
                let s = lighting.shade(n);
                [a[0] * s, a[1] * s, a[2] * s]
            })
            .collect()
    };
    let mesh = Mesh {
        screen,
        triangles: &model.triangles,
        uv: &model.uv_coords,
        colors,
    };
    let mut out = rasterize_mesh(&mesh, size[0], size[1]);
    if mode == RenderMode::Texture {
        out.uv_image = Tensor::zeros(&[3, size[0], size[1]]);
    }
    Ok(out)
}

pub struct RasterBuffers {
    pub uv_image: Tensor<f32>,
    pub tex_image: Tensor<f32>,
    pub depth: Vec<f32>,
    pub coverage: Vec<bool>,
    pub visibility: Vec<bool>,
}

fn edge(a: [f64; 3], b: [f64; 3], px: f64, py: f64) -> f64 {
    (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
}

/// Z-buffered rasterization of an already-projected mesh into `h×w`.
pub fn rasterize_mesh(mesh: &Mesh<'_>, h: usize, w: usize) -> RasterBuffers {
    let plane = h * w;
    let mut depth = vec![f64::INFINITY; plane];
    let mut uv = vec![0.0f32; 3 * plane];
    let mut tex = vec![0.0f32; 3 * plane];
    let with_color = !mesh.colors.is_empty();

    for t in mesh.triangles {
        let [a, b, c] = [mesh.screen[t[0]], mesh.screen[t[1]], mesh.screen[t[2]]];
        let area = edge(a, b, c[0], c[1]);
        if area.abs() < 1e-12 {
            continue;
        }
        let xmin = a[0].min(b[0]).min(c[0]);
        let xmax = a[0].max(b[0]).max(c[0]);
        let ymin = a[1].min(b[1]).min(c[1]);
        let ymax = a[1].max(b[1]).max(c[1]);
        if xmax < 0.0 || ymax < 0.0 || xmin > w as f64 || ymin > h as f64 {
            continue;
        }
        let j0 = (xmin - 0.5).ceil().max(0.0) as usize;
        let j1 = ((xmax - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
        let i0 = (ymin - 0.5).ceil().max(0.0) as usize;
        let i1 = ((ymax - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
        if j1 < 0.0 || i1 < 0.0 {
            continue;
        }
        let (j1, i1) = (j1 as usize, i1 as usize);
        for i in i0..=i1 {
            let py = i as f64 + 0.5;
            for j in j0..=j1 {
                let px = j as f64 + 0.5;
                let w0 = edge(b, c, px, py) / area;
                let w1 = edge(c, a, px, py) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * a[2] + w1 * b[2] + w2 * c[2];
                let o = i * w + j;
                if z >= depth[o] {
                    continue;
                }
                depth[o] = z;
                let (ua, ub, uc) = (mesh.uv[t[0]], mesh.uv[t[1]], mesh.uv[t[2]]);
                uv[o] = (w0 * ua[0] + w1 * ub[0] + w2 * uc[0]).clamp(0.0, 1.0) as f32;
                uv[plane + o] = (w0 * ua[1] + w1 * ub[1] + w2 * uc[1]).clamp(0.0, 1.0) as f32;
                if with_color {
                    let (ca, cb, cc) = (mesh.colors[t[0]], mesh.colors[t[1]], mesh.colors[t[2]]);
                    for d in 0..3 {
                        tex[d * plane + o] = (w0 * ca[d] + w1 * cb[d] + w2 * cc[d]) as f32;
                    }
                }
            }
        }
    }

    let visibility = mesh
        .screen
        .iter()
        .map(|p| {
            if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w as f64 && p[1] < h as f64) {
                return false;
            }
            let o = p[1] as usize * w + p[0] as usize;
            depth[o].is_finite() && p[2] <= depth[o] + VISIBILITY_EPS
        })
        .collect();
    let coverage = depth.iter().map(|d| d.is_finite()).collect();
    RasterBuffers {
        uv_image: Tensor::from_vec(&[3, h, w], uv),
        tex_image: Tensor::from_vec(&[3, h, w], tex),
        depth: depth.iter().map(|&d| d as f32).collect(),
        coverage,
        visibility,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::{rot_y, synth_toy_model};
    use proptest::prelude::*;

    fn triangle_mesh<'a>(screen: Vec<[f64; 3]>, tris: &'a [[usize; 3]], uv: &'a [[f64; 2]]) -> Mesh<'a> {
        Mesh {
            screen,
            triangles: tris,
            uv,
            colors: vec![[1.0, 0.5, 0.25]; uv.len()],
        }
    }

    #[test]
    fn crop_box_rules() {
        let lm = [[100.0, 100.0], [200.0, 200.0], [150.0, 120.0]];
        let b = compute_crop_box(&lm, 1.5, [1000, 1000]).unwrap();
        assert_eq!((b.center, b.size), ([150.0, 150.0], 150.0));
        let b = compute_crop_box(&lm, 1.0, [1000, 1000]).unwrap();
        assert_eq!((b.center, b.size), ([150.0, 150.0], 100.0));
        // 150-px box around (20,240) in 256²: shifted to stay inside
        let b = compute_crop_box(&[[0.0, 190.0], [40.0, 290.0]], 1.5, [256, 256]).unwrap();
        assert_eq!(b.size, 150.0);
        assert_eq!(b.center, [75.0, 181.0]);
        assert!(matches!(compute_crop_box(&[], 1.5, [8, 8]), Err(Error::EmptyLandmarks)));
    }

    #[test]
    fn barycentric_uv_matches_hand_computation() {
        let tris = [[0, 1, 2]];
        let uv = [[0.1, 0.2], [0.9, 0.3], [0.4, 0.8]];
        let mesh = triangle_mesh(vec![[1.0, 1.0, 1.0], [12.0, 2.0, 1.0], [3.0, 11.0, 1.0]], &tris, &uv);
        let out = rasterize_mesh(&mesh, 16, 16);
        // pixel (5,5) has center (5.5, 5.5); solve p = a + β(b−a) + γ(c−a)
        let (px, py) = (5.5 - 1.0, 5.5 - 1.0);
        let (bx, by, cx, cy) = (11.0, 1.0, 2.0, 10.0);
        let det = bx * cy - by * cx;
        let beta = (px * cy - py * cx) / det;
        let gamma = (bx * py - by * px) / det;
        let alpha = 1.0 - beta - gamma;
        let u = alpha * 0.1 + beta * 0.9 + gamma * 0.4;
        let v = alpha * 0.2 + beta * 0.3 + gamma * 0.8;
        let o = 5 * 16 + 5;
        assert!(out.coverage[o]);
        assert!((out.uv_image.data()[o] as f64 - u).abs() <= 1e-5);
        assert!((out.uv_image.data()[256 + o] as f64 - v).abs() <= 1e-5);
        assert_eq!(out.uv_image.data()[512 + o], 0.0);
    }

    #[test]
    fn empty_mesh_renders_background() {
        let mesh = Mesh {
            screen: vec![],
            triangles: &[],
            uv: &[],
            colors: vec![],
        };
        let out = rasterize_mesh(&mesh, 8, 8);
        assert!(out.uv_image.data().iter().all(|&x| x == 0.0));
        assert!(out.coverage.iter().all(|&c| !c));
        assert!(out.depth.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn nearer_triangle_wins() {
        let tris = [[0, 1, 2], [3, 4, 5]];
        let uv = [[0.2, 0.2]; 3].into_iter().chain([[0.7, 0.7]; 3]).collect::<Vec<_>>();
        let far = [[0.0, 0.0, 2.0], [16.0, 0.0, 2.0], [0.0, 16.0, 2.0]];
        let near = [[0.0, 0.0, 1.0], [16.0, 0.0, 1.0], [0.0, 16.0, 1.0]];
        for order in [[far, near], [near, far]] {
            let screen = order.concat();
            let mut uv_ordered = uv.clone();
            if order[0] == near {
                uv_ordered.rotate_left(3);
            }
            let out = rasterize_mesh(&triangle_mesh(screen, &tris, &uv_ordered), 16, 16);
            for o in 0..256 {
                if out.coverage[o] {
                    assert_eq!(out.uv_image.data()[o], 0.7);
                    assert_eq!(out.depth[o], 1.0);
                }
            }
        }
    }

    fn toy_render(shift: [f64; 2]) -> RenderOutput {
        let m = synth_toy_model(1, 502, 20, 10, 10, 68).unwrap();
        let mut p = FaceParams::neutral(&m);
        p.scale = 30.0;
        p.translation = Vector3::new(32.0 / 30.0 + 0.02, 32.0 / 30.0 - 0.03, 0.0);
        p.head_rotation = rot_y(0.3);
        let mut crop = CropBox::full(64);
        crop.center[0] += shift[0];
        crop.center[1] += shift[1];
        rasterize(&m, &p, RenderMode::Both, &crop, 64, &Lighting::default()).unwrap()
    }

    #[test]
    fn render_invariants_hold() {
        let out = toy_render([0.0, 0.0]);
        let plane = 64 * 64;
        assert!(out.coverage.iter().filter(|&&c| c).count() > 500);
        for o in 0..plane {
            let (u, v) = (out.uv_image.data()[o], out.uv_image.data()[plane + o]);
            if out.coverage[o] {
                assert!((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v));
                assert!(out.depth[o].is_finite());
            } else {
                assert_eq!((u, v), (0.0, 0.0));
                assert!(out.depth[o].is_infinite());
            }
            for d in 0..3 {
                assert!(out.tex_image.data()[d * plane + o] <= 1.0 + 1e-6);
                assert!(out.tex_image.data()[d * plane + o] >= 0.0);
            }
        }
        assert_eq!(out, toy_render([0.0, 0.0]));
        assert!(out.visibility.iter().any(|&v| v) && out.visibility.iter().any(|&v| !v));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn integer_crop_shift_translates_rendering(dx in -4i32..5, dy in -4i32..5) {
            let base = toy_render([0.0, 0.0]);
            let moved = toy_render([dx as f64, dy as f64]);
            for i in 8..56i32 {
                for j in 8..56i32 {
                    let a = (i * 64 + j) as usize;
                    let b = ((i - dy) * 64 + (j - dx)) as usize;
                    for c in 0..3 {
                        prop_assert_eq!(base.uv_image.data()[c * 4096 + a], moved.uv_image.data()[c * 4096 + b]);
                    }
                    prop_assert_eq!(base.coverage[a], moved.coverage[b]);
                }
            }
        }
    }
}
