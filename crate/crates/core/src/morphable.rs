//! Linear 3D morphable face model: container I/O, parameter evaluation and a
//! synthetic toy-model generator.
//!
//! Coordinate convention for posed geometry: `x` right, `y` down, `z` toward
//! the camera, all in source-image pixels after the similarity transform.
//! Model space uses the same axes, so a frontal head has `R1 = I`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};

/// Eyeball rig: vertices that rotate rigidly about `pivot`.
#[derive(Clone, Debug, PartialEq)]
pub struct Eyeball {
    pub indices: Vec<usize>,
    pub pivot: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MorphableModel {
    /// `V×3`
    pub mean_shape: Vec<f64>,
    /// `V×3×Ns`
    pub b_shape: Vec<f64>,
    /// `V×3×Ne`
    pub b_exp: Vec<f64>,
    /// `V×3`, colors in `[0,1]`
    pub mean_texture: Vec<f64>,
    /// `V×3×Nt`
    pub b_tex: Vec<f64>,
    pub triangles: Vec<[usize; 3]>,
    pub uv_coords: Vec<[f64; 2]>,
    pub landmark_indices: Vec<usize>,
    pub eye_left: Eyeball,
    pub eye_right: Eyeball,
    n_shape: usize,
    n_exp: usize,
    n_tex: usize,
}

/// Per-frame tracked state.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    pub theta_shape: Vec<f64>,
    pub theta_exp: Vec<f64>,
    pub theta_tex: Vec<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
    pub head_rotation: Matrix3<f64>,
    pub eye_left_rotation: Matrix3<f64>,
    pub eye_right_rotation: Matrix3<f64>,
}

impl FaceParams {
    /// Zero coefficients, identity rotations, unit scale, zero translation.
    pub fn neutral(model: &MorphableModel) -> Self {
        FaceParams {
            theta_shape: vec![0.0; model.n_shape],
            theta_exp: vec![0.0; model.n_exp],
            theta_tex: vec![0.0; model.n_tex],
            scale: 1.0,
            translation: Vector3::zeros(),
            head_rotation: Matrix3::identity(),
            eye_left_rotation: Matrix3::identity(),
            eye_right_rotation: Matrix3::identity(),
        }
    }

    pub fn validate(&self, model: &MorphableModel) -> Result<()> {
        let dims = [
            ("theta_shape", self.theta_shape.len(), model.n_shape),
            ("theta_exp", self.theta_exp.len(), model.n_exp),
            ("theta_tex", self.theta_tex.len(), model.n_tex),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::InvalidDimensions(format!("{name} has {got} entries, model has {want}")));
            }
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidDimensions(format!("scale must be positive, got {}", self.scale)));
        }
        for (name, r) in [
            ("head_rotation", &self.head_rotation),
            ("eye_left_rotation", &self.eye_left_rotation),
            ("eye_right_rotation", &self.eye_right_rotation),
        ] {
            if !is_rotation(r, 1e-5) {
                return Err(Error::InvalidDimensions(format!("{name} is not a proper rotation")));
            }
        }
        Ok(())
    }
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
    orth <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Serialized per-frame parameter record; rotations are row-major 3×3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParamsRecord {
    pub frame_index: usize,
    pub theta_shape: Vec<f64>,
    pub theta_exp: Vec<f64>,
    pub theta_tex: Vec<f64>,
    pub scale: f64,
    pub translation: [f64; 3],
    pub head_rotation: [[f64; 3]; 3],
    pub eye_left_rotation: [[f64; 3]; 3],
    pub eye_right_rotation: [[f64; 3]; 3],
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

fn from_rows(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
}

impl FaceParamsRecord {
    pub fn from_params(frame_index: usize, p: &FaceParams) -> Self {
        FaceParamsRecord {
            frame_index,
            theta_shape: p.theta_shape.clone(),
            theta_exp: p.theta_exp.clone(),
            theta_tex: p.theta_tex.clone(),
            scale: p.scale,
            translation: [p.translation.x, p.translation.y, p.translation.z],
            head_rotation: rows(&p.head_rotation),
            eye_left_rotation: rows(&p.eye_left_rotation),
            eye_right_rotation: rows(&p.eye_right_rotation),
        }
    }

    pub fn to_params(&self) -> FaceParams {
        FaceParams {
            theta_shape: self.theta_shape.clone(),
            theta_exp: self.theta_exp.clone(),
            theta_tex: self.theta_tex.clone(),
            scale: self.scale,
            translation: Vector3::from(self.translation),
            head_rotation: from_rows(&self.head_rotation),
            eye_left_rotation: from_rows(&self.eye_left_rotation),
            eye_right_rotation: from_rows(&self.eye_right_rotation),
        }
    }
}

impl MorphableModel {
    pub fn n_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn n_shape(&self) -> usize {
        self.n_shape
    }

    pub fn n_exp(&self) -> usize {
        self.n_exp
    }

    pub fn n_tex(&self) -> usize {
        self.n_tex
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmark_indices.len()
    }

    /// One-line summary of the model dimensions.
    pub fn describe(&self) -> String {
        format!(
            "V={} F={} Ns={} Ne={} Nt={} L={} eyes={}+{}",
            self.n_vertices(),
            self.triangles.len(),
            self.n_shape,
            self.n_exp,
            self.n_tex,
            self.n_landmarks(),
            self.eye_left.indices.len(),
            self.eye_right.indices.len()
        )
    }

    pub fn vertex(&self, v: usize) -> Vector3<f64> {
        Vector3::new(self.mean_shape[3 * v], self.mean_shape[3 * v + 1], self.mean_shape[3 * v + 2])
    }

    /// Column `k` of the shape basis at vertex `v`.
    pub fn shape_basis(&self, v: usize, k: usize) -> Vector3<f64> {
        basis_at(&self.b_shape, self.n_shape, v, k)
    }

    pub fn exp_basis(&self, v: usize, k: usize) -> Vector3<f64> {
        basis_at(&self.b_exp, self.n_exp, v, k)
    }

    /// Unposed vertex `v` with the given identity/expression coefficients,
    /// before any eyeball rotation.
    pub fn shaped_vertex(&self, v: usize, theta_shape: &[f64], theta_exp: &[f64]) -> Vector3<f64> {
        let mut p = self.vertex(v);
        for d in 0..3 {
            let row = (3 * v + d) * self.n_shape;
            let mut acc = 0.0;
            for (k, &t) in theta_shape.iter().enumerate() {
                acc += self.b_shape[row + k] * t;
            }
            let row = (3 * v + d) * self.n_exp;
            for (k, &t) in theta_exp.iter().enumerate() {
                acc += self.b_exp[row + k] * t;
            }
            p[d] += acc;
        }
        p
    }

    /// Which eye (0 left, 1 right) a vertex belongs to, if any.
    pub fn eye_of(&self, v: usize) -> Option<usize> {
        if self.eye_left.indices.contains(&v) {
            Some(0)
        } else if self.eye_right.indices.contains(&v) {
            Some(1)
        } else {
            None
        }
    }

    /// The eye vertex farthest along `+z` from its pivot in the mean shape;
    /// the iris is observed at this vertex.
    pub fn eye_forward_vertex(&self, eye: usize) -> Option<usize> {
        let e = if eye == 0 { &self.eye_left } else { &self.eye_right };
        e.indices.iter().copied().max_by(|&a, &b| {
            let za = self.vertex(a).z - e.pivot.z;
            let zb = self.vertex(b).z - e.pivot.z;
            za.total_cmp(&zb).then(b.cmp(&a))
        })
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.n_vertices();
        if self.mean_shape.len() != 3 * v || v == 0 {
            return Err(Error::InvalidModel("mean_shape must be V×3 with V > 0".into()));
        }
        let check_len = |name: &str, len: usize, expect: usize| -> Result<()> {
            if len != expect {
                Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: vec![expect],
                    found: vec![len],
                })
            } else {
                Ok(())
            }
        };
        check_len("b_shape", self.b_shape.len(), v * 3 * self.n_shape)?;
        check_len("b_exp", self.b_exp.len(), v * 3 * self.n_exp)?;
        check_len("mean_texture", self.mean_texture.len(), v * 3)?;
        check_len("b_tex", self.b_tex.len(), v * 3 * self.n_tex)?;
        check_len("uv_coords", self.uv_coords.len(), v)?;
        for tri in &self.triangles {
            for &i in tri {
                if i >= v {
                    return Err(Error::IndexOutOfRange {
                        name: "triangles".into(),
                        index: i as i64,
                        limit: v,
                    });
                }
            }
        }
        for &i in &self.landmark_indices {
            if i >= v {
                return Err(Error::IndexOutOfRange {
                    name: "landmark_indices".into(),
                    index: i as i64,
                    limit: v,
                });
            }
        }
        for (name, eye) in [("eye_left_idx", &self.eye_left), ("eye_right_idx", &self.eye_right)] {
            for &i in &eye.indices {
                if i >= v {
                    return Err(Error::IndexOutOfRange {
                        name: name.into(),
                        index: i as i64,
                        limit: v,
                    });
                }
            }
        }
        if self.eye_left.indices.iter().any(|i| self.eye_right.indices.contains(i)) {
            return Err(Error::InvalidModel("eyeball vertex sets overlap".into()));
        }
        if self
            .uv_coords
            .iter()
            .any(|uv| !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]))
        {
            return Err(Error::InvalidModel("uv_coords outside [0,1]²".into()));
        }
        if self.mean_texture.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidModel("mean_texture outside [0,1]".into()));
        }
        Ok(())
    }

    // ---- container I/O -----------------------------------------------------

    pub fn to_container(&self) -> Container {
        let v = self.n_vertices();
        let f32s = |xs: &[f64]| xs.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let i32s = |xs: &[usize]| xs.iter().map(|&x| x as i32).collect::<Vec<_>>();
        let mut c = Container::new();
        c.insert_f32("mean_shape", &[v, 3], f32s(&self.mean_shape));
        c.insert_f32("b_shape", &[v, 3, self.n_shape], f32s(&self.b_shape));
        c.insert_f32("b_exp", &[v, 3, self.n_exp], f32s(&self.b_exp));
        c.insert_f32("mean_texture", &[v, 3], f32s(&self.mean_texture));
        c.insert_f32("b_tex", &[v, 3, self.n_tex], f32s(&self.b_tex));
        let tris: Vec<usize> = self.triangles.iter().flatten().copied().collect();
        c.insert_i32("triangles", &[self.triangles.len(), 3], i32s(&tris));
        let uvs: Vec<f64> = self.uv_coords.iter().flatten().copied().collect();
        c.insert_f32("uv_coords", &[v, 2], f32s(&uvs));
        c.insert_i32("landmark_indices", &[self.landmark_indices.len()], i32s(&self.landmark_indices));
        for (prefix, eye) in [("eye_left", &self.eye_left), ("eye_right", &self.eye_right)] {
            c.insert_i32(&format!("{prefix}_idx"), &[eye.indices.len()], i32s(&eye.indices));
            c.insert_f32(&format!("{prefix}_pivot"), &[3], f32s(eye.pivot.as_slice()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (shape, mean) = c.f32("mean_shape")?;
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::ShapeMismatch {
                name: "mean_shape".into(),
                expected: vec![shape.first().copied().unwrap_or(0), 3],
                found: shape.to_vec(),
            });
        }
        let v = shape[0];
        let basis = |name: &str| -> Result<(usize, Vec<f64>)> {
            let (s, d) = c.f32(name)?;
            if s.len() != 3 || s[0] != v || s[1] != 3 {
                return Err(Error::ShapeMismatch {
                    name: name.into(),
                    expected: vec![v, 3, s.last().copied().unwrap_or(0)],
                    found: s.to_vec(),
                });
            }
            Ok((s[2], d.iter().map(|&x| x as f64).collect()))
        };
        let exact = |name: &str, expect: &[usize]| -> Result<Vec<f64>> {
            let (s, d) = c.f32(name)?;
            if s != expect {
                return Err(Error::ShapeMismatch {
                    name: name.into(),
                    expected: expect.to_vec(),
                    found: s.to_vec(),
                });
            }
            Ok(d.iter().map(|&x| x as f64).collect())
        };
        let indices = |name: &str, limit: usize| -> Result<(Vec<usize>, Vec<usize>)> {
            let (s, d) = c.i32(name)?;
            let mut out = Vec::with_capacity(d.len());
            for &i in d {
                if i < 0 || i as usize >= limit {
                    return Err(Error::IndexOutOfRange {
                        name: name.into(),
                        index: i as i64,
                        limit,
                    });
                }
                out.push(i as usize);
            }
            Ok((s.to_vec(), out))
        };

        let (n_shape, b_shape) = basis("b_shape")?;
        let (n_exp, b_exp) = basis("b_exp")?;
        let (n_tex, b_tex) = basis("b_tex")?;
        let mean_texture = exact("mean_texture", &[v, 3])?;
        let uv = exact("uv_coords", &[v, 2])?;
        let (tri_shape, tris) = indices("triangles", v)?;
        if tri_shape.len() != 2 || tri_shape[1] != 3 {
            return Err(Error::ShapeMismatch {
                name: "triangles".into(),
                expected: vec![tri_shape.first().copied().unwrap_or(0), 3],
                found: tri_shape,
            });
        }
        let (_, landmarks) = indices("landmark_indices", v)?;
        let eye = |prefix: &str| -> Result<Eyeball> {
            let (_, idx) = indices(&format!("{prefix}_idx"), v)?;
            let p = exact(&format!("{prefix}_pivot"), &[3])?;
            Ok(Eyeball {
                indices: idx,
                pivot: Vector3::new(p[0], p[1], p[2]),
            })
        };
        let model = MorphableModel {
            mean_shape: mean.iter().map(|&x| x as f64).collect(),
            b_shape,
            b_exp,
            mean_texture,
            b_tex,
            triangles: tris.chunks_exact(3).map(|t| [t[0], t[1], t[2]]).collect(),
            uv_coords: uv.chunks_exact(2).map(|p| [p[0], p[1]]).collect(),
            landmark_indices: landmarks,
            eye_left: eye("eye_left")?,
            eye_right: eye("eye_right")?,
            n_shape,
            n_exp,
            n_tex,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_container().write(dir)
    }
}

fn basis_at(b: &[f64], n: usize, v: usize, k: usize) -> Vector3<f64> {
    Vector3::new(b[(3 * v) * n + k], b[(3 * v + 1) * n + k], b[(3 * v + 2) * n + k])
}

/// Loads and validates a model container directory.
pub fn load_model(dir: &Path) -> Result<MorphableModel> {
    MorphableModel::from_container(&Container::read(dir)?)
}

/// Posed vertices `s·(R1·(mean + B_shape θ_shape + B_exp θ_exp) + t)`, with
/// eyeball vertices first rotated about their pivots by `R2`/`R3`.
pub fn evaluate_geometry(model: &MorphableModel, params: &FaceParams) -> Vec<Vector3<f64>> {
    (0..model.n_vertices()).map(|v| posed_vertex(model, params, v)).collect()
}

pub fn posed_vertex(model: &MorphableModel, params: &FaceParams, v: usize) -> Vector3<f64> {
    let mut p = model.shaped_vertex(v, &params.theta_shape, &params.theta_exp);
    match model.eye_of(v) {
        Some(0) => p = model.eye_left.pivot + params.eye_left_rotation * (p - model.eye_left.pivot),
        Some(_) => p = model.eye_right.pivot + params.eye_right_rotation * (p - model.eye_right.pivot),
        None => {}
    }
    params.scale * (params.head_rotation * p + params.translation)
}

/// Posed landmark positions (the model-side prediction compared with `K_tgt`).
pub fn evaluate_landmarks(model: &MorphableModel, params: &FaceParams) -> Vec<Vector3<f64>> {
    model
        .landmark_indices
        .iter()
        .map(|&v| posed_vertex(model, params, v))
        .collect()
}

/// Per-vertex albedo `mean_texture + B_tex θ_tex`, clamped to `[0,1]`.
pub fn evaluate_texture(model: &MorphableModel, theta_tex: &[f64]) -> Result<Vec<[f64; 3]>> {
    if theta_tex.len() != model.n_tex {
        return Err(Error::InvalidDimensions(format!(
            "theta_tex has {} entries, model has {}",
            theta_tex.len(),
            model.n_tex
        )));
    }
    let n = model.n_tex;
    Ok((0..model.n_vertices())
        .map(|v| {
            let mut c = [0.0; 3];
            for (d, out) in c.iter_mut().enumerate() {
                let row = (3 * v + d) * n;
                let mut acc = model.mean_texture[3 * v + d];
                for (k, &t) in theta_tex.iter().enumerate() {
                    acc += model.b_tex[row + k] * t;
                }
                *out = acc.clamp(0.0, 1.0);
            }
            c
        })
        .collect())
}

// ---- synthetic toy model ------------------------------------------------------

/// Ellipsoid semi-axes of the toy head, model units.
pub const TOY_HEAD_AXES: [f64; 3] = [0.8, 1.0, 0.85];
const EYE_RADIUS: f64 = 0.12;
const EYE_ROWS: usize = 3;
const EYE_COLS: usize = 6;
/// Largest displacement a unit-norm coefficient vector may cause, as a
/// fraction of head diameter.
const BASIS_BOUND: f64 = 0.05;

struct Mesh {
    verts: Vec<Vector3<f64>>,
    uvs: Vec<[f64; 2]>,
    tris: Vec<[usize; 3]>,
}

fn ellipsoid_uv(p: &Vector3<f64>) -> [f64; 2] {
    let [ax, ay, az] = TOY_HEAD_AXES;
    let q = Vector3::new(p.x / ax, p.y / ay, p.z / az);
    let r = q.norm().max(1e-12);
    let theta = (-q.y / r).clamp(-1.0, 1.0).acos();
    let phi = q.x.atan2(q.z);
    [(0.5 + phi / (2.0 * PI)).clamp(0.0, 1.0), (theta / PI).clamp(0.0, 1.0)]
}

/// Latitude/longitude sphere with a duplicated seam column at the back.
fn uv_sphere(rows: usize, cols: usize, center: Vector3<f64>, axes: [f64; 3], seam_uv: bool) -> Mesh {
    let mut verts = Vec::new();
    let mut uvs = Vec::new();
    let point = |theta: f64, phi: f64| {
        center + Vector3::new(axes[0] * theta.sin() * phi.sin(), -axes[1] * theta.cos(), axes[2] * theta.sin() * phi.cos())
    };
    verts.push(point(0.0, 0.0));
    uvs.push([0.5, 0.0]);
    for r in 0..rows {
        let theta = PI * (r + 1) as f64 / (rows + 1) as f64;
        for c in 0..=cols {
            let phi = -PI + 2.0 * PI * c as f64 / cols as f64;
            verts.push(point(theta, phi));
            uvs.push(if seam_uv {
                [c as f64 / cols as f64, theta / PI]
            } else {
                [0.0, 0.0]
            });
        }
    }
    verts.push(point(PI, 0.0));
    uvs.push([0.5, 1.0]);
    let last = verts.len() - 1;
    let ring = |r: usize, c: usize| 1 + r * (cols + 1) + c;
    let mut tris = Vec::new();
    for c in 0..cols {
        tris.push([0, ring(0, c), ring(0, c + 1)]);
        tris.push([last, ring(rows - 1, c + 1), ring(rows - 1, c)]);
    }
    for r in 0..rows - 1 {
        for c in 0..cols {
            let (a, b, cc, d) = (ring(r, c), ring(r, c + 1), ring(r + 1, c), ring(r + 1, c + 1));
            tris.push([a, cc, b]);
            tris.push([b, cc, d]);
        }
    }
    // orient outward
    for t in tris.iter_mut() {
        let (a, b, c) = (verts[t[0]], verts[t[1]], verts[t[2]]);
        let n = (b - a).cross(&(c - a));
        let centroid = (a + b + c) / 3.0 - center;
        if n.dot(&centroid) < 0.0 {
            t.swap(1, 2);
        }
    }
    Mesh { verts, uvs, tris }
}

/// Random smooth scalar field on model space: a short sum of sinusoids.
struct SmoothField {
    waves: Vec<(Vector3<f64>, f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, waves: usize, max_freq: f64) -> Self {
        SmoothField {
            waves: (0..waves)
                .map(|_| {
                    let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    let freq = rng.random_range(0.5..max_freq);
                    (dir.normalize() * freq, rng.random_range(0.0..2.0 * PI), rng.random_range(-1.0..1.0))
                })
                .collect(),
        }
    }

    fn eval(&self, p: &Vector3<f64>) -> f64 {
        self.waves.iter().map(|(w, ph, a)| a * (w.dot(p) + ph).sin()).sum()
    }
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

fn landmark_rows(b: &[f64], n: usize, landmarks: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(3 * landmarks.len(), n, |r, k| b[(3 * landmarks[r / 3] + r % 3) * n + k])
}

/// Subtracts from each basis field the infinitesimal similarity motion
/// (translation, rotation, uniform scale) that best explains it at the
/// landmarks.
fn remove_similarity_modes(b: &mut [f64], n: usize, verts: &[Vector3<f64>], landmarks: &[usize], deformable: &[usize]) {
    if n == 0 || 3 * landmarks.len() < 7 {
        return;
    }
    let modes = |p: &Vector3<f64>| -> [Vector3<f64>; 7] {
        [
            Vector3::x(),
            Vector3::y(),
            Vector3::z(),
            Vector3::x().cross(p),
            Vector3::y().cross(p),
            Vector3::z().cross(p),
            *p,
        ]
    };
    let g = DMatrix::from_fn(3 * landmarks.len(), 7, |r, c| modes(&verts[landmarks[r / 3]])[c][r % 3]);
    let Ok(coef) = g.svd(true, true).solve(&landmark_rows(b, n, landmarks), 1e-12) else {
        return;
    };
    for &i in deformable {
        let m = modes(&verts[i]);
        for k in 0..n {
            let disp: Vector3<f64> = (0..7).map(|c| m[c] * coef[(c, k)]).sum();
            for d in 0..3 {
                b[(3 * i + d) * n + k] -= disp[d];
            }
        }
    }
}

/// Mixes basis columns so their landmark rows become orthonormal, after
/// projecting out the span of `prior`'s landmark rows.
fn whiten_on_landmarks(b: &mut [f64], n: usize, landmarks: &[usize], prior: Option<(&[f64], usize)>) {
    if n == 0 || 3 * landmarks.len() < n + prior.map_or(0, |p| p.1) {
        return;
    }
    let v = b.len() / (3 * n);
    if let Some((pb, pn)) = prior.filter(|p| p.1 > 0) {
        let p = landmark_rows(pb, pn, landmarks);
        let Ok(coef) = p.svd(true, true).solve(&landmark_rows(b, n, landmarks), 1e-12) else {
            return;
        };
        for row in 0..3 * v {
            for k in 0..n {
                let s: f64 = (0..pn).map(|j| pb[row * pn + j] * coef[(j, k)]).sum();
                b[row * n + k] -= s;
            }
        }
    }
    let a = landmark_rows(b, n, landmarks);
    let eig = (a.transpose() * &a).symmetric_eigen();
    let top = eig.eigenvalues.max();
    if eig.eigenvalues.min() <= 1e-10 * top {
        return;
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt()));
    let m = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    for row in 0..3 * v {
        let r = DMatrix::from_row_slice(1, n, &b[row * n..(row + 1) * n]) * &m;
        b[row * n..(row + 1) * n].copy_from_slice(r.as_slice());
    }
}

/// Scales so that `‖Σ θ_k B_k(v)‖ ≤ 5% of the head diameter` for unit-norm
/// `θ`, using `‖Σ θ_k B_k(v)‖ ≤ ‖θ‖·sqrt(Σ_k ‖B_k(v)‖²)`.
fn bound_and_quantize(b: Vec<f64>, n: usize, v: usize, diameter: f64) -> Vec<f64> {
    let worst = (0..v)
        .map(|i| (0..3 * n).map(|j| b[3 * i * n + j].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let s = if worst > 0.0 { BASIS_BOUND * diameter / worst } else { 0.0 };
    b.iter().map(|x| quantize(x * s)).collect()
}

/// Deterministic synthetic model: ellipsoid head, two eyeballs, smooth
/// random bases bounded so that unit-norm coefficients displace any vertex by
/// at most 5% of the head diameter. All values are exactly representable in
/// float32 so container round-trips are bit-exact.
pub fn synth_toy_model(seed: u64, v: usize, ns: usize, ne: usize, nt: usize, l: usize) -> Result<MorphableModel> {
    if v < 4 {
        return Err(Error::InvalidDimensions(format!("need at least 4 vertices, got {v}")));
    }
    if l > v {
        return Err(Error::InvalidDimensions(format!("{l} landmarks requested for {v} vertices")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [ax, ay, az] = TOY_HEAD_AXES;

    let eye_verts = EYE_ROWS * (EYE_COLS + 1) + 2;
    let with_eyes = v >= 4 * eye_verts + 10;
    let head_budget = if with_eyes { v - 2 * eye_verts } else { v };

    let mut mesh = if head_budget >= 10 {
        // rows·(cols+1) + 2 ≤ head_budget, with cols ≈ 2·rows
        let mut rows = (((head_budget - 2) as f64 / 2.0).sqrt()).round().max(2.0) as usize;
        let mut cols = ((head_budget - 2) / rows).saturating_sub(1);
        while cols < 3 {
            rows -= 1;
            cols = ((head_budget - 2) / rows).saturating_sub(1);
        }
        uv_sphere(rows, cols, Vector3::zeros(), TOY_HEAD_AXES, true)
    } else {
        let verts = vec![
            Vector3::new(0.0, -ay, 0.0),
            Vector3::new(ax, ay / 3.0, 0.0),
            Vector3::new(-ax / 2.0, ay / 3.0, az),
            Vector3::new(-ax / 2.0, ay / 3.0, -az),
        ];
        let uvs = verts.iter().map(ellipsoid_uv).collect();
        let mut tris = vec![[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]];
        for t in tris.iter_mut() {
            let n = (verts[t[1]] - verts[t[0]]).cross(&(verts[t[2]] - verts[t[0]]));
            if n.dot(&((verts[t[0]] + verts[t[1]] + verts[t[2]]) / 3.0)) < 0.0 {
                t.swap(1, 2);
            }
        }
        Mesh { verts, uvs, tris }
    };
    let head_count = mesh.verts.len();

    let mut eyes = Vec::new();
    if with_eyes {
        for side in [-1.0, 1.0] {
            // pivot sits so that the eyeball front pokes out of the ellipsoid
            let (ex, ey) = (0.32 * side, -0.12);
            let surface_z = az * (1.0 - (ex / ax).powi(2) - (ey / ay).powi(2)).sqrt();
            let pivot = Vector3::new(ex, ey, surface_z - 0.6 * EYE_RADIUS);
            let mut eye = uv_sphere(EYE_ROWS, EYE_COLS, Vector3::zeros(), [EYE_RADIUS; 3], false);
            // rotate the pole axis from -y onto +z so vertex 0 faces the camera
            for p in eye.verts.iter_mut() {
                *p = pivot + Vector3::new(p.x, p.z, -p.y);
            }
            let base = mesh.verts.len();
            let indices: Vec<usize> = (base..base + eye.verts.len()).collect();
            mesh.uvs.extend(eye.verts.iter().map(ellipsoid_uv));
            mesh.verts.extend(eye.verts.iter().copied());
            mesh.tris.extend(eye.tris.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
            eyes.push(Eyeball { indices, pivot });
        }
    }
    // unreferenced filler vertices at the back of the head
    while mesh.verts.len() < v {
        let p = Vector3::new(0.0, 0.0, -az);
        mesh.uvs.push(ellipsoid_uv(&p));
        mesh.verts.push(p);
    }
    let eye_left = eyes.first().cloned().unwrap_or(Eyeball {
        indices: vec![],
        pivot: Vector3::zeros(),
    });
    let eye_right = eyes.get(1).cloned().unwrap_or(Eyeball {
        indices: vec![],
        pivot: Vector3::zeros(),
    });
    let is_eye = |i: usize| eye_left.indices.contains(&i) || eye_right.indices.contains(&i);

    // landmarks: farthest-point sampling over frontal head vertices
    let mut candidates: Vec<usize> = (0..head_count).filter(|&i| mesh.verts[i].z > 0.35 * az).collect();
    if candidates.len() < l {
        candidates = (0..head_count).collect();
    }
    if candidates.len() < l {
        candidates = (0..v).collect();
    }
    let mut landmarks: Vec<usize> = Vec::with_capacity(l);
    if l > 0 {
        let start = *candidates
            .iter()
            .max_by(|&&a, &&b| mesh.verts[a].z.total_cmp(&mesh.verts[b].z).then(b.cmp(&a)))
            .expect("candidates non-empty");
        landmarks.push(start);
        let mut dist: Vec<f64> = candidates.iter().map(|&c| (mesh.verts[c] - mesh.verts[start]).norm()).collect();
        while landmarks.len() < l {
            let (best, _) = dist
                .iter()
                .enumerate()
                .filter(|(i, _)| !landmarks.contains(&candidates[*i]))
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("enough candidates");
            let chosen = candidates[best];
            landmarks.push(chosen);
            for (i, &c) in candidates.iter().enumerate() {
                dist[i] = dist[i].min((mesh.verts[c] - mesh.verts[chosen]).norm());
            }
        }
    }

    let raw_basis = |rng: &mut ChaCha8Rng, n: usize, frontal: bool| -> Vec<f64> {
        let fields: Vec<[SmoothField; 3]> = (0..n)
            .map(|_| {
                [
                    SmoothField::new(rng, 4, 3.5),
                    SmoothField::new(rng, 4, 3.5),
                    SmoothField::new(rng, 4, 3.5),
                ]
            })
            .collect();
        let mut b = vec![0.0; v * 3 * n];
        for (i, p) in mesh.verts.iter().enumerate() {
            if is_eye(i) || i >= head_count {
                continue;
            }
            // expressions live on the front of the face
            let weight = if frontal { (0.5 + 0.5 * p.z / az).clamp(0.0, 1.0).powi(2) } else { 1.0 };
            for (k, f) in fields.iter().enumerate() {
                for d in 0..3 {
                    b[(3 * i + d) * n + k] = weight * f[d].eval(p);
                }
            }
        }
        b
    };
    let deformable: Vec<usize> = (0..head_count).filter(|&i| !is_eye(i)).collect();
    let mut b_shape = raw_basis(&mut rng, ns, false);
    let mut b_exp = raw_basis(&mut rng, ne, true);
    // Condition the landmark rows: no overlap with rigid motion, shape and
    // expression mutually orthogonal, each whitened.
    remove_similarity_modes(&mut b_shape, ns, &mesh.verts, &landmarks, &deformable);
    remove_similarity_modes(&mut b_exp, ne, &mesh.verts, &landmarks, &deformable);
    whiten_on_landmarks(&mut b_shape, ns, &landmarks, None);
    whiten_on_landmarks(&mut b_exp, ne, &landmarks, Some((&b_shape, ns)));
    let b_shape = bound_and_quantize(b_shape, ns, v, 2.0 * ay);
    let b_exp = bound_and_quantize(b_exp, ne, v, 2.0 * ay);

    // albedo: skin with smooth variation, white eyeballs with a dark iris
    let tint = [SmoothField::new(&mut rng, 3, 2.0), SmoothField::new(&mut rng, 3, 2.0)];
    let mut mean_texture = vec![0.0; 3 * v];
    for (i, p) in mesh.verts.iter().enumerate() {
        let c = if let Some(eye) = [&eye_left, &eye_right].into_iter().find(|e| e.indices.contains(&i)) {
            let dir = (p - eye.pivot).normalize();
            if dir.z > 0.8 {
                [0.15, 0.25, 0.45]
            } else {
                [0.95, 0.95, 0.92]
            }
        } else {
            let t0 = 0.08 * tint[0].eval(p);
            let t1 = 0.05 * tint[1].eval(p);
            [0.78 + t0, 0.58 + t0 * 0.5 + t1, 0.48 + t1]
        };
        for d in 0..3 {
            mean_texture[3 * i + d] = quantize(c[d].clamp(0.02, 0.98));
        }
    }
    let tex_fields: Vec<[SmoothField; 3]> = (0..nt)
        .map(|_| {
            [
                SmoothField::new(&mut rng, 3, 3.0),
                SmoothField::new(&mut rng, 3, 3.0),
                SmoothField::new(&mut rng, 3, 3.0),
            ]
        })
        .collect();
    let mut b_tex = vec![0.0; v * 3 * nt];
    for (i, p) in mesh.verts.iter().enumerate() {
        for (k, f) in tex_fields.iter().enumerate() {
            for d in 0..3 {
                b_tex[(3 * i + d) * nt + k] = quantize(0.04 * f[d].eval(p));
            }
        }
    }

    let model = MorphableModel {
        mean_shape: mesh.verts.iter().flat_map(|p| [p.x, p.y, p.z]).map(quantize).collect(),
        b_shape,
        b_exp,
        mean_texture,
        b_tex,
        triangles: mesh.tris,
        uv_coords: mesh.uvs.iter().map(|uv| [quantize(uv[0]), quantize(uv[1])]).collect(),
        landmark_indices: landmarks,
        eye_left: Eyeball {
            pivot: eye_left.pivot.map(quantize),
            ..eye_left
        },
        eye_right: Eyeball {
            pivot: eye_right.pivot.map(quantize),
            ..eye_right
        },
        n_shape: ns,
        n_exp: ne,
        n_tex: nt,
    };
    model.validate()?;
    Ok(model)
}

/// Rotation about the model `y` axis (yaw), radians.
pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation about the model `x` axis (pitch), radians.
pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Rotation about the model `z` axis (roll), radians.
pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy() -> MorphableModel {
        synth_toy_model(1, 502, 20, 10, 10, 68).unwrap()
    }

    fn random_params(model: &MorphableModel, seed: u64) -> FaceParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = FaceParams::neutral(model);
        p.theta_shape.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
        p.theta_exp.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
        p.scale = rng.random_range(10.0..60.0);
        p.translation = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        p.head_rotation = rot_y(rng.random_range(-0.5..0.5)) * rot_x(rng.random_range(-0.3..0.3)) * rot_z(0.1);
        p.eye_left_rotation = rot_y(0.2);
        p.eye_right_rotation = rot_x(-0.1);
        p
    }

    #[test]
    fn toy_model_passes_invariants() {
        let m = toy();
        m.validate().unwrap();
        assert_eq!(m.n_vertices(), 502);
        assert_eq!(m.n_landmarks(), 68);
        assert!(!m.eye_left.indices.is_empty() && !m.eye_right.indices.is_empty());
        for &l in &m.landmark_indices {
            assert!(m.eye_of(l).is_none());
        }
    }

    #[test]
    fn toy_model_is_deterministic() {
        assert_eq!(toy(), toy());
        assert_ne!(toy().b_shape, synth_toy_model(2, 502, 20, 10, 10, 68).unwrap().b_shape);
    }

    #[test]
    fn toy_model_rejects_bad_dimensions() {
        assert!(synth_toy_model(1, 10, 2, 2, 2, 11).is_err());
        assert!(synth_toy_model(1, 3, 2, 2, 2, 1).is_err());
        synth_toy_model(1, 4, 2, 2, 2, 4).unwrap().validate().unwrap();
        synth_toy_model(1, 40, 2, 2, 2, 10).unwrap().validate().unwrap();
    }

    #[test]
    fn basis_displacement_is_bounded() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut theta: Vec<f64> = (0..m.n_shape()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
            theta.iter_mut().for_each(|t| *t /= n);
            let zero_exp = vec![0.0; m.n_exp()];
            for v in 0..m.n_vertices() {
                let d = (m.shaped_vertex(v, &theta, &zero_exp) - m.vertex(v)).norm();
                assert!(d <= 0.05 * 2.0 * TOY_HEAD_AXES[1] + 1e-6);
            }
        }
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy();
        m.save(dir.path()).unwrap();
        assert_eq!(load_model(dir.path()).unwrap(), m);
    }

    #[test]
    fn container_errors_are_distinct() {
        let m = toy();
        let mut c = m.to_container();
        let v = m.n_vertices();
        // triangle index V+3
        let (_, tris) = c.i32("triangles").unwrap();
        let mut tris = tris.to_vec();
        tris[0] = (v + 3) as i32;
        c.insert_i32("triangles", &[m.triangles.len(), 3], tris);
        assert!(matches!(MorphableModel::from_container(&c), Err(Error::IndexOutOfRange { .. })));

        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        // manifest says Ns=20, file only holds Ns=19
        std::fs::write(dir.path().join("b_shape.bin"), vec![0u8; v * 3 * 19 * 4]).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::ShapeMismatch { .. })));

        let mut c = m.to_container();
        let mut stripped = Container::new();
        for name in c.names().filter(|n| *n != "b_exp").map(str::to_string).collect::<Vec<_>>() {
            let a = c.get(&name).unwrap().clone();
            match a.data {
                crate::container::ArrayData::F32(d) => stripped.insert_f32(&name, &a.shape, d),
                crate::container::ArrayData::I32(d) => stripped.insert_i32(&name, &a.shape, d),
            }
        }
        c = stripped;
        assert!(matches!(MorphableModel::from_container(&c), Err(Error::MissingArray(n)) if n == "b_exp"));
    }

    #[test]
    fn identity_and_scaling_cases() {
        let m = toy();
        let mut p = FaceParams::neutral(&m);
        let g = evaluate_geometry(&m, &p);
        for (v, q) in g.iter().enumerate() {
            assert_eq!(*q, m.vertex(v));
        }
        p.scale = 2.0;
        let g = evaluate_geometry(&m, &p);
        for (v, q) in g.iter().enumerate() {
            assert_eq!(*q, 2.0 * m.vertex(v));
        }
    }

    /// Independent per-vertex loop over the raw arrays.
    fn brute_force_geometry(m: &MorphableModel, p: &FaceParams) -> Vec<Vector3<f64>> {
        let (ns, ne) = (m.n_shape(), m.n_exp());
        let mut out = Vec::new();
        for v in 0..m.n_vertices() {
            let mut q = [0.0; 3];
            for d in 0..3 {
                q[d] = m.mean_shape[3 * v + d];
                for k in 0..ns {
                    q[d] += m.b_shape[(v * 3 + d) * ns + k] * p.theta_shape[k];
                }
                for k in 0..ne {
                    q[d] += m.b_exp[(v * 3 + d) * ne + k] * p.theta_exp[k];
                }
            }
            let mut q = Vector3::from(q);
            if m.eye_left.indices.contains(&v) {
                q = m.eye_left.pivot + p.eye_left_rotation * (q - m.eye_left.pivot);
            }
            if m.eye_right.indices.contains(&v) {
                q = m.eye_right.pivot + p.eye_right_rotation * (q - m.eye_right.pivot);
            }
            out.push(p.scale * (p.head_rotation * q + p.translation));
        }
        out
    }

    #[test]
    fn geometry_matches_brute_force() {
        let m = toy();
        for seed in 0..5 {
            let p = random_params(&m, seed);
            let fast = evaluate_geometry(&m, &p);
            let slow = brute_force_geometry(&m, &p);
            let worst = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs().max()).fold(0.0, f64::max);
            assert!(worst <= 1e-6, "max abs diff {worst}");
        }
    }

    #[test]
    fn texture_cases() {
        let m = toy();
        let zero = vec![0.0; m.n_tex()];
        let t = evaluate_texture(&m, &zero).unwrap();
        for (v, c) in t.iter().enumerate() {
            for d in 0..3 {
                assert_eq!(c[d], m.mean_texture[3 * v + d]);
            }
        }
        // drive vertex 5, channel 0 to 1.7
        let k = (0..m.n_tex()).max_by(|&a, &b| m.b_tex[15 * m.n_tex() + a].abs().total_cmp(&m.b_tex[15 * m.n_tex() + b].abs())).unwrap();
        let coeff = m.b_tex[15 * m.n_tex() + k];
        let mut theta = zero.clone();
        theta[k] = (1.7 - m.mean_texture[15]) / coeff;
        let t = evaluate_texture(&m, &theta).unwrap();
        assert_eq!(t[5][0], 1.0);
        assert!(evaluate_texture(&m, &[0.0; 3]).is_err());

        // brute-force oracle
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta: Vec<f64> = (0..m.n_tex()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = evaluate_texture(&m, &theta).unwrap();
        for v in 0..m.n_vertices() {
            for d in 0..3 {
                let mut acc = m.mean_texture[3 * v + d];
                for kk in 0..m.n_tex() {
                    acc += m.b_tex[(v * 3 + d) * m.n_tex() + kk] * theta[kk];
                }
                assert!((fast[v][d] - acc.clamp(0.0, 1.0)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn params_record_roundtrip() {
        let m = toy();
        let p = random_params(&m, 4);
        let rec = FaceParamsRecord::from_params(7, &p);
        let json = serde_json::to_string(&rec).unwrap();
        let back: FaceParamsRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_params(), p);
        p.validate(&m).unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn geometry_is_linear_in_coefficients(seed in 0u64..1000) {
            let m = toy();
            let base = random_params(&m, seed);
            let mut a = base.clone();
            let mut b = base.clone();
            let mut ab = base.clone();
            let mut zero = base.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
            for k in 0..m.n_shape() {
                a.theta_shape[k] = rng.random_range(-1.0..1.0);
                b.theta_shape[k] = rng.random_range(-1.0..1.0);
                ab.theta_shape[k] = a.theta_shape[k] + b.theta_shape[k];
                zero.theta_shape[k] = 0.0;
            }
            for k in 0..m.n_exp() {
                a.theta_exp[k] = rng.random_range(-1.0..1.0);
                b.theta_exp[k] = rng.random_range(-1.0..1.0);
                ab.theta_exp[k] = a.theta_exp[k] + b.theta_exp[k];
                zero.theta_exp[k] = 0.0;
            }
            let (fa, fb, fab, f0) = (evaluate_geometry(&m, &a), evaluate_geometry(&m, &b), evaluate_geometry(&m, &ab), evaluate_geometry(&m, &zero));
            for v in 0..m.n_vertices() {
                let lhs = fa[v] + fb[v] - f0[v];
                prop_assert!((lhs - fab[v]).abs().max() <= 1e-6 * (1.0 + fab[v].abs().max()));
            }
        }

        #[test]
        fn extra_head_rotation_rotates_non_eye_vertices(seed in 0u64..1000, angle in -1.0f64..1.0) {
            let m = toy();
            let p = random_params(&m, seed);
            let q = rot_y(angle) * rot_x(angle * 0.5);
            let mut rotated = p.clone();
            rotated.head_rotation = q * p.head_rotation;
            rotated.translation = q * p.translation;
            let (g0, g1) = (evaluate_geometry(&m, &p), evaluate_geometry(&m, &rotated));
            for v in 0..m.n_vertices() {
                if m.eye_of(v).is_none() {
                    prop_assert!((q * g0[v] - g1[v]).abs().max() <= 1e-9 * (1.0 + g1[v].abs().max()));
                }
            }
        }
    }
}
