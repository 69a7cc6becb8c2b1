//! Landmark-driven morphable-model tracking.
//!
//! Each frame alternates a closed-form similarity fit of the model landmarks
//! onto the detected ones with a damped linear least-squares update of the
//! expression (and, on the first frame, identity) coefficients.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::imaging::sample_bilinear;
use crate::morphable::{evaluate_geometry, posed_vertex, rot_x, rot_y, FaceParams, MorphableModel};
use crate::raster::{rasterize_frame, vertex_normals, Lighting, RenderMode};
use crate::tensor::Tensor;

/// Detected landmarks for one frame, in source-image pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkFrame {
    #[serde(skip)]
    pub frame_index: usize,
    /// `L×3`: pixel x, pixel y, depth toward the camera in pixel units.
    pub points: Vec<[f64; 3]>,
    /// Left and right iris centers, when detected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iris: Option<[[f64; 3]; 2]>,
}

impl LandmarkFrame {
    pub fn read(path: &Path, frame_index: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut f: LandmarkFrame = serde_json::from_str(&text).map_err(|e| Error::format("landmarks", path, e))?;
        f.frame_index = frame_index;
        Ok(f)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self).expect("landmarks serialize").as_bytes())
    }

    pub fn xy(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| [p[0], p[1]]).collect()
    }

    fn targets(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| Vector3::from(*p)).collect()
    }
}

/// Landmarks (and iris points, when the model has eyeballs) a perfect
/// detector would report for `params`.
pub fn synthesize_landmarks(model: &MorphableModel, params: &FaceParams, frame_index: usize) -> LandmarkFrame {
    let points = model
        .landmark_indices
        .iter()
        .map(|&v| {
            let p = posed_vertex(model, params, v);
            [p.x, p.y, p.z]
        })
        .collect();
    let iris = match (model.eye_forward_vertex(0), model.eye_forward_vertex(1)) {
        (Some(l), Some(r)) => {
            let (a, b) = (posed_vertex(model, params, l), posed_vertex(model, params, r));
            Some([[a.x, a.y, a.z], [b.x, b.y, b.z]])
        }
        _ => None,
    };
    LandmarkFrame {
        frame_index,
        points,
        iris,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    /// Similarity/coefficient alternations per frame.
    pub iterations: usize,
    /// Tikhonov weight; `None` uses `1e-3·trace(AᵀA)/N`.
    pub damping: Option<f64>,
    /// Exponential smoothing factor for scale and translation across frames.
    pub smoothing: Option<f64>,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            iterations: 3,
            damping: None,
            smoothing: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub params: FaceParams,
    /// Root-mean-square landmark distance, pixels.
    pub residual_rms: f64,
    pub iterations_used: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    /// Model units: `target ≈ scale·(rotation·source + translation)`.
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p + self.translation)
    }
}

fn centroid(pts: &[Vector3<f64>]) -> Vector3<f64> {
    pts.iter().sum::<Vector3<f64>>() / pts.len() as f64
}

/// Closed-form least-squares similarity mapping `src` onto `tgt`.
///
/// Rotation from the SVD of the centered cross-covariance with a determinant
/// correction; scale is the least-squares ratio `Σ y·Rx / Σ‖x‖²` of centered
/// points; translation matches the centroids.
pub fn solve_similarity(src: &[Vector3<f64>], tgt: &[Vector3<f64>]) -> Result<Similarity> {
    assert_eq!(src.len(), tgt.len(), "point sets differ in length");
    if src.len() < 3 {
        return Err(Error::TooFewPoints(src.len()));
    }
    let (mx, my) = (centroid(src), centroid(tgt));
    let mut sxx = Matrix3::zeros();
    let mut cov = Matrix3::zeros();
    let mut norm_x = 0.0;
    for (x, y) in src.iter().zip(tgt) {
        let (xc, yc) = (x - mx, y - my);
        sxx += xc * xc.transpose();
        cov += yc * xc.transpose();
        norm_x += xc.norm_squared();
    }
    let eig = sxx.symmetric_eigenvalues();
    let top = eig.amax();
    let rank = eig.iter().filter(|&&e| e > 1e-12 * top.max(f64::MIN_POSITIVE)).count();
    if top <= 0.0 || rank < 2 {
        return Err(Error::DegenerateConfiguration { rank });
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let d = (u * vt).determinant().signum();
    let rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    let mut num = 0.0;
    for (x, y) in src.iter().zip(tgt) {
        num += (y - my).dot(&(rotation * (x - mx)));
    }
    let scale = num / norm_x;
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::DegenerateConfiguration { rank });
    }
    let translation = my / scale - rotation * mx;
    Ok(Similarity {
        rotation,
        translation,
        scale,
    })
}

/// Solves `(AᵀA + λI) x = Aᵀb` with an LDLᵀ factorization.
pub fn damped_least_squares(a: &DMatrix<f64>, b: &DVector<f64>, damping: f64) -> Result<DVector<f64>> {
    let mut m = a.transpose() * a;
    for i in 0..m.nrows() {
        m[(i, i)] += damping;
    }
    ldlt_solve(&m, &(a.transpose() * b))
}

/// Default Tikhonov weight for a design matrix: `1e-3·trace(AᵀA)/N`.
pub fn auto_damping(a: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 {
        return 0.0;
    }
    1e-3 * a.norm_squared() / a.ncols() as f64
}

/// Solves `M x = r` for symmetric positive-definite `M` via `M = L D Lᵀ`.
pub fn ldlt_solve(m: &DMatrix<f64>, r: &DVector<f64>) -> Result<DVector<f64>> {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::identity(n, n);
    let mut d = vec![0.0; n];
    let max_diag = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    for j in 0..n {
        let mut dj = m[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * d[k];
        }
        if dj.is_nan() || dj <= 1e-14 * max_diag {
            return Err(Error::SingularSystem);
        }
        d[j] = dj;
        for i in j + 1..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)] * d[k];
            }
            l[(i, j)] = v / dj;
        }
    }
    let mut y = r.clone();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[(i, k)] * y[k];
        }
    }
    for i in 0..n {
        y[i] /= d[i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[(k, i)] * y[k];
        }
    }
    Ok(y)
}

/// Model-space landmark positions (identity, expression and eyeball
/// rotation applied; no head transform).
fn model_landmarks(model: &MorphableModel, p: &FaceParams) -> Vec<Vector3<f64>> {
    let unposed = FaceParams {
        scale: 1.0,
        translation: Vector3::zeros(),
        head_rotation: Matrix3::identity(),
        ..p.clone()
    };
    model
        .landmark_indices
        .iter()
        .map(|&v| posed_vertex(model, &unposed, v))
        .collect()
}

/// Root-mean-square distance between posed model landmarks and `tgt`.
pub fn landmark_residual(model: &MorphableModel, p: &FaceParams, tgt: &[[f64; 3]]) -> f64 {
    if tgt.is_empty() {
        return 0.0;
    }
    let sq: f64 = model
        .landmark_indices
        .iter()
        .zip(tgt)
        .map(|(&v, t)| (posed_vertex(model, p, v) - Vector3::from(*t)).norm_squared())
        .sum();
    (sq / tgt.len() as f64).sqrt()
}

/// Jacobian of the posed landmarks w.r.t. `[θ_shape?, θ_exp]`, `3L × N`.
fn landmark_jacobian(model: &MorphableModel, p: &FaceParams, with_shape: bool) -> DMatrix<f64> {
    let (ns, ne) = (model.n_shape(), model.n_exp());
    let cols = if with_shape { ns + ne } else { ne };
    let l = model.n_landmarks();
    let mut a = DMatrix::zeros(3 * l, cols);
    for (row, &v) in model.landmark_indices.iter().enumerate() {
        let lin = match model.eye_of(v) {
            Some(0) => p.scale * p.head_rotation * p.eye_left_rotation,
            Some(_) => p.scale * p.head_rotation * p.eye_right_rotation,
            None => p.scale * p.head_rotation,
        };
        let mut put = |col: usize, b: Vector3<f64>| {
            let q = lin * b;
            for d in 0..3 {
                a[(3 * row + d, col)] = q[d];
            }
        };
        let mut col = 0;
        if with_shape {
            for k in 0..ns {
                put(col, model.shape_basis(v, k));
                col += 1;
            }
        }
        for k in 0..ne {
            put(col, model.exp_basis(v, k));
            col += 1;
        }
    }
    a
}

/// Coefficient increments `(δθ_shape, δθ_exp)` for the current pose. When
/// `with_shape` is false the identity coefficients are held fixed and the
/// returned shape increment is all zeros.
pub fn solve_coefficients(
    model: &MorphableModel,
    tgt: &[[f64; 3]],
    params: &FaceParams,
    damping: Option<f64>,
    with_shape: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_landmark_count(model, tgt)?;
    let a = landmark_jacobian(model, params, with_shape);
    let mut b = DVector::zeros(3 * tgt.len());
    for (row, (&v, t)) in model.landmark_indices.iter().zip(tgt).enumerate() {
        let r = Vector3::from(*t) - posed_vertex(model, params, v);
        for d in 0..3 {
            b[3 * row + d] = r[d];
        }
    }
    let lambda = damping.unwrap_or_else(|| auto_damping(&a));
    let x = damped_least_squares(&a, &b, lambda)?;
    let ns = if with_shape { model.n_shape() } else { 0 };
    let mut ds = vec![0.0; model.n_shape()];
    ds[..ns].copy_from_slice(&x.as_slice()[..ns]);
    Ok((ds, x.as_slice()[ns..].to_vec()))
}

fn check_landmark_count(model: &MorphableModel, tgt: &[[f64; 3]]) -> Result<()> {
    if tgt.len() != model.n_landmarks() {
        return Err(Error::ShapeMismatch {
            name: "landmarks".into(),
            expected: vec![model.n_landmarks(), 3],
            found: vec![tgt.len(), 3],
        });
    }
    Ok(())
}

/// Vertices seen at grazing angles sample silhouette pixels; the texture
/// solve ignores those with `n·ẑ` below this, and ignores the small
/// high-contrast eyeballs.
pub const MIN_FACING: f64 = 0.5;

/// Texture coefficients from one source-pixel-space image.
///
/// Observed colors are bilinearly sampled at the projected visible vertices
/// and divided by the fixed-lighting shading factor before the damped linear
/// solve against the albedo basis.
pub fn solve_texture(
    model: &MorphableModel,
    image: &Tensor<f32>,
    params: &FaceParams,
    visibility: &[bool],
    lighting: &Lighting,
    damping: Option<f64>,
) -> Result<Vec<f64>> {
    let posed = evaluate_geometry(model, params);
    let normals = vertex_normals(&posed, &model.triangles);
    let seen = |v: usize| visibility.get(v) == Some(&true);
    // a vertex next to an occluder samples the occluder's pixels too
    let mut ring_seen: Vec<bool> = (0..model.n_vertices()).map(seen).collect();
    for t in &model.triangles {
        if !t.iter().all(|&v| seen(v)) {
            t.iter().for_each(|&v| ring_seen[v] = false);
        }
    }
    let visible: Vec<usize> = (0..model.n_vertices())
        .filter(|&v| ring_seen[v] && normals[v].z >= MIN_FACING && model.eye_of(v).is_none())
        .collect();
    let needed = model.n_tex().max(1);
    if visible.len() < needed {
        return Err(Error::TooFewVisible {
            visible: visible.len(),
            needed,
        });
    }
    let nt = model.n_tex();
    let mut a = DMatrix::zeros(3 * visible.len(), nt);
    let shades: Vec<f64> = visible.iter().map(|&v| lighting.shade(&normals[v]).max(1e-6)).collect();
    let sample = |img: &Tensor<f32>| -> DVector<f64> {
        DVector::from_fn(3 * visible.len(), |r, _| {
            let v = visible[r / 3];
            sample_bilinear(img, r % 3, posed[v].x, posed[v].y) / shades[r / 3]
        })
    };
    for (row, &v) in visible.iter().enumerate() {
        for d in 0..3 {
            for k in 0..nt {
                a[(3 * row + d, k)] = model.b_tex[(3 * v + d) * nt + k];
            }
        }
    }
    let mean = DVector::from_fn(3 * visible.len(), |r, _| model.mean_texture[3 * visible[r / 3] + r % 3]);
    let lambda = damping.unwrap_or_else(|| auto_damping(&a));
    let observed = sample(image);
    let mut theta = damped_least_squares(&a, &(&observed - mean), lambda)?;
    // Sampling a Gouraud-shaded image at a vertex is slightly biased; re-render
    // the current estimate, sample it identically and solve for the remainder.
    let size = [image.shape()[1], image.shape()[2]];
    let mut current = params.clone();
    for _ in 0..TEXTURE_REFINEMENTS {
        current.theta_tex = theta.as_slice().to_vec();
        let synthetic = rasterize_frame(model, &current, RenderMode::Texture, size, lighting)?.tex_image;
        theta += damped_least_squares(&a, &(&observed - sample(&synthetic)), lambda)?;
    }
    Ok(theta.as_slice().to_vec())
}

/// Analysis-by-synthesis passes after the initial texture solve.
pub const TEXTURE_REFINEMENTS: usize = 2;

/// Yaw and pitch of a direction: `d = R_y(yaw)·R_x(pitch)·ẑ`.
fn yaw_pitch(d: &Vector3<f64>) -> (f64, f64) {
    let d = d.normalize();
    (d.x.atan2(d.z), (-d.y).clamp(-1.0, 1.0).asin())
}

/// Eyeball rotations turning each eye's forward vertex toward the observed
/// iris point, restricted to yaw and pitch. Identity without iris points.
pub fn solve_eyeballs(model: &MorphableModel, params: &FaceParams, iris: Option<&[[f64; 3]; 2]>) -> (Matrix3<f64>, Matrix3<f64>) {
    let Some(iris) = iris else {
        return (Matrix3::identity(), Matrix3::identity());
    };
    let mut out = [Matrix3::identity(); 2];
    for (eye, slot) in out.iter_mut().enumerate() {
        let (rig, Some(fwd)) = (if eye == 0 { &model.eye_left } else { &model.eye_right }, model.eye_forward_vertex(eye)) else {
            continue;
        };
        let neutral = model.shaped_vertex(fwd, &params.theta_shape, &params.theta_exp) - rig.pivot;
        let observed = params.head_rotation.transpose() * (Vector3::from(iris[eye]) / params.scale - params.translation) - rig.pivot;
        if neutral.norm() == 0.0 || observed.norm() == 0.0 {
            continue;
        }
        let (y0, p0) = yaw_pitch(&neutral);
        let (y1, p1) = yaw_pitch(&observed);
        *slot = rot_y(y1) * rot_x(p1) * rot_x(-p0) * rot_y(-y0);
    }
    (out[0], out[1])
}

/// Tracks one frame, warm-starting from `prev`.
pub fn track_frame(
    model: &MorphableModel,
    frame: &LandmarkFrame,
    prev: Option<&FaceParams>,
    is_first: bool,
    config: &TrackConfig,
) -> Result<TrackResult> {
    check_landmark_count(model, &frame.points)?;
    let mut p = prev.cloned().unwrap_or_else(|| FaceParams::neutral(model));
    let tgt = frame.targets();
    for _ in 0..config.iterations {
        let src = model_landmarks(model, &p);
        let sim = solve_similarity(&src, &tgt)?;
        p.head_rotation = sim.rotation;
        p.translation = sim.translation;
        p.scale = sim.scale;
        let (ds, de) = solve_coefficients(model, &frame.points, &p, config.damping, is_first)?;
        if is_first {
            p.theta_shape.iter_mut().zip(&ds).for_each(|(t, d)| *t += d);
        }
        p.theta_exp.iter_mut().zip(&de).for_each(|(t, d)| *t += d);
    }
    if config.iterations > 0 {
        let (l, r) = solve_eyeballs(model, &p, frame.iris.as_ref());
        p.eye_left_rotation = l;
        p.eye_right_rotation = r;
    }
    Ok(TrackResult {
        residual_rms: landmark_residual(model, &p, &frame.points),
        params: p,
        iterations_used: config.iterations,
    })
}

/// Tracks a whole sequence: identity is solved on the first frame only, every
/// later frame is warm-started from its predecessor.
pub fn track_sequence(model: &MorphableModel, frames: &[LandmarkFrame], config: &TrackConfig) -> Result<Vec<TrackResult>> {
    if frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut out: Vec<TrackResult> = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let prev = out.last().map(|r| &r.params);
        let mut r = track_frame(model, f, prev, i == 0, config)?;
        if let (Some(alpha), Some(prev)) = (config.smoothing, prev) {
            r.params.scale = alpha * prev.scale + (1.0 - alpha) * r.params.scale;
            r.params.translation = alpha * prev.translation + (1.0 - alpha) * r.params.translation;
            r.residual_rms = landmark_residual(model, &r.params, &f.points);
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::{rot_z, synth_toy_model};
    use crate::raster::{rasterize, CropBox};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> MorphableModel {
        synth_toy_model(1, 502, 20, 10, 10, 68).unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        rot_z(rng.random_range(-3.0..3.0)) * rot_y(rng.random_range(-3.0..3.0)) * rot_x(rng.random_range(-3.0..3.0))
    }

    fn pose(model: &MorphableModel) -> FaceParams {
        let mut p = FaceParams::neutral(model);
        p.scale = 40.0;
        p.translation = Vector3::new(2.0, 1.8, 0.5);
        p.head_rotation = rot_y(0.2) * rot_x(-0.1);
        p
    }

    #[test]
    fn similarity_identity_and_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let src = random_points(&mut rng, 20);
        let s = solve_similarity(&src, &src).unwrap();
        assert!((s.rotation - Matrix3::identity()).abs().max() <= 1e-9);
        assert!(s.translation.abs().max() <= 1e-9);
        assert!((s.scale - 1.0).abs() <= 1e-9);

        let r = rot_z(30f64.to_radians());
        let t = Vector3::new(1.0, 2.0, 3.0);
        let tgt: Vec<_> = src.iter().map(|x| 2.0 * (r * x + t)).collect();
        let s = solve_similarity(&src, &tgt).unwrap();
        assert!((s.rotation - r).abs().max() <= 1e-9);
        assert!((s.translation - t).abs().max() <= 1e-9);
        assert!((s.scale - 2.0).abs() <= 1e-9);
        let res = src.iter().zip(&tgt).map(|(x, y)| (s.apply(x) - y).norm()).fold(0.0, f64::max);
        assert!(res <= 1e-6);
    }

    #[test]
    fn similarity_rejects_degenerate_input() {
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, -(i as f64))).collect();
        assert!(matches!(solve_similarity(&line, &line), Err(Error::DegenerateConfiguration { rank: 1 })));
        let two = &line[..2];
        assert!(matches!(solve_similarity(two, two), Err(Error::TooFewPoints(2))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn similarity_beats_random_rotations(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = random_points(&mut rng, 12);
            let r = random_rotation(&mut rng);
            let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let s = rng.random_range(0.1..10.0);
            let tgt: Vec<_> = src.iter().map(|x| s * (r * x + t)).collect();
            let sol = solve_similarity(&src, &tgt).unwrap();
            let cost = |rot: &Matrix3<f64>| -> f64 {
                let cand = Similarity { rotation: *rot, ..sol.clone() };
                // re-fit translation for the candidate rotation
                let (mx, my) = (centroid(&src), centroid(&tgt));
                let cand = Similarity { translation: my / cand.scale - rot * mx, ..cand };
                src.iter().zip(&tgt).map(|(x, y)| (cand.apply(x) - y).norm_squared()).sum()
            };
            let best = cost(&sol.rotation);
            prop_assert!((best / src.len() as f64).sqrt() <= 1e-6);
            for _ in 0..1000 {
                prop_assert!(best <= cost(&random_rotation(&mut rng)) + 1e-12);
            }
        }

        #[test]
        fn ldlt_matches_pseudo_inverse(seed in 0u64..10_000, rows in 30usize..200, cols in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
            let x = damped_least_squares(&a, &b, 0.0).unwrap();
            let pinv = a.clone().pseudo_inverse(1e-12).unwrap() * &b;
            prop_assert!((x - pinv).abs().max() <= 1e-6);
        }
    }

    #[test]
    fn coefficient_solve_cases() {
        let m = toy();
        let p = pose(&m);
        let tgt = synthesize_landmarks(&m, &p, 0).points;
        for lambda in [0.0, 1.0, 1e3] {
            let (ds, de) = solve_coefficients(&m, &tgt, &p, Some(lambda), true).unwrap();
            assert!(ds.iter().chain(&de).all(|d| d.abs() <= 1e-8));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut truth = p.clone();
        truth.theta_shape.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
        truth.theta_exp.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
        let tgt = synthesize_landmarks(&m, &truth, 0).points;
        let (ds, de) = solve_coefficients(&m, &tgt, &p, Some(0.0), true).unwrap();
        for (d, t) in ds.iter().chain(&de).zip(truth.theta_shape.iter().chain(&truth.theta_exp)) {
            assert!((d - t).abs() <= 1e-5, "{d} vs {t}");
        }
        let mut fitted = p.clone();
        fitted.theta_shape = ds;
        fitted.theta_exp = de;
        assert!(landmark_residual(&m, &fitted, &tgt) <= 1e-5);

        let (ds, de) = solve_coefficients(&m, &tgt, &p, Some(1e9), true).unwrap();
        let norm = ds.iter().chain(&de).map(|d| d * d).sum::<f64>().sqrt();
        assert!(norm <= 1e-6, "{norm}");
    }

    #[test]
    fn singular_system_is_reported() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(ldlt_solve(&m, &DVector::from_vec(vec![1.0, 1.0])), Err(Error::SingularSystem)));
    }

    fn rendered(m: &MorphableModel, p: &FaceParams) -> (Tensor<f32>, Vec<bool>) {
        let out = rasterize(m, p, RenderMode::Texture, &CropBox::full(192), 192, &Lighting::default()).unwrap();
        (out.tex_image, out.visibility)
    }

    #[test]
    fn texture_recovery() {
        let m = toy();
        let mut p = FaceParams::neutral(&m);
        p.scale = 70.0;
        p.translation = Vector3::new(96.0 / 70.0, 96.0 / 70.0, 0.0);
        let (img, vis) = rendered(&m, &p);
        let theta = solve_texture(&m, &img, &p, &vis, &Lighting::default(), None).unwrap();
        assert!(theta.iter().all(|t| t.abs() <= 1e-3), "{theta:?}");

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        p.theta_tex.iter_mut().for_each(|t| *t = rng.random_range(-0.8..0.8));
        let (img, vis) = rendered(&m, &p);
        let theta = solve_texture(&m, &img, &p, &vis, &Lighting::default(), None).unwrap();
        for (a, b) in theta.iter().zip(&p.theta_tex) {
            assert!((a - b).abs() <= 5e-2, "{a} vs {b}");
        }

        let none = vec![false; m.n_vertices()];
        assert!(matches!(
            solve_texture(&m, &img, &p, &none, &Lighting::default(), None),
            Err(Error::TooFewVisible { visible: 0, .. })
        ));
    }

    #[test]
    fn eyeball_cases() {
        let m = toy();
        let p = pose(&m);
        let f = synthesize_landmarks(&m, &p, 0);
        let (l, r) = solve_eyeballs(&m, &p, f.iris.as_ref());
        assert!((l - Matrix3::identity()).abs().max() <= 1e-9);
        assert!((r - Matrix3::identity()).abs().max() <= 1e-9);
        assert_eq!(solve_eyeballs(&m, &p, None), (Matrix3::identity(), Matrix3::identity()));

        let mut turned = p.clone();
        turned.eye_left_rotation = rot_y(10f64.to_radians());
        turned.eye_right_rotation = rot_y(10f64.to_radians());
        let f = synthesize_landmarks(&m, &turned, 0);
        let (l, r) = solve_eyeballs(&m, &p, f.iris.as_ref());
        for rot in [l, r] {
            let (yaw, pitch) = yaw_pitch(&(rot * Vector3::z()));
            assert!((yaw.to_degrees() - 10.0).abs() <= 0.5 && pitch.abs().to_degrees() <= 0.5);
        }
    }

    fn expression_change(m: &MorphableModel, base: &FaceParams, seed: u64) -> FaceParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = base.clone();
        p.theta_exp.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
        let _ = m;
        p
    }

    #[test]
    fn track_frame_cases() {
        let m = toy();
        let mut base = pose(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        base.theta_shape.iter_mut().for_each(|t| *t = rng.random_range(-0.5..0.5));
        let next = expression_change(&m, &base, 9);
        let frame = synthesize_landmarks(&m, &next, 1);
        let r = track_frame(&m, &frame, Some(&base), false, &TrackConfig::default()).unwrap();
        assert!(r.residual_rms <= 1e-4, "residual {}", r.residual_rms);
        assert_eq!(r.params.theta_shape, base.theta_shape);

        let zero = TrackConfig {
            iterations: 0,
            ..TrackConfig::default()
        };
        let r = track_frame(&m, &frame, Some(&base), false, &zero).unwrap();
        assert_eq!(r.params, base);
        assert!((r.residual_rms - landmark_residual(&m, &base, &frame.points)).abs() == 0.0);
    }

    #[test]
    fn residual_is_monotone_over_alternations() {
        let m = toy();
        let mut truth = pose(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        truth.theta_shape.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
        truth.theta_exp.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
        let frame = synthesize_landmarks(&m, &truth, 0);
        let mut last = f64::INFINITY;
        for it in 1..8 {
            let cfg = TrackConfig {
                iterations: it,
                ..TrackConfig::default()
            };
            let r = track_frame(&m, &frame, None, true, &cfg).unwrap();
            assert!(r.residual_rms <= last + 1e-12, "iteration {it}: {} > {last}", r.residual_rms);
            last = r.residual_rms;
        }
    }

    #[test]
    fn tracking_is_similarity_equivariant() {
        let m = toy();
        let mut truth = pose(&m);
        truth.theta_exp = expression_change(&m, &truth, 4).theta_exp;
        let frame = synthesize_landmarks(&m, &truth, 0);
        let q = rot_z(0.4) * rot_y(-0.2);
        let moved = LandmarkFrame {
            points: frame
                .points
                .iter()
                .map(|p| {
                    let v = 1.7 * (q * Vector3::from(*p)) + Vector3::new(5.0, -3.0, 2.0);
                    [v.x, v.y, v.z]
                })
                .collect(),
            ..frame.clone()
        };
        let a = track_frame(&m, &frame, None, true, &TrackConfig::default()).unwrap();
        let b = track_frame(&m, &moved, None, true, &TrackConfig::default()).unwrap();
        for (x, y) in a.params.theta_exp.iter().zip(&b.params.theta_exp) {
            assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn sequence_cases() {
        let m = toy();
        assert!(matches!(track_sequence(&m, &[], &TrackConfig::default()), Err(Error::EmptySequence)));

        let truth = pose(&m);
        let frames: Vec<_> = (0..10).map(|i| synthesize_landmarks(&m, &truth, i)).collect();
        let out = track_sequence(&m, &frames, &TrackConfig::default()).unwrap();
        for r in &out[2..] {
            assert_eq!(r.params.theta_shape, out[1].params.theta_shape);
            for (a, b) in r.params.theta_exp.iter().zip(&out[1].params.theta_exp) {
                assert!((a - b).abs() <= 1e-9);
            }
        }

        let frames: Vec<_> = (0..10)
            .map(|i| {
                let mut p = expression_change(&m, &truth, 100 + i as u64);
                p.translation.x += 0.05 * i as f64;
                synthesize_landmarks(&m, &p, i)
            })
            .collect();
        for r in track_sequence(&m, &frames, &TrackConfig::default()).unwrap() {
            assert!(r.residual_rms <= 1e-3, "{}", r.residual_rms);
        }
    }

    #[test]
    fn landmark_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy();
        let f = synthesize_landmarks(&m, &pose(&m), 4);
        let path = dir.path().join("000004.json");
        f.write(&path).unwrap();
        assert_eq!(LandmarkFrame::read(&path, 4).unwrap(), f);
    }
}
