use avatar_core::composer::{combine_tensors, compose_frame, sample_neural_texture, FrameInputs, MaskHead};
use avatar_core::model::AvatarNetworks;
use avatar_core::morphable::{rot_x, rot_y, synth_toy_model, FaceParams, MorphableModel};
use avatar_core::nn::{embed_batch, map_noise_via_uv, NetworkConfig};
use avatar_core::raster::{rasterize, CropBox, Lighting, RenderMode};
use avatar_core::tensor::{Graph, Tensor};
use avatar_core::windowing::SampleWindow;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> MorphableModel {
    synth_toy_model(3, 502, 8, 6, 6, 68).unwrap()
}

fn posed(model: &MorphableModel, yaw: f64, size: usize) -> FaceParams {
    let mut p = FaceParams::neutral(model);
    let s = size as f64 * 0.3;
    p.scale = s;
    p.translation = Vector3::new(size as f64 / 2.0 / s, size as f64 / 2.0 / s, 0.0);
    p.head_rotation = rot_y(yaw) * rot_x(0.1);
    p
}

fn uv_render(model: &MorphableModel, params: &FaceParams, size: usize) -> Tensor<f64> {
    let out = rasterize(model, params, RenderMode::Uv, &CropBox::full(size), size, &Lighting::default()).unwrap();
    out.uv_image.cast::<f64>().reshape(&[1, 3, size, size])
}

fn ramp(size: usize) -> Tensor<f64> {
    let s = (size - 1) as f64;
    Tensor::from_fn(&[1, 2, size, size], |i| {
        let (c, p) = (i / (size * size), i % (size * size));
        if c == 0 {
            (p % size) as f64 / s
        } else {
            (p / size) as f64 / s
        }
    })
}

#[test]
fn neural_texture_ramp_reproduces_uv_rendering() {
    let model = toy();
    let uv = uv_render(&model, &posed(&model, 0.3, 64), 64);
    let mut g = Graph::new();
    let canvas = g.constant(ramp(64));
    let out = sample_neural_texture(&mut g, canvas, &uv);
    let out = g.value(out);
    let plane = 64 * 64;
    let mut covered = 0;
    for p in 0..plane {
        let (u, v) = (uv.data()[p], uv.data()[plane + p]);
        if u > 0.0 || v > 0.0 {
            covered += 1;
            assert!((out.data()[p] - u).abs() <= 1e-3);
            assert!((out.data()[plane + p] - v).abs() <= 1e-3);
        } else {
            assert_eq!((out.data()[p], out.data()[plane + p]), (0.0, 0.0));
        }
    }
    assert!(covered > 500);
}

#[test]
fn neural_texture_constant_and_background_cases() {
    let model = toy();
    let uv = uv_render(&model, &posed(&model, 0.0, 32), 32);
    let mut g = Graph::new();
    let canvas = g.constant(Tensor::full(&[1, 4, 8, 8], 0.25));
    let out = sample_neural_texture(&mut g, canvas, &uv);
    let plane = 32 * 32;
    for c in 0..4 {
        for p in 0..plane {
            let face = uv.data()[p] > 0.0 || uv.data()[plane + p] > 0.0;
            assert_eq!(g.value(out).data()[c * plane + p], if face { 0.25 } else { 0.0 });
        }
    }
    let empty = Tensor::zeros(&[1, 3, 8, 8]);
    let out = sample_neural_texture(&mut g, canvas, &empty);
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn noise_follows_the_surface_across_poses() {
    // Noise is a function of UV only, so pixels of two poses that see the
    // same surface point (near-equal UV) must carry near-equal noise. The
    // canvas is smooth so "near" can be bounded by its Lipschitz constant.
    let model = toy();
    let size = 96;
    let t = 32;
    let canvas = Tensor::from_fn(&[1, 1, t, t], |i| {
        let (y, x) = ((i / t) as f64 / (t - 1) as f64, (i % t) as f64 / (t - 1) as f64);
        (3.0 * x).sin() + (2.0 * y).cos()
    });
    let lipschitz = 3.0 + 2.0;
    let bg = Tensor::zeros(&[1, 1, size, size]);
    let (uv_a, uv_b) = (uv_render(&model, &posed(&model, -0.2, size), size), uv_render(&model, &posed(&model, 0.25, size), size));
    let (na, nb) = (map_noise_via_uv(&canvas, &uv_a, &bg), map_noise_via_uv(&canvas, &uv_b, &bg));
    let plane = size * size;
    let face = |uv: &Tensor<f64>| -> Vec<usize> { (0..plane).filter(|&p| uv.data()[p] > 0.0 || uv.data()[plane + p] > 0.0).collect() };
    let (fa, fb) = (face(&uv_a), face(&uv_b));
    let mut compared = 0;
    for &pb in &fb {
        let (ub, vb) = (uv_b.data()[pb], uv_b.data()[plane + pb]);
        let (best, dist) = fa
            .iter()
            .map(|&pa| (pa, (uv_a.data()[pa] - ub).hypot(uv_a.data()[plane + pa] - vb)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        if dist < 2e-3 {
            compared += 1;
            assert!((na.data()[best] - nb.data()[pb]).abs() <= 1e-3 + lipschitz * dist);
        }
    }
    assert!(compared > 100, "only {compared} corresponding pixels");
}

#[test]
fn combine_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rand_t = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-2.0..2.0));
    let (face, fg, bg) = (rand_t(&[2, 3, 4, 4]), rand_t(&[2, 3, 4, 4]), rand_t(&[2, 3, 4, 4]));
    let sum = face.zip_map(&fg, |a, b| a + b);
    let ones = Tensor::full(&[2, 1, 4, 4], 1.0);
    let zeros = Tensor::zeros(&[2, 1, 4, 4]);
    let half = Tensor::full(&[2, 1, 4, 4], 0.5);
    assert_eq!(combine_tensors(&face, &fg, &bg, &ones).unwrap(), sum);
    assert_eq!(combine_tensors(&face, &fg, &bg, &zeros).unwrap(), bg);
    let mean = sum.zip_map(&bg, |a, b| 0.5 * a + 0.5 * b);
    assert!(combine_tensors(&face, &fg, &bg, &half).unwrap().max_abs_diff(&mean) <= 1e-12);

    // Affine in each branch for a fixed mask.
    let mask = rand_t(&[2, 1, 4, 4]).map(|v| (v + 2.0) / 4.0);
    let (face2, bg2) = (rand_t(&[2, 3, 4, 4]), rand_t(&[2, 3, 4, 4]));
    let (a, b) = (0.7, -1.3);
    let lin = |x: &Tensor<f64>, y: &Tensor<f64>| x.zip_map(y, |p, q| a * p + b * q);
    let zero = Tensor::zeros(&[2, 3, 4, 4]);
    let c = |f: &Tensor<f64>, g: &Tensor<f64>, k: &Tensor<f64>| combine_tensors(f, g, k, &mask).unwrap();
    let lhs = c(&lin(&face, &face2), &zero, &lin(&bg, &bg2));
    let rhs = lin(&c(&face, &zero, &bg), &c(&face2, &zero, &bg2));
    assert!(lhs.max_abs_diff(&rhs) <= 1e-6);

    let bad = Tensor::zeros(&[2, 1, 3, 3]);
    assert!(combine_tensors(&face, &fg, &bg, &bad).is_err());
}

#[test]
fn mask_head_is_bounded_and_order_sensitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = MaskHead::<f64>::new(3, 4, &mut rng);
    let fg = Tensor::from_fn(&[1, 3, 6, 6], |i| (i as f64 * 0.37).sin() * 50.0);
    let bg = Tensor::from_fn(&[1, 3, 6, 6], |i| (i as f64 * 0.11).cos());
    let mut g = Graph::new();
    let (a, b) = (g.constant(fg), g.constant(bg));
    let m = head.forward(&mut g, a, b).unwrap();
    assert!(g.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0 || v == 0.0 || v == 1.0));
    assert!(g.value(m).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let swapped = head.forward(&mut g, b, a).unwrap();
    assert!(g.value(m).max_abs_diff(g.value(swapped)) > 1e-6);
}

fn frame_inputs(nets: &AvatarNetworks<f64>, model: &MorphableModel, window: SampleWindow) -> FrameInputs<f64> {
    let f = nets.config.frame_size;
    let out = rasterize(model, &posed(model, 0.1, f), RenderMode::Both, &CropBox::full(f), f, &Lighting::default()).unwrap();
    let crop = |t: &Tensor<f32>| {
        let t = t.cast::<f64>().reshape(&[1, 3, f, f]);
        avatar_core::windowing::crop_window(&t, &window).unwrap()
    };
    FrameInputs {
        uv: crop(&out.uv_image),
        texture: crop(&out.tex_image),
        window,
        z_id: embed_batch(&[0.0], nets.config.latent_dim).unwrap(),
        z_tmp: embed_batch(&[0.5], nets.config.latent_dim).unwrap(),
    }
}

#[test]
fn compose_frame_is_deterministic_and_supports_ablation() {
    let model = toy();
    let cfg = NetworkConfig::micro();
    let nets = AvatarNetworks::<f64>::new(&cfg, 4).unwrap();
    let window = SampleWindow::new((3, 5), (8, 8), (16, 16)).unwrap();
    let inputs = frame_inputs(&nets, &model, window);
    let run = |nets: &AvatarNetworks<f64>| {
        let mut g = Graph::new();
        let c = compose_frame(&mut g, nets, &inputs, None).unwrap();
        (g.value(c.combined).clone(), g.value(c.mask).clone())
    };
    assert_eq!(run(&nets), run(&nets));
    let cached = nets.static_canvases(&nets.identity_code(0)).unwrap();
    let mut g = Graph::new();
    let c = compose_frame(&mut g, &nets, &inputs, Some(&cached)).unwrap();
    assert_eq!(g.value(c.combined), &run(&nets).0);

    let mut no_nt = cfg.clone();
    no_nt.use_neural_texture = false;
    let nets = AvatarNetworks::<f64>::new(&no_nt, 4).unwrap();
    let (combined, mask) = run(&nets);
    assert_eq!(combined.shape(), &[1, 2, 8, 8]);
    assert!(combined.all_finite() && mask.all_finite());
}
