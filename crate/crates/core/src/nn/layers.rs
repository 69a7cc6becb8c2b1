use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Graph, Param, Real, Tensor, Var};

const LRELU_SLOPE: f64 = 0.2;
const DEMOD_EPS: f64 = 1e-8;

pub(crate) fn normal<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Leaky ReLU with the √2 gain that keeps unit variance through a layer.
pub fn activate<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let y = g.leaky_relu(x, T::of(LRELU_SLOPE));
    g.scale(y, T::of(std::f64::consts::SQRT_2))
}

/// Anything that owns named trainable arrays, visited in a fixed order.
pub trait Module<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n, p)));
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }
}

/// Fully connected layer with runtime weight scaling (`1/√fan_in`).
#[derive(Clone, Debug)]
pub struct Linear<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    gain: T,
}

impl<T: Real> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, bias_init: f64, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::new(normal(&[outputs, inputs], rng)),
            bias: Param::new(Tensor::full(&[outputs], T::of(bias_init))),
            gain: T::of(1.0 / (inputs as f64).sqrt()),
        }
    }

    /// `x [N, in] → [N, out]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let w = g.scale(w, self.gain);
        let y = g.matmul(x, w, true);
        let b = g.param(&self.bias);
        g.add(y, b)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Plain convolution with same padding and optional stride.
#[derive(Clone, Debug)]
pub struct Conv<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    stride: usize,
    gain: T,
}

impl<T: Real> Conv<T> {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Conv {
            weight: Param::new(normal(&[cout, cin, kernel, kernel], rng)),
            bias: Param::new(Tensor::zeros(&[cout])),
            stride,
            gain: T::of(1.0 / ((cin * kernel * kernel) as f64).sqrt()),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let k = self.weight.value.shape()[2];
        let cout = self.weight.value.shape()[0];
        let w = g.param(&self.weight);
        let w = g.scale(w, self.gain);
        let y = g.conv2d(x, w, self.stride, k / 2);
        let b = g.param(&self.bias);
        let b = g.reshape(b, &[1, cout, 1, 1]);
        g.add(y, b)
    }
}

impl<T: Real> Module<T> for Conv<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Style-modulated convolution.
///
/// The style vector is mapped per input channel by an affine layer (bias
/// initialized to 1), the input is scaled by it, convolved, and optionally
/// demodulated so every output channel's effective kernel has unit norm.
/// Noise, bias and activation follow when enabled.
#[derive(Clone, Debug)]
pub struct ModConv<T: Real> {
    pub affine: Linear<T>,
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub noise_strength: Option<Param<T>>,
    demodulate: bool,
    activate: bool,
    gain: T,
}

/// Construction switches for [`ModConv`].
#[derive(Clone, Copy, Debug)]
pub struct ModConvSpec {
    pub kernel: usize,
    pub demodulate: bool,
    pub noise: bool,
    pub activate: bool,
}

impl ModConvSpec {
    pub fn style_block() -> Self {
        ModConvSpec {
            kernel: 3,
            demodulate: true,
            noise: false,
            activate: true,
        }
    }

    pub fn output() -> Self {
        ModConvSpec {
            kernel: 1,
            demodulate: false,
            noise: false,
            activate: false,
        }
    }

    pub fn with_noise(mut self, noise: bool) -> Self {
        self.noise = noise;
        self
    }
}

impl<T: Real> ModConv<T> {
    pub fn new(cin: usize, cout: usize, style_dim: usize, spec: ModConvSpec, rng: &mut impl Rng) -> Self {
        let k = spec.kernel;
        ModConv {
            affine: Linear::new(style_dim, cin, 1.0, rng),
            weight: Param::new(normal(&[cout, cin, k, k], rng)),
            bias: Param::new(Tensor::zeros(&[cout])),
            noise_strength: spec.noise.then(|| Param::new(Tensor::zeros(&[1]))),
            demodulate: spec.demodulate,
            activate: spec.activate,
            gain: T::of(1.0 / ((cin * k * k) as f64).sqrt()),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// `x [N, Cin, H, W]`, `style [N, style_dim]`, `noise [N, 1, H, W]`.
    /// Noise is ignored by layers built without a noise strength.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, style: Var, noise: Option<Var>) -> Var {
        let (cin, cout) = (self.in_channels(), self.out_channels());
        let k = self.weight.value.shape()[2];
        let n = g.shape(x)[0];
        let s = self.affine.forward(g, style);
        let s4 = g.reshape(s, &[n, cin, 1, 1]);
        let xm = g.mul(x, s4);
        let w = g.param(&self.weight);
        let w = g.scale(w, self.gain);
        let mut y = g.conv2d(xm, w, 1, k / 2);
        if self.demodulate {
            let wsq = g.square(w);
            let wsq = g.sum_trailing(wsq, 2);
            let ssq = g.square(s);
            let norm = g.matmul(ssq, wsq, true);
            let d = g.rsqrt(norm, T::of(DEMOD_EPS));
            let d = g.reshape(d, &[n, cout, 1, 1]);
            y = g.mul(y, d);
        }
        if let (Some(strength), Some(noise)) = (&self.noise_strength, noise) {
            let st = g.param(strength);
            let scaled = g.mul(noise, st);
            y = g.add(y, scaled);
        }
        let b = g.param(&self.bias);
        let b = g.reshape(b, &[1, cout, 1, 1]);
        y = g.add(y, b);
        if self.activate {
            y = activate(g, y);
        }
        y
    }

    /// Per-sample effective kernels `[N, Cout, Cin, k, k]` after modulation
    /// and (when enabled) demodulation.
    pub fn effective_weights(&self, style: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let sv = g.constant(style.clone());
        let s = g.frozen(|g| self.affine.forward(g, sv));
        let s = g.value(s).clone();
        let (n, cin) = (s.shape()[0], s.shape()[1]);
        let shape = self.weight.value.shape();
        let (cout, k) = (shape[0], shape[2]);
        let kk = k * k;
        let mut out = Tensor::zeros(&[n, cout, cin, k, k]);
        for b in 0..n {
            for o in 0..cout {
                let base = (b * cout + o) * cin * kk;
                let mut norm = T::zero();
                for i in 0..cin {
                    for t in 0..kk {
                        let v = self.weight.value.data()[(o * cin + i) * kk + t] * self.gain * s.data()[b * cin + i];
                        out.data_mut()[base + i * kk + t] = v;
                        norm += v * v;
                    }
                }
                if self.demodulate {
                    let d = T::one() / (norm + T::of(DEMOD_EPS)).sqrt();
                    for v in &mut out.data_mut()[base..base + cin * kk] {
                        *v *= d;
                    }
                }
            }
        }
        out
    }
}

impl<T: Real> Module<T> for ModConv<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.affine.visit(&join(prefix, "affine"), f);
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
        if let Some(s) = &self.noise_strength {
            f(join(prefix, "noise_strength"), s);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.affine.visit_mut(&join(prefix, "affine"), f);
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
        if let Some(s) = &mut self.noise_strength {
            f(join(prefix, "noise_strength"), s);
        }
    }
}

/// Mapping MLP from a latent code to a style vector.
#[derive(Clone, Debug)]
pub struct Mapping<T: Real> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mapping<T> {
    pub fn new(latent_dim: usize, style_dim: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..depth)
            .map(|i| Linear::new(if i == 0 { latent_dim } else { style_dim }, style_dim, 0.0, rng))
            .collect();
        Mapping { layers }
    }

    pub fn latent_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.value.shape()[1])
    }

    /// `z [N, latent_dim] → w [N, style_dim]`.
    pub fn forward(&self, g: &mut Graph<T>, z: Var) -> Var {
        let mut x = z;
        for layer in &self.layers {
            x = layer.forward(g, x);
            x = activate(g, x);
        }
        x
    }
}

impl<T: Real> Module<T> for Mapping<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("fc{i}")), f);
        }
    }
}
