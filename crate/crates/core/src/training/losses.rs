use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{activate, Conv, Discriminator, Module};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Mean absolute difference on the tape.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let a = g.abs(d);
    g.mean(a)
}

/// L1 between a predicted mask and the matting mask.
pub fn mask_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Var {
    l1_loss(g, pred, target)
}

/// Fixed, randomly initialized 5-level stride-2 convolution pyramid used
/// as the perceptual feature extractor. Its weights never train.
#[derive(Clone, Debug)]
pub struct PerceptualNet<T: Real> {
    convs: Vec<Conv<T>>,
}

const PERCEPTUAL_SEED: u64 = 0x5EED_F00D;
const PERCEPTUAL_CHANNELS: [usize; 6] = [3, 8, 16, 16, 16, 16];

impl<T: Real> Default for PerceptualNet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> PerceptualNet<T> {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        let convs = PERCEPTUAL_CHANNELS.windows(2).map(|w| Conv::new(w[0], w[1], 3, 2, &mut rng)).collect();
        PerceptualNet { convs }
    }

    /// Smallest input side the pyramid accepts.
    pub const MIN_RESOLUTION: usize = 32;

    fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, h);
            h = activate(g, h);
            out.push(h);
        }
        out
    }

    /// Sum over levels of the mean absolute feature difference. Gradients
    /// flow into both arguments; the pyramid's own weights stay constant.
    pub fn loss(&self, g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
        let s = g.shape(pred).to_vec();
        if s != g.shape(target) || s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("perceptual loss needs matching [N, 3, H, W] images, got {s:?}")));
        }
        if s[2] < Self::MIN_RESOLUTION || s[3] < Self::MIN_RESOLUTION {
            return Err(Error::Shape(format!(
                "perceptual loss needs at least {0}×{0} pixels, got {1}×{2}",
                Self::MIN_RESOLUTION,
                s[2],
                s[3]
            )));
        }
        let (fp, ft) = g.frozen(|g| (self.features(g, pred), self.features(g, target)));
        let mut total: Option<Var> = None;
        for (a, b) in fp.into_iter().zip(ft) {
            let l = l1_loss(g, a, b);
            total = Some(match total {
                Some(t) => g.add(t, l),
                None => l,
            });
        }
        Ok(total.expect("pyramid has levels"))
    }

    /// [`PerceptualNet::loss`] on plain tensors.
    pub fn distance(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(pred.clone()), g.constant(target.clone()));
        let l = self.loss(&mut g, a, b)?;
        Ok(g.value(l).item().to_f64().unwrap())
    }
}

/// `mean softplus(fake) + mean softplus(−real)`.
pub fn d_logistic_loss<T: Real>(g: &mut Graph<T>, real_scores: Var, fake_scores: Var) -> Var {
    let f = g.softplus(fake_scores);
    let f = g.mean(f);
    let neg = g.scale(real_scores, -T::one());
    let r = g.softplus(neg);
    let r = g.mean(r);
    g.add(f, r)
}

/// Non-saturating generator loss `mean softplus(−fake)`.
pub fn g_nonsaturating_loss<T: Real>(g: &mut Graph<T>, fake_scores: Var) -> Var {
    let neg = g.scale(fake_scores, -T::one());
    let l = g.softplus(neg);
    g.mean(l)
}

/// Parameter gradients of `Σ D(image_pack)` (plus the input gradient).
fn disc_grads<T: Real>(disc: &Discriminator<T>, image_pack: &Tensor<T>, texture_pack: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let mut g = Graph::new();
    let x = g.input(image_pack.clone());
    let t = g.constant(texture_pack.clone());
    let s = disc.forward(&mut g, x, t)?;
    let total = g.sum(s);
    let grads = g.backward(total);
    let params = disc
        .named_params()
        .into_iter()
        .map(|(_, p)| grads.param(p).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    let input = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(image_pack.shape()));
    Ok((params, input))
}

/// R1 penalty `γ/2 · mean_n ‖∇ₓ D(xₙ)‖²` on real pairs, with its
/// parameter gradients in [`Discriminator`] visiting order.
///
/// The parameter gradient is `γ/N · H_θx v` with `v = ∇ₓ Σ D`. The mixed
/// Hessian-vector product comes from a central difference of parameter
/// gradients along `v`, which needs only first-order backward passes.
pub fn r1_penalty<T: Real>(
    disc: &Discriminator<T>,
    image_pack: &Tensor<T>,
    texture_pack: &Tensor<T>,
    gamma: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let n = image_pack.shape()[0] as f64;
    let (_, v) = disc_grads(disc, image_pack, texture_pack)?;
    let sq = v.sum_sq().to_f64().unwrap();
    let value = 0.5 * gamma * sq / n;
    let rms = (sq / v.len() as f64).sqrt();
    if rms == 0.0 {
        let zeros = disc.named_params().iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        return Ok((value, zeros));
    }
    // Step so the probe moves each input entry by ~1e-3 on average (f32)
    // or ~1e-6 (f64), relative to the gradient scale.
    let probe = if T::DTYPE == "float64" { 1e-6 } else { 1e-3 };
    let h = probe / rms;
    let th = T::of(h);
    let plus = image_pack.zip_map(&v, |x, d| x + th * d);
    let minus = image_pack.zip_map(&v, |x, d| x - th * d);
    let (gp, _) = disc_grads(disc, &plus, texture_pack)?;
    let (gm, _) = disc_grads(disc, &minus, texture_pack)?;
    let k = T::of(gamma / n / (2.0 * h));
    let grads = gp.iter().zip(&gm).map(|(a, b)| a.zip_map(b, |p, m| (p - m) * k)).collect();
    Ok((value, grads))
}
