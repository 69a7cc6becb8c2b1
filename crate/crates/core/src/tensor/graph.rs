//! A single-use reverse-mode autodiff tape.
//!
//! Every forward op appends a node holding its value and a closure that maps
//! the output gradient to input gradients. Nodes are created in topological
//! order, so the backward sweep is a reverse scan.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::broadcast::{binary, reduce_to};
use super::conv::{conv2d_backward, conv2d_forward};
use super::{gemm, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

/// A trainable array. Cloning yields an independent parameter with a fresh id.
pub struct Param<T> {
    id: ParamId,
    pub value: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }
}

impl<T: Real> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param::new(self.value.clone())
    }
}

impl<T: Real> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({:?})", self.value)
    }
}

/// What a backward closure sees.
pub struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Which inputs actually need a gradient; closures may skip the rest.
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    frozen: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            frozen: false,
        }
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is recorded (e.g. discriminator inputs for R1).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// The node for `p`; repeated calls return the same node.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.param_vars.get(&p.id) {
            return v;
        }
        let v = self.push_leaf(p.value.clone(), !self.frozen);
        self.param_vars.insert(p.id, v);
        v
    }

    /// Runs `f` with parameters first seen inside it treated as constants.
    pub fn frozen<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.frozen;
        self.frozen = true;
        let r = f(self);
        self.frozen = prev;
        r
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends a custom differentiable op. `backward` returns one optional
    /// gradient per input, shaped like that input.
    pub fn op(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: inputs.to_vec(),
            backward: needs_grad.then(|| Box::new(backward) as BackwardFn<T>),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` w.r.t. every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|p| self.nodes[p.0].needs_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape(), "gradient shape");
                match grads[p.0].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[p.0] = Some(g),
                }
            }
        }
        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x + y);
        self.op(&[a, b], value, |c| {
            vec![
                c.needs[0].then(|| reduce_to(c.grad, c.inputs[0].shape())),
                c.needs[1].then(|| reduce_to(c.grad, c.inputs[1].shape())),
            ]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x - y);
        self.op(&[a, b], value, |c| {
            vec![
                c.needs[0].then(|| reduce_to(c.grad, c.inputs[0].shape())),
                c.needs[1].then(|| reduce_to(&c.grad.map(|g| -g), c.inputs[1].shape())),
            ]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x * y);
        self.op(&[a, b], value, |c| {
            vec![
                c.needs[0].then(|| reduce_to(&binary(c.grad, c.inputs[1], |g, y| g * y), c.inputs[0].shape())),
                c.needs[1].then(|| reduce_to(&binary(c.grad, c.inputs[0], |g, x| g * x), c.inputs[1].shape())),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.op(&[a], value, move |c| vec![Some(c.grad.map(|g| g * k))])
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|x| x + k);
        self.op(&[a], value, |c| vec![Some(c.grad.clone())])
    }

    /// `k - a`
    pub fn rsub_scalar(&mut self, k: T, a: Var) -> Var {
        let value = self.value(a).map(|x| k - x);
        self.op(&[a], value, |c| vec![Some(c.grad.map(|g| -g))])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.op(&[a], value, move |c| {
            vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x > T::zero() { g } else { g * slope }))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.op(&[a], value, |c| vec![Some(c.grad.zip_map(c.output, |g, s| g * s * (T::one() - s)))])
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.op(&[a], value, |c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g * sigmoid(x)))])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        self.op(&[a], value, |c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g * sign(x)))])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.op(&[a], value, |c| {
            let two = T::one() + T::one();
            vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g * two * x))]
        })
    }

    /// `(a + eps)^(-1/2)`
    pub fn rsqrt(&mut self, a: Var, eps: T) -> Var {
        let value = self.value(a).map(|x| (x + eps).sqrt().recip());
        self.op(&[a], value, |c| {
            let half = T::of(0.5);
            vec![Some(c.grad.zip_map(c.output, |g, r| -half * g * r * r * r))]
        })
    }

    // ---- reductions and shape --------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.op(&[a], value, |c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let value = Tensor::scalar(self.value(a).sum() / n);
        self.op(&[a], value, move |c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item() / n))])
    }

    /// Sums over the trailing `n` axes.
    pub fn sum_trailing(&mut self, a: Var, n: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(n <= shape.len());
        let keep = shape.len() - n;
        let inner: usize = shape[keep..].iter().product();
        let out_shape: Vec<usize> = if keep == 0 { vec![1] } else { shape[..keep].to_vec() };
        let data: Vec<T> = self.value(a).data().chunks(inner.max(1)).map(|ch| ch.iter().copied().sum()).collect();
        let value = Tensor::from_vec(&out_shape, data);
        self.op(&[a], value, move |c| {
            let mut g = Vec::with_capacity(c.inputs[0].len());
            for &v in c.grad.data() {
                g.extend(std::iter::repeat_n(v, inner));
            }
            vec![Some(Tensor::from_vec(c.inputs[0].shape(), g))]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        self.op(&[a], value, |c| vec![Some(c.grad.clone().reshape(c.inputs[0].shape()))])
    }

    /// Concatenates 4-d tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let chans: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let (nb, c, hh, ww) = self.value(v).dims4();
                assert_eq!((nb, hh, ww), (n, h, w), "concat_channels shape mismatch");
                c
            })
            .collect();
        let ctot: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, ctot, h, w]);
        let mut off = 0;
        for (&v, &c) in xs.iter().zip(&chans) {
            let src = self.value(v).data();
            for b in 0..n {
                let dst = &mut out.data_mut()[(b * ctot + off) * plane..(b * ctot + off + c) * plane];
                dst.copy_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
            }
            off += c;
        }
        self.op(xs, out, move |ctx| {
            let mut grads = Vec::with_capacity(chans.len());
            let mut off = 0;
            for (i, &c) in chans.iter().enumerate() {
                if ctx.needs[i] {
                    let mut g = Tensor::zeros(&[n, c, h, w]);
                    for b in 0..n {
                        g.data_mut()[b * c * plane..(b + 1) * c * plane]
                            .copy_from_slice(&ctx.grad.data()[(b * ctot + off) * plane..(b * ctot + off + c) * plane]);
                    }
                    grads.push(Some(g));
                } else {
                    grads.push(None);
                }
                off += c;
            }
            grads
        })
    }

    /// Spatial sub-window `[y0..y0+h, x0..x0+w]` of a 4-d tensor.
    pub fn crop(&mut self, a: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let src = self.value(a);
        let (_, _, sh, sw) = src.dims4();
        assert!(y0 + h <= sh && x0 + w <= sw, "crop window outside tensor");
        let value = crop_tensor(src, y0, x0, h, w);
        self.op(&[a], value, move |c| {
            let (_, _, sh, sw) = c.inputs[0].dims4();
            vec![Some(place_tensor(c.grad, sh, sw, y0, x0))]
        })
    }

    /// Zero canvas of `out_h × out_w` with `a` placed at `(y0, x0)`.
    pub fn place(&mut self, a: Var, out_h: usize, out_w: usize, y0: usize, x0: usize) -> Var {
        let value = place_tensor(self.value(a), out_h, out_w, y0, x0);
        self.op(&[a], value, move |c| {
            let (_, _, h, w) = c.inputs[0].dims4();
            vec![Some(crop_tensor(c.grad, y0, x0, h, w))]
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let value = upsample2(self.value(a));
        self.op(&[a], value, |c| {
            let (n, ch, h, w) = c.inputs[0].dims4();
            let mut g = Tensor::zeros(&[n, ch, h, w]);
            let gd = c.grad.data();
            let w2 = 2 * w;
            for p in 0..n * ch {
                for y in 0..h {
                    for x in 0..w {
                        let base = p * 4 * h * w + 2 * y * w2 + 2 * x;
                        g.data_mut()[(p * h + y) * w + x] = gd[base] + gd[base + 1] + gd[base + w2] + gd[base + w2 + 1];
                    }
                }
            }
            vec![Some(g)]
        })
    }

    /// 2×2 average pooling.
    pub fn avgpool2(&mut self, a: Var) -> Var {
        let value = avgpool2(self.value(a));
        self.op(&[a], value, |c| {
            let quarter = T::of(0.25);
            let up = upsample2(c.grad);
            vec![Some(up.map(|g| g * quarter))]
        })
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a [m,k] · b [k,n]`, or `a · bᵀ` with `b [n,k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ndim(), 2, "matmul lhs must be 2-d");
        assert_eq!(bv.ndim(), 2, "matmul rhs must be 2-d");
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (kb, n) = if trans_b { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        assert_eq!(k, kb, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, n, k, T::one(), av.data(), false, bv.data(), trans_b, T::zero(), out.data_mut());
        self.op(&[a, b], out, move |c| {
            let ga = c.needs[0].then(|| {
                // gA = gY · op(B)ᵀ
                let mut g = Tensor::zeros(&[m, k]);
                gemm(m, k, n, T::one(), c.grad.data(), false, c.inputs[1].data(), !trans_b, T::zero(), g.data_mut());
                g
            });
            let gb = c.needs[1].then(|| {
                if trans_b {
                    // B is [n,k]: gB = gYᵀ · A
                    let mut g = Tensor::zeros(&[n, k]);
                    gemm(n, k, m, T::one(), c.grad.data(), true, c.inputs[0].data(), false, T::zero(), g.data_mut());
                    g
                } else {
                    let mut g = Tensor::zeros(&[k, n]);
                    gemm(k, n, m, T::one(), c.inputs[0].data(), true, c.grad.data(), false, T::zero(), g.data_mut());
                    g
                }
            });
            vec![ga, gb]
        })
    }

    /// Cross-correlation of `x [N,Cin,H,W]` with `w [Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), stride, pad);
        self.op(&[x, w], value, move |c| {
            let (gx, gw) = conv2d_backward(c.inputs[0], c.inputs[1], c.grad, stride, pad, c.needs[0], c.needs[1]);
            vec![gx, gw]
        })
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.param_vars.get(&p.id()).and_then(|&v| self.wrt(v))
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn crop_tensor<T: Real>(src: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let (n, c, sh, sw) = src.dims4();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        for y in 0..h {
            let s = (p * sh + y0 + y) * sw + x0;
            out.data_mut()[(p * h + y) * w..(p * h + y + 1) * w].copy_from_slice(&src.data()[s..s + w]);
        }
    }
    out
}

pub(crate) fn place_tensor<T: Real>(src: &Tensor<T>, out_h: usize, out_w: usize, y0: usize, x0: usize) -> Tensor<T> {
    let (n, c, h, w) = src.dims4();
    assert!(y0 + h <= out_h && x0 + w <= out_w, "placement outside canvas");
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    for p in 0..n * c {
        for y in 0..h {
            let d = (p * out_h + y0 + y) * out_w + x0;
            out.data_mut()[d..d + w].copy_from_slice(&src.data()[(p * h + y) * w..(p * h + y + 1) * w]);
        }
    }
    out
}

pub(crate) fn upsample2<T: Real>(src: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = src.dims4();
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let w2 = 2 * w;
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                let v = src.data()[(p * h + y) * w + x];
                let base = p * 4 * h * w + 2 * y * w2 + 2 * x;
                let d = out.data_mut();
                d[base] = v;
                d[base + 1] = v;
                d[base + w2] = v;
                d[base + w2 + 1] = v;
            }
        }
    }
    out
}

pub(crate) fn avgpool2<T: Real>(src: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = src.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let s = src.data();
    for p in 0..n * c {
        for y in 0..ho {
            for x in 0..wo {
                let base = (p * h + 2 * y) * w + 2 * x;
                out.data_mut()[(p * ho + y) * wo + x] = (s[base] + s[base + 1] + s[base + w] + s[base + w + 1]) * quarter;
            }
        }
    }
    out
}
