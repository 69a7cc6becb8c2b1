//! Numpy-style broadcasting for elementwise binary ops and the matching
//! reduction used in their backward pass.

use super::{Real, Tensor};

/// Right-aligned broadcast of two shapes, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` viewed inside `out` (0 along broadcast axes).
fn strides_in(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + nd - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
fn for_each_offset(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let total: usize = out.iter().product();
    if inner == 0 || total == 0 {
        return;
    }
    let outer = total / inner;
    let mut idx = vec![0usize; nd - 1];
    for o in 0..outer {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..nd - 1 {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        let base = o * inner;
        for j in 0..inner {
            f(base + j, oa + j * ia, ob + j * ib);
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let sa = strides_in(a.shape(), &out);
    let sb = strides_in(b.shape(), &out);
    let n: usize = out.iter().product();
    let mut data = vec![T::zero(); n];
    let (ad, bd) = (a.data(), b.data());
    for_each_offset(&out, &sa, &sb, |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
    Tensor::from_vec(&out, data)
}

/// Sums `grad` (shaped like a broadcast result) down to `shape`.
pub(crate) fn reduce_to<T: Real>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape().to_vec();
    let st = strides_in(shape, &out);
    let zero = vec![0; out.len()];
    let mut acc = Tensor::zeros(shape);
    let gd = grad.data();
    let ad = acc.data_mut();
    for_each_offset(&out, &st, &zero, |i, it, _| ad[it] += gd[i]);
    acc
}
