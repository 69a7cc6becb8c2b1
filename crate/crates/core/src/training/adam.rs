use std::collections::BTreeMap;

use crate::container::Container;
use crate::error::Result;
use crate::tensor::{Param, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
struct Moments<T: Real> {
    m: Tensor<T>,
    v: Tensor<T>,
    steps: u64,
}

/// Adaptive moment estimation with per-parameter state keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Param<T>, grad: &Tensor<T>) {
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(grad.shape()),
            v: Tensor::zeros(grad.shape()),
            steps: 0,
        });
        st.steps += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(st.steps as i32));
        let c2 = T::of(1.0 - self.beta2.powi(st.steps as i32));
        let (lr, eps, one) = (T::of(self.lr), T::of(self.eps), T::one());
        let (m, v, p) = (st.m.data_mut(), st.v.data_mut(), param.value.data_mut());
        for (i, &g) in grad.data().iter().enumerate() {
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }

    pub fn write_to(&self, prefix: &str, c: &mut Container) {
        for (name, st) in &self.state {
            c.insert_tensor(&format!("{prefix}.m.{name}"), &st.m);
            c.insert_tensor(&format!("{prefix}.v.{name}"), &st.v);
            c.insert_i32(&format!("{prefix}.steps.{name}"), &[1], vec![st.steps as i32]);
        }
    }

    pub fn read_from(&mut self, prefix: &str, c: &Container) -> Result<()> {
        self.state.clear();
        let steps_prefix = format!("{prefix}.steps.");
        let names: Vec<String> = c.names().filter_map(|n| n.strip_prefix(&steps_prefix).map(str::to_string)).collect();
        for name in names {
            let m = c.tensor(&format!("{prefix}.m.{name}"))?;
            let v = c.tensor_shaped(&format!("{prefix}.v.{name}"), m.shape())?;
            let (_, steps) = c.i32(&format!("{steps_prefix}{name}"))?;
            self.state.insert(
                name,
                Moments {
                    m,
                    v,
                    steps: steps[0] as u64,
                },
            );
        }
        Ok(())
    }
}
