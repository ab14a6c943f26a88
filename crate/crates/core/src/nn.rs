//! Named parameters, initializers, and the optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Grads, Graph, Var};
use crate::config::Stage;
use crate::tensor::Tensor;

/// Parameter bundle keyed by dotted path, e.g. `blocks.0.attn.qkv.w`.
pub type Params = BTreeMap<String, Tensor>;

/// How a parameter is initialized when first created.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Normal(f64),
}

impl Init {
    pub fn sample(self, rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Const(v) => Tensor::filled(rows, cols, v),
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
            }
            Init::Normal(std) => Tensor::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            }),
        }
    }
}

/// Shape and initializer of one named parameter, and the training stage
/// that introduces it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
    pub stage: Stage,
}

/// Collects [`ParamSpec`]s for one stage.
pub struct SpecBuilder<'a> {
    out: &'a mut Vec<ParamSpec>,
    stage: Stage,
}

impl<'a> SpecBuilder<'a> {
    pub fn new(out: &'a mut Vec<ParamSpec>, stage: Stage) -> Self {
        Self { out, stage }
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> &mut Self {
        self.out.push(ParamSpec { name: name.into(), rows, cols, init, stage: self.stage });
        self
    }

    /// `{prefix}.w: fan_in × fan_out` and a zero `{prefix}.b`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, init: Init) -> &mut Self {
        self.add(format!("{prefix}.w"), fan_in, fan_out, init);
        self.add(format!("{prefix}.b"), 1, fan_out, Init::Zeros)
    }
}

/// Graph leaves for a [`Params`] bundle.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Copies every parameter onto `g`. With `trainable == false` the
    /// leaves are constants and backward skips them.
    pub fn bind(g: &mut Graph, params: &Params, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Self { vars }
    }

    /// Panics when `name` is not bound; parameter sets are validated
    /// against the config before a forward pass is built.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients by name; parameters that received none map to zeros.
    pub fn collect_grads(&self, g: &Graph, grads: &mut Grads) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let t = grads.take(v).unwrap_or_else(|| {
                    let (r, c) = g.shape(v);
                    Tensor::zeros(r, c)
                });
                (k.clone(), t)
            })
            .collect()
    }
}

/// `x · w + b` using the `{prefix}.w` / `{prefix}.b` parameters.
pub fn linear(g: &mut Graph, pv: &ParamVars, prefix: &str, x: Var) -> Var {
    let w = pv.get(&format!("{prefix}.w"));
    let b = pv.try_get(&format!("{prefix}.b"));
    g.linear(x, w, b)
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let (b1, b2) = (self.beta1, self.beta2);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let pi = &mut p.data_mut()[i];
                *pi -= self.lr * (update + self.weight_decay * *pi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut params = Params::new();
        params.insert("p".into(), Tensor::from_vec(1, 2, vec![1.0, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::from_vec(1, 2, vec![0.3, -5.0]));
        let mut opt = AdamW::new(0.1);
        opt.update(&mut params, &grads);
        let p = &params["p"];
        assert!((p.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn xavier_respects_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = Init::Xavier.sample(10, 20, &mut rng);
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }
}
