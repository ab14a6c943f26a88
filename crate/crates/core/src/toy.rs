//! Flow matching without the transformer: a small MLP velocity field on a
//! 2D Gaussian mixture, sampled through the regular ODE sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::Graph;
use crate::conditioning::Conditions;
use crate::error::{Error, Result};
use crate::flow::{FlowSchedule, LinearSchedule};
use crate::image::ImageGrid;
use crate::nn::{linear, AdamW, Init, ParamVars, Params};
use crate::sampler::{integrate_batch, SamplerConfig, VelocityField};
use crate::tensor::Tensor;

const TIME_FREQS: [f64; 4] = [1.0, 4.0, 16.0, 64.0];

/// Equal-weight isotropic mixture in the plane.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture2d {
    pub means: Vec<[f64; 2]>,
    pub std: f64,
}

impl GaussianMixture2d {
    /// `k` modes evenly spaced on a circle.
    pub fn ring(k: usize, radius: f64, std: f64) -> Self {
        let means = (0..k)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / k as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self { means, std }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        let m = self.means[rng.random_range(0..self.means.len())];
        [m[0] + self.std * rng.sample::<f64, _>(StandardNormal), m[1] + self.std * rng.sample::<f64, _>(StandardNormal)]
    }

    /// Index of the nearest mode, if it lies within `max_dist`.
    pub fn assign(&self, p: [f64; 2], max_dist: f64) -> Option<usize> {
        let d2 = |m: &[f64; 2]| (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2);
        let (i, best) = self.means.iter().map(d2).enumerate().min_by(|a, b| a.1.total_cmp(&b.1))?;
        (best <= max_dist * max_dist).then_some(i)
    }

    /// Fraction of `points` assigned to each mode (within `max_dist`).
    pub fn mode_mass(&self, points: &[[f64; 2]], max_dist: f64) -> Vec<f64> {
        let mut counts = vec![0usize; self.means.len()];
        for p in points {
            if let Some(i) = self.assign(*p, max_dist) {
                counts[i] += 1;
            }
        }
        counts.iter().map(|&c| c as f64 / points.len().max(1) as f64).collect()
    }
}

/// Two hidden SiLU layers over `[x, y, t, cos(t·f), sin(t·f)]`.
#[derive(Clone, Debug)]
pub struct MlpVelocity {
    pub params: Params,
}

impl MlpVelocity {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = 3 + 2 * TIME_FREQS.len();
        let mut params = Params::new();
        for (name, fan_in, fan_out) in [("fc1", input, hidden), ("fc2", hidden, hidden), ("out", hidden, 2)] {
            params.insert(format!("{name}.w"), Init::Xavier.sample(fan_in, fan_out, &mut rng));
            params.insert(format!("{name}.b"), Tensor::zeros(1, fan_out));
        }
        Self { params }
    }

    fn forward(&self, g: &mut Graph, pv: &ParamVars, xy: &[[f64; 2]], ts: &[f64]) -> crate::autograd::Var {
        let n = xy.len();
        let pos = g.constant(Tensor::from_fn(n, 3, |r, c| if c < 2 { xy[r][c] } else { ts[r] }));
        let t = g.constant(Tensor::from_vec(n, 1, ts.to_vec()));
        let temb = g.sincos_embed(t, &TIME_FREQS);
        let x = g.concat_cols(&[pos, temb]);
        let h = linear(g, pv, "fc1", x);
        let h = g.silu(h);
        let h = linear(g, pv, "fc2", h);
        let h = g.silu(h);
        linear(g, pv, "out", h)
    }

    pub fn predict(&self, xy: &[[f64; 2]], ts: &[f64]) -> Tensor {
        let mut g = Graph::inference();
        let pv = ParamVars::bind(&mut g, &self.params, false);
        let out = self.forward(&mut g, &pv, xy, ts);
        g.value(out).clone()
    }

    /// One flow-matching step on `batch` fresh mixture samples; returns the loss.
    pub fn train_step(&mut self, data: &GaussianMixture2d, batch: usize, opt: &mut AdamW, rng: &mut impl Rng) -> f64 {
        let sched = LinearSchedule;
        let mut xy = Vec::with_capacity(batch);
        let mut ts = Vec::with_capacity(batch);
        let mut target = Tensor::zeros(batch, 2);
        for r in 0..batch {
            let x = data.sample(rng);
            let t: f64 = rng.random_range(0.0..=1.0);
            let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            xy.push([0, 1].map(|c| sched.alpha(t) * x[c] + sched.sigma(t) * e[c]));
            ts.push(t);
            for c in 0..2 {
                target.set(r, c, sched.dalpha(t) * x[c] + sched.dsigma(t) * e[c]);
            }
        }
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &self.params, true);
        let pred = self.forward(&mut g, &pv, &xy, &ts);
        let loss = g.mse(pred, &target);
        let value = g.value(loss).get(0, 0);
        let mut grads = g.backward(loss);
        let grads = pv.collect_grads(&g, &mut grads);
        opt.update(&mut self.params, &grads);
        value
    }
}

impl VelocityField for MlpVelocity {
    fn velocity(&self, xs: &[&ImageGrid], ts: &[f64], _conds: &[&Conditions]) -> Result<Vec<ImageGrid>> {
        if xs.iter().any(|x| x.len() != 2) {
            return Err(Error::Shape("the planar field takes 2-element states".into()));
        }
        let xy: Vec<[f64; 2]> = xs.iter().map(|x| [x.data()[0], x.data()[1]]).collect();
        let v = self.predict(&xy, ts);
        (0..xs.len()).map(|r| ImageGrid::from_vec(1, 1, 2, v.row(r).to_vec())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyFlowConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ToyFlowConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch_size: 128, hidden: 64, learning_rate: 1e-3, seed: 0 }
    }
}

/// Trains the MLP field on `data`; returns it with the per-step losses.
pub fn train_toy_flow(data: &GaussianMixture2d, cfg: &ToyFlowConfig) -> (MlpVelocity, Vec<f64>) {
    let mut model = MlpVelocity::new(cfg.hidden, cfg.seed);
    let mut opt = AdamW::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf10);
    let losses = (0..cfg.steps).map(|_| model.train_step(data, cfg.batch_size, &mut opt, &mut rng)).collect();
    (model, losses)
}

/// Draws `n` samples with the shared ODE sampler.
pub fn sample_toy_flow(model: &MlpVelocity, n: usize, sampler: &SamplerConfig) -> Result<Vec<[f64; 2]>> {
    let cond = Conditions::unconditional(1);
    let conds = vec![&cond; n];
    let out = integrate_batch(model, (1, 1, 2), &conds, sampler, 0)?;
    Ok(out.iter().map(|g| [g.data()[0], g.data()[1]]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_modes_and_assignment() {
        let gmm = GaussianMixture2d::ring(4, 2.0, 0.1);
        assert!((gmm.means[1][0]).abs() < 1e-15 && (gmm.means[1][1] - 2.0).abs() < 1e-15);
        assert_eq!(gmm.assign([1.9, 0.1], 0.5), Some(0));
        assert_eq!(gmm.assign([0.0, 0.0], 0.5), None);
        let mass = gmm.mode_mass(&[[2.0, 0.0], [0.0, -2.0], [0.0, 0.0], [2.1, 0.0]], 0.5);
        assert_eq!(mass, vec![0.5, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn short_training_lowers_the_loss() {
        let gmm = GaussianMixture2d::ring(8, 2.0, 0.1);
        let cfg = ToyFlowConfig { steps: 300, batch_size: 64, hidden: 32, ..Default::default() };
        let (model, losses) = train_toy_flow(&gmm, &cfg);
        let early: f64 = losses[..30].iter().sum::<f64>() / 30.0;
        let late: f64 = losses[270..].iter().sum::<f64>() / 30.0;
        assert!(late < early, "{early} -> {late}");
        let samples = sample_toy_flow(&model, 5, &SamplerConfig { num_steps: 4, ..Default::default() }).unwrap();
        assert!(samples.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
    }
}
