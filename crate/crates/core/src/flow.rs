//! Flow-matching interpolant, regression target, and objective.
//!
//! Data sits at `t = 0` and noise at `t = 1`:
//! `x_t = α(t)·x̂ + σ(t)·ε`, and the network regresses
//! `v = α'(t)·x̂ + σ'(t)·ε`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Interpolation coefficients and their time derivatives.
pub trait FlowSchedule: Send + Sync {
    fn alpha(&self, t: f64) -> f64;
    fn sigma(&self, t: f64) -> f64;
    fn dalpha(&self, t: f64) -> f64;
    fn dsigma(&self, t: f64) -> f64;
}

/// `α = 1 − t`, `σ = t`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LinearSchedule;

impl FlowSchedule for LinearSchedule {
    fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }
    fn sigma(&self, t: f64) -> f64 {
        t
    }
    fn dalpha(&self, _t: f64) -> f64 {
        -1.0
    }
    fn dsigma(&self, _t: f64) -> f64 {
        1.0
    }
}

/// Variance-preserving trigonometric path, `α = cos(πt/2)`, `σ = sin(πt/2)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct CosineSchedule;

impl FlowSchedule for CosineSchedule {
    fn alpha(&self, t: f64) -> f64 {
        // Exact endpoints: cos(π/2) is not exactly zero in floating point.
        if t >= 1.0 {
            0.0
        } else {
            (std::f64::consts::FRAC_PI_2 * t).cos()
        }
    }
    fn sigma(&self, t: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * t).sin()
    }
    fn dalpha(&self, t: f64) -> f64 {
        -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin()
    }
    fn dsigma(&self, t: f64) -> f64 {
        std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).cos()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x_hat: ImageGrid,
    pub eps: ImageGrid,
    pub t: f64,
    pub x_t: ImageGrid,
    pub v_target: ImageGrid,
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn interpolate(x_hat: &ImageGrid, eps: &ImageGrid, t: f64, sched: &dyn FlowSchedule) -> Result<FlowSample> {
    x_hat.same_shape(eps)?;
    check_t(t)?;
    let (a, s, da, ds) = (sched.alpha(t), sched.sigma(t), sched.dalpha(t), sched.dsigma(t));
    let mut x_t = x_hat.clone();
    let mut v_target = x_hat.clone();
    for ((xt, vt), (&x, &e)) in x_t
        .data_mut()
        .iter_mut()
        .zip(v_target.data_mut().iter_mut())
        .zip(x_hat.data().iter().zip(eps.data()))
    {
        *xt = a * x + s * e;
        *vt = da * x + ds * e;
    }
    Ok(FlowSample { x_hat: x_hat.clone(), eps: eps.clone(), t, x_t, v_target })
}

/// Mean squared error between a predicted velocity and the sample's target.
pub fn velocity_loss(v_pred: &ImageGrid, sample: &FlowSample) -> Result<f64> {
    v_pred.same_shape(&sample.v_target)?;
    let n = v_pred.len() as f64;
    Ok(v_pred.data().iter().zip(sample.v_target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn standard_normal_grid(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> ImageGrid {
    let data = (0..h * w * c).map(|_| StandardNormal.sample(rng)).collect();
    ImageGrid::from_vec(h, w, c, data).expect("length matches by construction")
}

/// Draws `t ~ U[0, 1]` and `ε ~ N(0, I)` per element of `data`.
pub fn sample_training_batch(
    data: &[ImageGrid],
    rng: &mut impl Rng,
    sched: &dyn FlowSchedule,
) -> Result<Vec<FlowSample>> {
    if data.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    data.iter()
        .map(|x| {
            let t: f64 = rng.random_range(0.0..=1.0);
            let (h, w, c) = x.shape();
            let eps = standard_normal_grid(h, w, c, rng);
            interpolate(x, &eps, t, sched)
        })
        .collect()
}
