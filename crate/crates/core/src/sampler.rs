//! Probability-flow ODE sampling from `t = 1` (noise) to `t = 0` (data),
//! classifier-free guidance, and training-free inpainting.

use std::cell::Cell;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::conditioning::{Conditions, PointQuery, PointSet};
use crate::config::Stage;
use crate::data::AnnotatedTile;
use crate::error::{Error, Result};
use crate::flow::{interpolate, standard_normal_grid, LinearSchedule};
use crate::image::ImageGrid;
use crate::model::GeoDiT;
use crate::nn::Params;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Heun,
}

impl FromStr for Integrator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "heun" => Ok(Self::Heun),
            other => Err(Error::Config(format!("unknown integrator `{other}` (euler|heun)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub cfg_scale: f64,
    pub integrator: Integrator,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 100, cfg_scale: 0.0, integrator: Integrator::Euler, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("cfg_scale {} must be finite and nonnegative", self.cfg_scale)));
        }
        Ok(())
    }
}

/// Anything that predicts a velocity for a batch of states.
pub trait VelocityField {
    fn velocity(&self, xs: &[&ImageGrid], ts: &[f64], conds: &[&Conditions]) -> Result<Vec<ImageGrid>>;

    /// Rejects conditions the field cannot consume.
    fn check_conditions(&self, _cond: &Conditions) -> Result<()> {
        Ok(())
    }
}

/// A trained network with its parameters, counting forward evaluations.
pub struct ModelField<'a> {
    pub net: &'a GeoDiT,
    pub params: &'a Params,
    evaluations: Cell<usize>,
}

impl<'a> ModelField<'a> {
    pub fn new(net: &'a GeoDiT, params: &'a Params) -> Self {
        Self { net, params, evaluations: Cell::new(0) }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.get()
    }
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, xs: &[&ImageGrid], ts: &[f64], conds: &[&Conditions]) -> Result<Vec<ImageGrid>> {
        self.evaluations.set(self.evaluations.get() + 1);
        self.net.predict(self.params, xs, ts, conds)
    }

    fn check_conditions(&self, cond: &Conditions) -> Result<()> {
        let stage = self.net.stage;
        if cond.caption.is_some() && !stage.has_text() {
            return Err(Error::StageOrder(format!("a caption needs the text stage, model is at `{stage}`")));
        }
        if (!cond.points.is_empty() || cond.latlon.is_some()) && stage != Stage::PointsGeo {
            return Err(Error::StageOrder(format!("points and geolocation need the points stage, model is at `{stage}`")));
        }
        Ok(())
    }
}

/// Closure-backed field with an evaluation counter.
pub struct FnField<F> {
    f: F,
    evaluations: Cell<usize>,
}

impl<F> FnField<F>
where
    F: Fn(&ImageGrid, f64, &Conditions) -> ImageGrid,
{
    pub fn new(f: F) -> Self {
        Self { f, evaluations: Cell::new(0) }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.get()
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&ImageGrid, f64, &Conditions) -> ImageGrid,
{
    fn velocity(&self, xs: &[&ImageGrid], ts: &[f64], conds: &[&Conditions]) -> Result<Vec<ImageGrid>> {
        self.evaluations.set(self.evaluations.get() + 1);
        Ok(xs.iter().zip(ts).zip(conds).map(|((x, t), c)| (self.f)(x, *t, c)).collect())
    }
}

/// `v_cond + s·(v_cond − v_uncond)`; `s = 0` makes exactly one evaluation.
pub fn guided_velocity(
    field: &dyn VelocityField,
    xs: &[&ImageGrid],
    t: f64,
    conds: &[&Conditions],
    cfg_scale: f64,
) -> Result<Vec<ImageGrid>> {
    for c in conds {
        field.check_conditions(c)?;
    }
    let ts = vec![t; xs.len()];
    let v_cond = field.velocity(xs, &ts, conds)?;
    if cfg_scale == 0.0 {
        return Ok(v_cond);
    }
    let nulls: Vec<Conditions> = conds.iter().map(|c| c.null()).collect();
    let null_refs: Vec<&Conditions> = nulls.iter().collect();
    let v_unc = field.velocity(xs, &ts, &null_refs)?;
    Ok(v_cond
        .into_iter()
        .zip(v_unc)
        .map(|(mut vc, vu)| {
            for (a, b) in vc.data_mut().iter_mut().zip(vu.data()) {
                *a += cfg_scale * (*a - b);
            }
            vc
        })
        .collect())
}

fn stream(seed: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(4).wrapping_add(purpose));
    rng
}

/// Initial noise for sample `index`.
pub fn initial_noise(shape: (usize, usize, usize), seed: u64, index: u64) -> ImageGrid {
    standard_normal_grid(shape.0, shape.1, shape.2, &mut stream(seed, index, 0))
}

fn axpy(x: &mut ImageGrid, a: f64, v: &ImageGrid) {
    for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
        *xi += a * vi;
    }
}

/// One ODE step of every state from `t` to `t_next < t`.
fn step(
    field: &dyn VelocityField,
    xs: &mut [ImageGrid],
    t: f64,
    t_next: f64,
    conds: &[&Conditions],
    cfg: &SamplerConfig,
) -> Result<()> {
    let dt = t - t_next;
    let refs: Vec<&ImageGrid> = xs.iter().collect();
    let v = guided_velocity(field, &refs, t, conds, cfg.cfg_scale)?;
    match cfg.integrator {
        Integrator::Euler => {
            for (x, v) in xs.iter_mut().zip(&v) {
                axpy(x, -dt, v);
            }
        }
        Integrator::Heun => {
            let pred: Vec<ImageGrid> = xs
                .iter()
                .zip(&v)
                .map(|(x, v)| {
                    let mut p = x.clone();
                    axpy(&mut p, -dt, v);
                    p
                })
                .collect();
            let prefs: Vec<&ImageGrid> = pred.iter().collect();
            let v2 = guided_velocity(field, &prefs, t_next, conds, cfg.cfg_scale)?;
            for ((x, a), b) in xs.iter_mut().zip(&v).zip(&v2) {
                for ((xi, ai), bi) in x.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *xi -= dt * 0.5 * (ai + bi);
                }
            }
        }
    }
    Ok(())
}

fn time_grid(n: usize) -> Vec<f64> {
    (0..=n).map(|k| 1.0 - k as f64 / n as f64).collect()
}

/// Integrates the given starting states from `t = 1` to `t = 0`.
pub fn integrate_from(
    field: &dyn VelocityField,
    starts: Vec<ImageGrid>,
    conds: &[&Conditions],
    cfg: &SamplerConfig,
) -> Result<Vec<ImageGrid>> {
    cfg.validate()?;
    if starts.len() != conds.len() {
        return Err(Error::Shape("one condition per sample is required".into()));
    }
    let mut xs = starts;
    let ts = time_grid(cfg.num_steps);
    for k in 0..cfg.num_steps {
        step(field, &mut xs, ts[k], ts[k + 1], conds, cfg)?;
        if !xs.iter().all(ImageGrid::is_finite) {
            return Err(Error::NonFinite { step: k });
        }
    }
    Ok(xs)
}

/// Samples `conds.len()` images; sample `i` uses noise stream
/// `(cfg.seed, first_index + i)`, so results do not depend on batching.
pub fn integrate_batch(
    field: &dyn VelocityField,
    shape: (usize, usize, usize),
    conds: &[&Conditions],
    cfg: &SamplerConfig,
    first_index: u64,
) -> Result<Vec<ImageGrid>> {
    let starts = (0..conds.len()).map(|i| initial_noise(shape, cfg.seed, first_index + i as u64)).collect();
    integrate_from(field, starts, conds, cfg)
}

pub fn integrate(field: &dyn VelocityField, shape: (usize, usize, usize), cond: &Conditions, cfg: &SamplerConfig) -> Result<ImageGrid> {
    Ok(integrate_batch(field, shape, &[cond], cfg, 0)?.remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintTask {
    pub known: ImageGrid,
    /// Row-major per pixel, `true` = regenerate; broadcast over channels.
    pub mask: Vec<bool>,
    pub conditions: Conditions,
}

impl InpaintTask {
    pub fn validate(&self) -> Result<()> {
        let (h, w, _) = self.known.shape();
        if self.mask.len() != h * w {
            return Err(Error::Shape(format!("mask of {} cells for a {h}x{w} image", self.mask.len())));
        }
        Ok(())
    }
}

/// Inpaints every task; task `i` draws its initial noise exactly like
/// sample `first_index + i` of [`integrate_batch`] and its re-noising of the
/// known region from a separate stream, so an all-true mask reproduces
/// plain sampling bit for bit.
pub fn inpaint_batch(field: &dyn VelocityField, tasks: &[InpaintTask], cfg: &SamplerConfig, first_index: u64) -> Result<Vec<ImageGrid>> {
    cfg.validate()?;
    for t in tasks {
        t.validate()?;
    }
    let Some(first) = tasks.first() else {
        return Ok(Vec::new());
    };
    let shape = first.known.shape();
    if tasks.iter().any(|t| t.known.shape() != shape) {
        return Err(Error::Shape("inpainting batch has mixed shapes".into()));
    }
    let mut xs: Vec<ImageGrid> = (0..tasks.len()).map(|i| initial_noise(shape, cfg.seed, first_index + i as u64)).collect();
    let mut renoise: Vec<ChaCha8Rng> = (0..tasks.len()).map(|i| stream(cfg.seed, first_index + i as u64, 1)).collect();
    let conds: Vec<&Conditions> = tasks.iter().map(|t| &t.conditions).collect();
    let ts = time_grid(cfg.num_steps);
    for k in 0..cfg.num_steps {
        step(field, &mut xs, ts[k], ts[k + 1], &conds, cfg)?;
        let t_next = ts[k + 1];
        for ((x, task), rng) in xs.iter_mut().zip(tasks).zip(renoise.iter_mut()) {
            if task.mask.iter().all(|&m| m) {
                continue;
            }
            let fill = if k + 1 == cfg.num_steps {
                task.known.clone()
            } else {
                let eps = standard_normal_grid(shape.0, shape.1, shape.2, rng);
                interpolate(&task.known, &eps, t_next, &LinearSchedule)?.x_t
            };
            overwrite_unmasked(x, &fill, &task.mask);
        }
        if !xs.iter().all(ImageGrid::is_finite) {
            return Err(Error::NonFinite { step: k });
        }
    }
    Ok(xs)
}

pub fn inpaint(field: &dyn VelocityField, task: &InpaintTask, cfg: &SamplerConfig) -> Result<ImageGrid> {
    task.validate()?;
    if task.mask.iter().all(|&m| !m) {
        return Ok(task.known.clone());
    }
    Ok(inpaint_batch(field, std::slice::from_ref(task), cfg, 0)?.remove(0))
}

fn overwrite_unmasked(x: &mut ImageGrid, src: &ImageGrid, mask: &[bool]) {
    let c = x.channels();
    for (cell, &m) in mask.iter().enumerate() {
        if !m {
            let r = cell * c..(cell + 1) * c;
            x.data_mut()[r.clone()].copy_from_slice(&src.data()[r]);
        }
    }
}

/// Inpainting prompts: `n ~ Poisson(mean_rate · fraction_masked)` clamped to
/// `[1, capacity]`, placed uniformly over masked cells that carry an
/// annotation in `tile`, tagged by that annotation, in token units.
/// A mask with no annotated cell yields an empty set.
pub fn build_inpaint_points(
    mask: &[bool],
    tile: &AnnotatedTile,
    mean_rate: f64,
    stride: usize,
    capacity: usize,
    rng: &mut impl Rng,
) -> Result<PointSet> {
    let size = tile.size();
    if mask.len() != size * size {
        return Err(Error::Shape(format!("mask of {} cells for a {size}x{size} tile", mask.len())));
    }
    if capacity == 0 {
        return Err(Error::OutOfRange("point capacity must be at least 1".into()));
    }
    let masked = mask.iter().filter(|&&m| m).count();
    if masked == 0 && mean_rate > 0.0 {
        return Err(Error::Empty("inpainting mask has no true cell".into()));
    }
    let n = poisson_count(mean_rate * masked as f64 / mask.len() as f64, rng)?.clamp(1, capacity);
    let cells: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] && tile.labels[i].is_some()).collect();
    if cells.is_empty() {
        return Ok(PointSet::empty(capacity));
    }
    let s = stride as f64;
    let points = (0..n)
        .map(|_| {
            let i = cells[rng.random_range(0..cells.len())];
            PointQuery { x: (i % size) as f64 / s, y: (i / size) as f64 / s, tag_id: tile.labels[i].expect("annotated") }
        })
        .collect();
    PointSet::new(points, capacity)
}

/// `Poisson(lambda)` draw; `lambda = 0` gives 0.
pub fn poisson_count(lambda: f64, rng: &mut impl Rng) -> Result<usize> {
    if lambda == 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(lambda).map_err(|e| Error::OutOfRange(format!("Poisson rate {lambda}: {e}")))?;
    Ok(d.sample(rng) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ImageGrid {
        ImageGrid::filled(1, 1, 1, v)
    }

    fn null() -> Conditions {
        Conditions::unconditional(1)
    }

    #[test]
    fn guidance_arithmetic() {
        let f = FnField::new(|_x: &ImageGrid, _t, c: &Conditions| scalar(if c.caption.is_some() { 1.0 } else { 0.0 }));
        let cond = Conditions { caption: Some(0), ..null() };
        let v = guided_velocity(&f, &[&scalar(0.0)], 0.5, &[&cond], 2.0).unwrap();
        assert_eq!(v[0].data(), &[3.0]);
        assert_eq!(f.evaluations(), 2);
        let same = FnField::new(|_x: &ImageGrid, _t, _c: &Conditions| scalar(0.25));
        assert_eq!(guided_velocity(&same, &[&scalar(0.0)], 0.5, &[&cond], 1.0).unwrap()[0].data(), &[0.25]);
    }

    #[test]
    fn zero_scale_evaluates_once() {
        let f = FnField::new(|x: &ImageGrid, t, _c: &Conditions| scalar(x.data()[0] * t));
        let v = guided_velocity(&f, &[&scalar(2.0)], 0.25, &[&null()], 0.0).unwrap();
        assert_eq!(v[0].data(), &[0.5]);
        assert_eq!(f.evaluations(), 1);
    }

    #[test]
    fn single_euler_step() {
        let f = FnField::new(|_x: &ImageGrid, _t, _c: &Conditions| scalar(0.3));
        let cfg = SamplerConfig { num_steps: 1, ..Default::default() };
        let out = integrate_from(&f, vec![scalar(1.25)], &[&null()], &cfg).unwrap();
        assert_eq!(out[0].data(), &[1.25 - 0.3]);
    }

    #[test]
    fn point_mass_field_is_recovered() {
        let target = 0.7;
        let f = FnField::new(move |x: &ImageGrid, t: f64, _c: &Conditions| scalar((x.data()[0] - target) / t));
        let cfg = SamplerConfig::default();
        let out = integrate_from(&f, vec![scalar(1.0)], &[&null()], &cfg).unwrap();
        assert!((out[0].data()[0] - target).abs() < 1e-3);
    }

    #[test]
    fn nonfinite_aborts_with_step() {
        let f = FnField::new(|_x: &ImageGrid, t: f64, _c: &Conditions| scalar(if t < 0.55 { f64::NAN } else { 0.0 }));
        let cfg = SamplerConfig { num_steps: 10, ..Default::default() };
        let err = integrate_from(&f, vec![scalar(0.0)], &[&null()], &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 5 }), "{err:?}");
    }

    #[test]
    fn integrator_parses() {
        assert_eq!("heun".parse::<Integrator>().unwrap(), Integrator::Heun);
        assert!("rk4".parse::<Integrator>().is_err());
        assert!(SamplerConfig { num_steps: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { cfg_scale: -1.0, ..Default::default() }.validate().is_err());
    }
}
