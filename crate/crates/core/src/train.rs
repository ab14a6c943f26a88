//! Training data stream and the per-stage optimization loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::conditioning::{Conditions, PointSet};
use crate::config::{ModelConfig, Stage, TrainConfig};
use crate::data::{generate_tile, sample_point_prompts, AnnotatedTile, ARCHETYPES};
use crate::error::{Error, Result};
use crate::flow::{interpolate, standard_normal_grid, LinearSchedule};
use crate::image::ImageGrid;
use crate::model::{init_params, patchify_grids, upgrade_params, GeoDiT};
use crate::nn::{AdamW, ParamVars, Params};
use crate::repa::{alignment_loss, TargetEncoder};
use crate::tensor::Tensor;

/// Which half of the synthetic stream an example comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// The synthetic dataset as a pure function of `(dataset_seed, split, index)`.
#[derive(Clone, Debug)]
pub struct DataStream {
    pub dataset_seed: u64,
    pub size: usize,
    pub stride: usize,
    pub max_points: usize,
}

impl DataStream {
    pub fn new(model: &ModelConfig, dataset_seed: u64) -> Self {
        Self { dataset_seed, size: model.grid_size, stride: model.patch_size, max_points: model.max_points }
    }

    fn rng(&self, split: Split, index: u64) -> ChaCha8Rng {
        let domain = match split {
            Split::Train => 0x7261_696e,
            Split::Eval => 0x6576_616c,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.dataset_seed ^ domain);
        rng.set_stream(index);
        rng
    }

    /// Tile `index` of `split` with fully populated conditions: its caption
    /// (archetype), its geolocation, and `n ~ U{n_range}` point prompts.
    pub fn example(&self, split: Split, index: u64, n_range: (usize, usize)) -> Result<(AnnotatedTile, Conditions)> {
        let mut rng = self.rng(split, index);
        let archetype = rng.random_range(0..ARCHETYPES.len());
        let tile = generate_tile(rng.random(), archetype, self.size)?;
        let points = sample_point_prompts(&tile, &mut rng, n_range, self.stride, self.max_points)?;
        let cond = Conditions { caption: Some(archetype), points, latlon: Some(tile.spec.latlon) };
        Ok((tile, cond))
    }
}

/// Drops each condition group independently with probability `p`.
pub fn apply_dropout(cond: &mut Conditions, p: f64, rng: &mut impl Rng) {
    if rng.random::<f64>() < p {
        cond.caption = None;
    }
    if rng.random::<f64>() < p {
        cond.points = PointSet::empty(cond.points.capacity());
    }
    if rng.random::<f64>() < p {
        cond.latlon = None;
    }
}

/// Losses of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub v_loss: f64,
    pub a_loss: f64,
    /// Mean cosine between projected hidden tokens and target features.
    pub cos: f64,
}

/// Everything one stage of training needs besides its parameters.
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub net: GeoDiT,
    pub encoder: TargetEncoder,
    pub data: DataStream,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        if train_cfg.stage.has_text() && model_cfg.caption_vocab < ARCHETYPES.len() {
            return Err(Error::Config(format!(
                "caption_vocab {} cannot hold the {} scene archetypes",
                model_cfg.caption_vocab,
                ARCHETYPES.len()
            )));
        }
        let net = GeoDiT::new(model_cfg.clone(), train_cfg.stage)?;
        let encoder = TargetEncoder::new(&model_cfg);
        let data = DataStream::new(&model_cfg, train_cfg.dataset_seed);
        Ok(Self { model_cfg, train_cfg, net, encoder, data })
    }

    /// Starting parameters: fresh at the unconditional stage, carried over
    /// from the preceding stage otherwise (or resumed from the same stage).
    pub fn initial_params(&self, init: Option<&Checkpoint>) -> Result<(Params, u64)> {
        let stage = self.train_cfg.stage;
        match init {
            None if stage == Stage::Unconditional => Ok((init_params(&self.model_cfg, stage, self.train_cfg.seed)?, 0)),
            None => Err(Error::StageOrder(format!("stage `{stage}` needs a checkpoint of stage `{}`", stage.previous().expect("non-first stage")))),
            Some(ckpt) => {
                if ckpt.config != self.model_cfg {
                    return Err(Error::Config("init checkpoint was trained with a different model config".into()));
                }
                ckpt.validate()?;
                if ckpt.stage == stage {
                    Ok((ckpt.params.clone(), ckpt.step))
                } else if Some(ckpt.stage) == stage.previous() {
                    Ok((upgrade_params(&ckpt.params, &self.model_cfg, stage, self.train_cfg.seed)?, 0))
                } else {
                    Err(Error::StageOrder(format!("cannot initialize stage `{stage}` from a `{}` checkpoint", ckpt.stage)))
                }
            }
        }
    }

    /// The batch of step `step`: clean images and (dropped-out) conditions.
    pub fn batch(&self, step: u64) -> Result<(Vec<ImageGrid>, Vec<Conditions>)> {
        let b = self.train_cfg.batch_size as u64;
        let mut drop_rng = self.step_rng(step, 1);
        let mut images = Vec::with_capacity(b as usize);
        let mut conds = Vec::with_capacity(b as usize);
        for slot in 0..b {
            let (tile, mut cond) = self.data.example(Split::Train, step * b + slot, self.train_cfg.points_range)?;
            apply_dropout(&mut cond, self.train_cfg.cond_dropout_prob, &mut drop_rng);
            images.push(tile.image);
            conds.push(cond);
        }
        Ok((images, conds))
    }

    fn step_rng(&self, step: u64, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train_cfg.seed);
        rng.set_stream(step.wrapping_mul(2).wrapping_add(purpose));
        rng
    }

    /// Loss and gradients of one step. The trunk sees
    /// `v_loss + align_weight · a_loss`; the alignment projection is also
    /// fitted as a probe on detached hidden tokens, so the logged cosine is
    /// meaningful even when `align_weight = 0`.
    pub fn loss_and_grads(&self, params: &Params, step: u64) -> Result<(StepStats, std::collections::BTreeMap<String, Tensor>)> {
        let (images, conds) = self.batch(step)?;
        let mut rng = self.step_rng(step, 0);
        let (h, w, c) = self.net.image_shape();
        let mut x_t = Vec::with_capacity(images.len());
        let mut v_t = Vec::with_capacity(images.len());
        let mut ts = Vec::with_capacity(images.len());
        for img in &images {
            let t = rng.random::<f64>();
            let eps = standard_normal_grid(h, w, c, &mut rng);
            let s = interpolate(img, &eps, t, &LinearSchedule)?;
            x_t.push(s.x_t);
            v_t.push(s.v_target);
            ts.push(t);
        }
        let p = self.model_cfg.patch_size;
        let x_refs: Vec<&ImageGrid> = x_t.iter().collect();
        let v_refs: Vec<&ImageGrid> = v_t.iter().collect();
        let target_v = patchify_grids(&v_refs, p)?;
        let n = self.model_cfg.num_tokens();
        let mut target_f = Tensor::zeros(images.len() * n, self.encoder.feat_dim());
        for (s, img) in images.iter().enumerate() {
            let f = self.encoder.target_features(img)?;
            target_f.data_mut()[s * n * f.cols()..(s + 1) * n * f.cols()].copy_from_slice(f.data());
        }

        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, params, true);
        let xp = g.constant(patchify_grids(&x_refs, p)?);
        let tv = g.constant(Tensor::from_vec(ts.len(), 1, ts));
        let cond_refs: Vec<&Conditions> = conds.iter().collect();
        let out = self.net.forward(&mut g, &pv, xp, tv, &cond_refs)?;
        let v_loss = g.mse(out.velocity, &target_v);
        let a_trunk = alignment_loss(&mut g, &pv, out.hidden, &target_f)?;
        let detached = g.constant(g.value(out.hidden).clone());
        let a_probe = alignment_loss(&mut g, &pv, detached, &target_f)?;
        let weighted = g.scale(a_trunk, self.model_cfg.align_weight);
        let total = g.add(v_loss, weighted);
        let total = g.add(total, a_probe);
        let a = g.value(a_probe).get(0, 0);
        let stats = StepStats { step, v_loss: g.value(v_loss).get(0, 0), a_loss: a, cos: 1.0 - a };
        if !(stats.v_loss.is_finite() && a.is_finite()) {
            return Err(Error::NonFinite { step: step as usize });
        }
        let mut grads = g.backward(total);
        Ok((stats, pv.collect_grads(&g, &mut grads)))
    }
}

/// Header of the training log.
pub const LOG_HEADER: &str = "step,v_loss,a_loss,cos";

pub fn format_log_row(s: &StepStats) -> String {
    format!("{},{},{},{}", s.step, s.v_loss, s.a_loss, s.cos)
}

/// Trains one stage for `train_cfg.steps` optimizer steps and returns the
/// final checkpoint. When `log_path` is given the per-step losses are
/// written there as CSV (every `log_every` steps). `on_step` sees every
/// step's statistics.
pub fn run_stage_with(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    init: Option<&Checkpoint>,
    log_path: Option<&Path>,
    mut on_step: impl FnMut(&StepStats, &Params),
) -> Result<Checkpoint> {
    let trainer = Trainer::new(model_cfg.clone(), train_cfg.clone())?;
    let (mut params, start) = trainer.initial_params(init)?;
    let mut opt = AdamW::new(train_cfg.learning_rate);
    let mut log = String::new();
    let _ = writeln!(log, "{LOG_HEADER}");
    let every = train_cfg.log_every.max(1) as u64;
    for step in start + 1..=start + train_cfg.steps as u64 {
        let (stats, grads) = trainer.loss_and_grads(&params, step)?;
        opt.update(&mut params, &grads);
        if step.is_multiple_of(every) || step == start + train_cfg.steps as u64 {
            let _ = writeln!(log, "{}", format_log_row(&stats));
        }
        on_step(&stats, &params);
        if let Some(path) = log_path {
            if step.is_multiple_of(1000) {
                std::fs::write(path, &log).map_err(|e| Error::io(path, e))?;
            }
        }
    }
    if let Some(path) = log_path {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, &log).map_err(|e| Error::io(path, e))?;
    }
    Ok(Checkpoint::new(model_cfg.clone(), train_cfg.stage, start + train_cfg.steps as u64, params))
}

pub fn run_stage(train_cfg: &TrainConfig, model_cfg: &ModelConfig, init: Option<&Checkpoint>, log_path: Option<&Path>) -> Result<Checkpoint> {
    run_stage_with(train_cfg, model_cfg, init, log_path, |_, _| {})
}

/// Parses a training log back into statistics.
pub fn parse_log(text: &str) -> Result<Vec<StepStats>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Parse { location: "log:1".into(), reason: format!("expected header `{LOG_HEADER}`") });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Parse { location: format!("log:{}", i + 2), reason: format!("malformed row `{l}`") };
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(StepStats {
                step: f[0].parse().map_err(|_| bad())?,
                v_loss: f[1].parse().map_err(|_| bad())?,
                a_loss: f[2].parse().map_err(|_| bad())?,
                cos: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelConfig, TrainConfig) {
        let m = ModelConfig {
            grid_size: 8,
            depth: 2,
            hidden_dim: 16,
            num_heads: 2,
            max_points: 6,
            align_block_index: 0,
            mlp_ratio: 2,
            caption_len: 2,
            feat_dim: 8,
            ..Default::default()
        };
        let t = TrainConfig { steps: 3, batch_size: 2, points_range: (0, 6), ..Default::default() };
        (m, t)
    }

    #[test]
    fn stream_is_pure() {
        let (m, _) = tiny();
        let d = DataStream::new(&m, 5);
        assert_eq!(d.example(Split::Train, 17, (0, 6)).unwrap(), d.example(Split::Train, 17, (0, 6)).unwrap());
        assert_ne!(d.example(Split::Train, 17, (0, 6)).unwrap().0, d.example(Split::Eval, 17, (0, 6)).unwrap().0);
    }

    #[test]
    fn runs_are_reproducible() {
        let (m, t) = tiny();
        let a = run_stage(&t, &m, None, None).unwrap();
        let b = run_stage(&t, &m, None, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.step, 3);
    }

    #[test]
    fn stage_order_is_enforced() {
        let (m, mut t) = tiny();
        t.stage = Stage::Text;
        assert!(matches!(run_stage(&t, &m, None, None), Err(Error::StageOrder(_))));
        t.stage = Stage::Unconditional;
        let c1 = run_stage(&t, &m, None, None).unwrap();
        t.stage = Stage::PointsGeo;
        assert!(matches!(run_stage(&t, &m, Some(&c1), None), Err(Error::StageOrder(_))));
        t.stage = Stage::Text;
        let other = ModelConfig { depth: 3, ..m.clone() };
        assert!(matches!(run_stage(&t, &other, Some(&c1), None), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_extremes() {
        let (m, _) = tiny();
        let d = DataStream::new(&m, 0);
        let (_, full) = d.example(Split::Train, 0, (3, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = full.clone();
        apply_dropout(&mut c, 0.0, &mut rng);
        assert_eq!(c, full);
        apply_dropout(&mut c, 1.0, &mut rng);
        assert_eq!(c, full.null());
    }

    #[test]
    fn log_round_trips() {
        let s = StepStats { step: 4, v_loss: 0.5, a_loss: 0.25, cos: 0.75 };
        let text = format!("{LOG_HEADER}\n{}\n", format_log_row(&s));
        assert_eq!(parse_log(&text).unwrap(), vec![s]);
        assert!(parse_log("a,b\n").is_err());
    }
}
