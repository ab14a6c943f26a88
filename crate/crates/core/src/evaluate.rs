//! Evaluation of a trained checkpoint on the held-out synthetic split.

use crate::checkpoint::Checkpoint;
use crate::conditioning::Conditions;
use crate::data::{fidelity_oracle, AnnotatedTile};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::metrics::{frechet_distance, mean, ssim, train_detector, DetectorConfig, MetricsReport};
use crate::model::GeoDiT;
use crate::repa::TargetEncoder;
use crate::sampler::{integrate_batch, ModelField, SamplerConfig};
use crate::tensor::Tensor;
use crate::train::{DataStream, Split};

/// Samples generated per forward batch.
pub const SAMPLE_CHUNK: usize = 16;

/// Held-out tiles `first..first + n` with their full conditions.
pub fn eval_examples(ckpt: &Checkpoint, dataset_seed: u64, first: u64, n: usize, n_range: (usize, usize)) -> Result<Vec<(AnnotatedTile, Conditions)>> {
    let stream = DataStream::new(&ckpt.config, dataset_seed);
    (first..first + n as u64).map(|i| stream.example(Split::Eval, i, n_range)).collect()
}

/// Keeps only the condition groups the checkpoint's stage understands.
pub fn restrict_to_stage(cond: &Conditions, ckpt: &Checkpoint) -> Conditions {
    let mut c = cond.clone();
    if !ckpt.stage.has_text() {
        c.caption = None;
    }
    if !ckpt.stage.has_points() {
        c.points = crate::conditioning::PointSet::empty(c.points.capacity());
        c.latlon = None;
    }
    c
}

/// Generates one sample per condition; sample `i` uses noise index
/// `first_index + i` regardless of chunking.
pub fn generate(ckpt: &Checkpoint, conds: &[Conditions], sampler: &SamplerConfig, first_index: u64) -> Result<Vec<ImageGrid>> {
    let net = GeoDiT::new(ckpt.config.clone(), ckpt.stage)?;
    let field = ModelField::new(&net, &ckpt.params);
    let shape = net.image_shape();
    let mut out = Vec::with_capacity(conds.len());
    for (k, chunk) in conds.chunks(SAMPLE_CHUNK).enumerate() {
        let refs: Vec<&Conditions> = chunk.iter().collect();
        out.extend(integrate_batch(&field, shape, &refs, sampler, first_index + (k * SAMPLE_CHUNK) as u64)?);
        log::debug!("generated {}/{}", out.len(), conds.len());
    }
    Ok(out)
}

/// Per-example conditioning fidelity and SSIM to the example's tile.
#[derive(Clone, Debug, PartialEq)]
pub struct FidelityStats {
    pub fidelity: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl FidelityStats {
    pub fn fidelity_mean(&self) -> f64 {
        mean(&self.fidelity)
    }

    pub fn ssim_mean(&self) -> f64 {
        mean(&self.ssim)
    }
}

pub fn score_samples(samples: &[ImageGrid], examples: &[(AnnotatedTile, Conditions)], radius: f64, stride: usize) -> Result<FidelityStats> {
    if samples.len() != examples.len() {
        return Err(Error::Shape(format!("{} samples for {} examples", samples.len(), examples.len())));
    }
    let fidelity = samples.iter().zip(examples).map(|(s, (_, c))| fidelity_oracle(s, &c.points, radius, stride)).collect();
    let ssim = samples.iter().zip(examples).map(|(s, (t, _))| ssim(s, &t.image)).collect::<Result<_>>()?;
    Ok(FidelityStats { fidelity, ssim })
}

/// Samples every example under its full conditions and scores the result.
pub fn fidelity_eval(
    ckpt: &Checkpoint,
    examples: &[(AnnotatedTile, Conditions)],
    sampler: &SamplerConfig,
    radius: f64,
) -> Result<(FidelityStats, Vec<ImageGrid>)> {
    let conds: Vec<Conditions> = examples.iter().map(|(_, c)| restrict_to_stage(c, ckpt)).collect();
    let samples = generate(ckpt, &conds, sampler, 0)?;
    Ok((score_samples(&samples, examples, radius, ckpt.config.patch_size)?, samples))
}

/// Pooled target-encoder features, one row per image.
pub fn feature_matrix(encoder: &TargetEncoder, images: &[ImageGrid]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * encoder.feat_dim());
    for img in images {
        data.extend(encoder.pooled_features(img)?);
    }
    Ok(Tensor::from_vec(images.len(), encoder.feat_dim(), data))
}

/// Fréchet distance between two image sets in pooled-feature space.
pub fn image_frechet(ckpt: &Checkpoint, a: &[ImageGrid], b: &[ImageGrid]) -> Result<f64> {
    let enc = TargetEncoder::new(&ckpt.config);
    frechet_distance(&feature_matrix(&enc, a)?, &feature_matrix(&enc, b)?)
}

/// Which statistics [`evaluate`] computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Metrics,
    Fidelity,
    Detector,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "metrics" => Ok(Self::Metrics),
            "fidelity" => Ok(Self::Fidelity),
            "detector" => Ok(Self::Detector),
            other => Err(Error::Config(format!("unknown suite `{other}` (metrics|fidelity|detector)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub n_samples: usize,
    pub dataset_seed: u64,
    pub points_range: (usize, usize),
    pub radius: f64,
    pub sampler: SamplerConfig,
    pub detector: DetectorConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_samples: 500,
            dataset_seed: 1,
            points_range: (20, 50),
            radius: 2.0,
            sampler: SamplerConfig::default(),
            detector: DetectorConfig::default(),
        }
    }
}

/// Generates `n_samples` held-out samples and reports the requested suite.
/// `metrics` fills FID, SSIM and fidelity; `fidelity` only fidelity and SSIM;
/// `detector` only the detector F1 (real tiles against generated ones).
pub fn evaluate(ckpt: &Checkpoint, suite: Suite, opts: &EvalOptions) -> Result<MetricsReport> {
    let examples = eval_examples(ckpt, opts.dataset_seed, 0, opts.n_samples, opts.points_range)?;
    let (stats, samples) = fidelity_eval(ckpt, &examples, &opts.sampler, opts.radius)?;
    let real: Vec<ImageGrid> = examples.iter().map(|(t, _)| t.image.clone()).collect();
    let mut report = MetricsReport { n_samples: samples.len(), ..Default::default() };
    match suite {
        Suite::Metrics => {
            report.fid = Some(image_frechet(ckpt, &real, &samples)?);
            report.ssim_mean = Some(stats.ssim_mean());
            report.fidelity_mean = Some(stats.fidelity_mean());
        }
        Suite::Fidelity => {
            report.ssim_mean = Some(stats.ssim_mean());
            report.fidelity_mean = Some(stats.fidelity_mean());
        }
        Suite::Detector => {
            report.detector_f1_fake = Some(train_detector(&real, &samples, &opts.detector, opts.sampler.seed)?.f1_fake);
        }
    }
    Ok(report)
}
