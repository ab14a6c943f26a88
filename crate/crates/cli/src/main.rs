use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use geodit::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use geodit::conditioning::{Conditions, PointSet};
use geodit::config::{load_configs, ModelConfig, Stage, TrainConfig};
use geodit::data::{default_vocab_text, dump_tile, format_points, parse_points, parse_vocab, TAG_NAMES};
use geodit::evaluate::{evaluate, EvalOptions, Suite};
use geodit::gradcheck::{format_results, run_suite};
use geodit::image::{read_mask_png, read_png, write_png};
use geodit::model::GeoDiT;
use geodit::sampler::{inpaint, integrate_batch, InpaintTask, Integrator, ModelField, SamplerConfig};
use geodit::train::{run_stage_with, DataStream, Split};

#[derive(Parser)]
#[command(name = "geodit", version, about = "Point-conditioned flow-matching diffusion transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Uncond,
    Text,
    Points,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Uncond => Stage::Unconditional,
            StageArg::Text => Stage::Text,
            StageArg::Points => Stage::PointsGeo,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Metrics,
    Fidelity,
    Detector,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Metrics => Suite::Metrics,
            SuiteArg::Fidelity => Suite::Fidelity,
            SuiteArg::Detector => Suite::Detector,
        }
    }
}

#[derive(clap::Args)]
struct SamplerArgs {
    /// ODE steps from t=1 to t=0.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Guidance scale s in v_cond + s·(v_cond − v_uncond).
    #[arg(long = "cfg", default_value_t = 0.0)]
    cfg_scale: f64,
    #[arg(long, default_value = "euler")]
    integrator: Integrator,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig { num_steps: self.steps, cfg_scale: self.cfg_scale, integrator: self.integrator, seed: self.seed }
    }
}

#[derive(clap::Args)]
struct ConditionArgs {
    /// Point file: one `x y tag_name` line per point, token-grid units.
    #[arg(long)]
    points: Option<PathBuf>,
    /// Tag vocabulary file of `tag_id tag_name` lines (built-in if absent).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Caption (scene archetype) id.
    #[arg(long)]
    caption_id: Option<usize>,
    #[arg(long, requires = "lon", allow_hyphen_values = true)]
    lat: Option<f64>,
    #[arg(long, requires = "lat", allow_hyphen_values = true)]
    lon: Option<f64>,
}

impl ConditionArgs {
    fn conditions(&self, cfg: &ModelConfig) -> Result<Conditions> {
        let vocab_text = match &self.vocab {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => default_vocab_text(),
        };
        let vocab = parse_vocab(&vocab_text)?;
        let points = match &self.points {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_points(&text, &vocab, cfg.max_points)?
            }
            None => PointSet::empty(cfg.max_points),
        };
        points.validate(cfg.tokens_per_side(), cfg.tag_vocab_size)?;
        Ok(Conditions { caption: self.caption_id, points, latlon: self.lat.zip(self.lon) })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage and write its checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Flat `key = value` file holding model and training keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint of the preceding stage (or of this stage, to resume).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log CSV; defaults to the checkpoint path with `.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the config's `steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        cond: ConditionArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Number of samples, each with its own noise stream.
        #[arg(long, default_value_t = 1)]
        num: usize,
        /// Also write the predicted spatial extents of every point.
        #[arg(long)]
        dump_extents: bool,
    },
    /// Regenerate the masked region of an image.
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// PNG of the same size; pixels whose red channel is 128 or more are regenerated.
        #[arg(long)]
        mask: PathBuf,
        #[command(flatten)]
        cond: ConditionArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Evaluate a checkpoint on the held-out split and write a CSV report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "metrics")]
        suite: SuiteArg,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        num: usize,
        #[arg(long, default_value_t = 1)]
        dataset_seed: u64,
        #[arg(long, default_value_t = 2.0)]
        radius: f64,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Entries checked per parameter tensor (all when absent).
        #[arg(long)]
        max_per_tensor: Option<usize>,
    },
    /// Write synthetic tiles with their labels, scene specs and prompts.
    DumpData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        num: usize,
        #[arg(long, default_value_t = 1)]
        dataset_seed: u64,
        /// Draw from the held-out split instead of the training split.
        #[arg(long)]
        eval: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn configs(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    match path {
        Some(p) => load_configs(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok((ModelConfig::default(), TrainConfig::default())),
    }
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(stage: Stage, config: Option<&Path>, init: Option<&Path>, out: &Path, log_path: Option<PathBuf>, steps: Option<usize>) -> Result<()> {
    let (model_cfg, mut train_cfg) = configs(config)?;
    train_cfg.stage = stage;
    if let Some(n) = steps {
        train_cfg.steps = n;
    }
    train_cfg.validate()?;
    let init = init.map(load).transpose()?;
    let log_path = log_path.unwrap_or_else(|| out.with_extension("log.csv"));
    log::info!("training stage `{stage}` for {} steps, batch {}", train_cfg.steps, train_cfg.batch_size);
    let started = Instant::now();
    let total = train_cfg.steps;
    let mut done = 0usize;
    let ckpt = run_stage_with(&train_cfg, &model_cfg, init.as_ref(), Some(&log_path), |s, _| {
        done += 1;
        if done.is_multiple_of(100) || done == total {
            log::info!(
                "step {} ({done}/{total}) v_loss {:.5} a_loss {:.5} cos {:.4} [{:.0}s]",
                s.step,
                s.v_loss,
                s.a_loss,
                s.cos,
                started.elapsed().as_secs_f64()
            );
        }
    })?;
    save_checkpoint(&ckpt, out).with_context(|| format!("saving {}", out.display()))?;
    log::info!("wrote {} (step {})", out.display(), ckpt.step);
    Ok(())
}

fn describe(cond: &Conditions, sampler: &SamplerConfig, index: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed = {}\nsample_index = {index}", sampler.seed);
    let _ = writeln!(s, "steps = {}\ncfg_scale = {}\nintegrator = {:?}", sampler.num_steps, sampler.cfg_scale, sampler.integrator);
    let _ = writeln!(s, "caption_id = {}", cond.caption.map_or("none".to_string(), |c| c.to_string()));
    match cond.latlon {
        Some((lat, lon)) => {
            let _ = writeln!(s, "lat = {lat}\nlon = {lon}");
        }
        None => s.push_str("lat = none\nlon = none\n"),
    }
    let _ = writeln!(s, "num_points = {}", cond.points.len());
    for line in format_points(&cond.points).lines() {
        let _ = writeln!(s, "point = {line}");
    }
    s
}

fn sample(ckpt_path: &Path, cond: &ConditionArgs, out: &Path, sampler: &SamplerArgs, num: usize, dump_extents: bool) -> Result<()> {
    let ckpt = load(ckpt_path)?;
    let cond = cond.conditions(&ckpt.config)?;
    let cfg = sampler.config();
    let net = GeoDiT::new(ckpt.config.clone(), ckpt.stage)?;
    let field = ModelField::new(&net, &ckpt.params);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let conds = vec![&cond; num];
    let samples = integrate_batch(&field, net.image_shape(), &conds, &cfg, 0)?;
    for (i, img) in samples.iter().enumerate() {
        write_png(&out.join(format!("sample_{i:04}.png")), img)?;
        write(&out.join(format!("sample_{i:04}.txt")), &describe(&cond, &cfg, i as u64))?;
    }
    if dump_extents {
        let ext = net.predict_extents(&ckpt.params, &[&cond])?.remove(0);
        let mut text = String::from("tag x y sigma_x sigma_y\n");
        for (i, p) in cond.points.points().iter().enumerate() {
            let _ = writeln!(text, "{} {} {} {} {}", TAG_NAMES[p.tag_id], p.x, p.y, ext.sigma_x[i], ext.sigma_y[i]);
        }
        write(&out.join("extents.txt"), &text)?;
    }
    log::info!("wrote {num} samples to {} ({} model evaluations)", out.display(), field.evaluations());
    Ok(())
}

fn inpaint_cmd(ckpt_path: &Path, image: &Path, mask: &Path, cond: &ConditionArgs, out: &Path, sampler: &SamplerArgs) -> Result<()> {
    let ckpt = load(ckpt_path)?;
    let conditions = cond.conditions(&ckpt.config)?;
    let known = read_png(image)?;
    let mask = read_mask_png(mask)?;
    let cfg = sampler.config();
    let net = GeoDiT::new(ckpt.config.clone(), ckpt.stage)?;
    if known.shape() != net.image_shape() {
        bail!("image is {:?}, the model generates {:?}", known.shape(), net.image_shape());
    }
    let field = ModelField::new(&net, &ckpt.params);
    let task = InpaintTask { known, mask, conditions };
    let result = inpaint(&field, &task, &cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_png(&out.join("inpainted.png"), &result)?;
    let masked = task.mask.iter().filter(|&&m| m).count();
    write(&out.join("inpainted.txt"), &format!("{}masked_cells = {masked}\n", describe(&task.conditions, &cfg, 0)))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(ckpt_path: &Path, suite: Suite, out: Option<&Path>, num: usize, dataset_seed: u64, radius: f64, sampler: &SamplerArgs) -> Result<()> {
    let ckpt = load(ckpt_path)?;
    let opts = EvalOptions { n_samples: num, dataset_seed, radius, sampler: sampler.config(), ..Default::default() };
    let report = evaluate(&ckpt, suite, &opts)?;
    match out {
        Some(p) => write(p, &report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn dump_data(out: &Path, num: usize, dataset_seed: u64, eval: bool, config: Option<&Path>) -> Result<()> {
    let (model_cfg, train_cfg) = configs(config)?;
    let stream = DataStream::new(&model_cfg, dataset_seed);
    let (split, range) = if eval { (Split::Eval, (20, 50)) } else { (Split::Train, train_cfg.points_range) };
    for i in 0..num {
        let (tile, cond) = stream.example(split, i as u64, range)?;
        let dir = out.join(format!("tile_{i:05}"));
        dump_tile(&dir, &tile)?;
        write(&dir.join("points.txt"), &format_points(&cond.points))?;
    }
    write(&out.join("vocab.txt"), &default_vocab_text())?;
    log::info!("wrote {num} tiles to {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { stage, config, init, out, log, steps } => train(stage.into(), config.as_deref(), init.as_deref(), &out, log, steps),
        Command::Sample { ckpt, cond, out, sampler, num, dump_extents } => sample(&ckpt, &cond, &out, &sampler, num, dump_extents),
        Command::Inpaint { ckpt, image, mask, cond, out, sampler } => inpaint_cmd(&ckpt, &image, &mask, &cond, &out, &sampler),
        Command::Eval { ckpt, suite, out, num, dataset_seed, radius, sampler } => {
            eval(&ckpt, suite.into(), out.as_deref(), num, dataset_seed, radius, &sampler)
        }
        Command::Gradcheck { max_per_tensor } => {
            let results = run_suite(max_per_tensor)?;
            print!("{}", format_results(&results));
            if results.iter().any(|r| !r.passed()) {
                bail!("gradient check failed");
            }
            Ok(())
        }
        Command::DumpData { out, num, dataset_seed, eval, config } => dump_data(&out, num, dataset_seed, eval, config.as_deref()),
    }
}
