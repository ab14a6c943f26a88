//! Model and training configuration, and the flat `key = value` file format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Training stage. Each stage adds conditioning branches to the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Unconditional,
    Text,
    PointsGeo,
}

impl Stage {
    pub fn index(self) -> u32 {
        match self {
            Stage::Unconditional => 1,
            Stage::Text => 2,
            Stage::PointsGeo => 3,
        }
    }

    pub fn from_index(i: u32) -> Option<Self> {
        match i {
            1 => Some(Stage::Unconditional),
            2 => Some(Stage::Text),
            3 => Some(Stage::PointsGeo),
            _ => None,
        }
    }

    pub fn previous(self) -> Option<Self> {
        Stage::from_index(self.index() - 1)
    }

    pub fn has_text(self) -> bool {
        self >= Stage::Text
    }

    pub fn has_points(self) -> bool {
        self == Stage::PointsGeo
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Unconditional => "uncond",
            Stage::Text => "text",
            Stage::PointsGeo => "points",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncond" | "unconditional" | "1" => Ok(Stage::Unconditional),
            "text" | "2" => Ok(Stage::Text),
            "points" | "points_geo" | "3" => Ok(Stage::PointsGeo),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// Architecture hyperparameters.
///
/// `grid_size` is the image side in pixels; the token grid is
/// `grid_size / patch_size` per side. The full-scale reference model used
/// patch 2, 28 blocks, width 1152 and 16 heads on a 32×32×4 latent; the
/// default here is the CPU-sized variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub tag_vocab_size: usize,
    pub max_points: usize,
    pub align_block_index: usize,
    pub align_weight: f64,
    pub mlp_ratio: usize,
    pub caption_vocab: usize,
    pub caption_len: usize,
    pub feat_dim: usize,
    /// Seeds the frozen pieces: geolocation Fourier features and the
    /// alignment target encoder.
    pub frozen_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_size: 16,
            patch_size: 2,
            channels: 3,
            depth: 6,
            hidden_dim: 128,
            num_heads: 4,
            tag_vocab_size: 8,
            max_points: 50,
            align_block_index: 2,
            align_weight: 0.5,
            mlp_ratio: 4,
            caption_vocab: 6,
            caption_len: 8,
            feat_dim: 32,
            frozen_seed: 0x6e0d17,
        }
    }
}

impl ModelConfig {
    pub fn tokens_per_side(&self) -> usize {
        self.grid_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens_per_side() * self.tokens_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.grid_size == 0 || !self.grid_size.is_multiple_of(self.patch_size) {
            return fail(format!("grid_size {} not divisible by patch_size {}", self.grid_size, self.patch_size));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!("hidden_dim {} not divisible by num_heads {}", self.hidden_dim, self.num_heads));
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(4) {
            return fail(format!("hidden_dim {} not divisible by 4", self.hidden_dim));
        }
        if self.depth == 0 || self.align_block_index >= self.depth {
            return fail(format!("align_block_index {} must be below depth {}", self.align_block_index, self.depth));
        }
        if self.max_points == 0 {
            return fail("max_points must be at least 1".into());
        }
        if !(self.align_weight >= 0.0 && self.align_weight.is_finite()) {
            return fail(format!("align_weight {} must be nonnegative", self.align_weight));
        }
        if self.channels == 0 || self.tag_vocab_size == 0 || self.caption_vocab == 0 || self.caption_len == 0 {
            return fail("channels, tag_vocab_size, caption_vocab and caption_len must be positive".into());
        }
        if self.mlp_ratio == 0 || self.feat_dim == 0 {
            return fail("mlp_ratio and feat_dim must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("grid_size".into(), self.grid_size.to_string()),
            ("patch_size".into(), self.patch_size.to_string()),
            ("channels".into(), self.channels.to_string()),
            ("depth".into(), self.depth.to_string()),
            ("hidden_dim".into(), self.hidden_dim.to_string()),
            ("num_heads".into(), self.num_heads.to_string()),
            ("tag_vocab_size".into(), self.tag_vocab_size.to_string()),
            ("max_points".into(), self.max_points.to_string()),
            ("align_block_index".into(), self.align_block_index.to_string()),
            ("align_weight".into(), format!("{:?}", self.align_weight)),
            ("mlp_ratio".into(), self.mlp_ratio.to_string()),
            ("caption_vocab".into(), self.caption_vocab.to_string()),
            ("caption_len".into(), self.caption_len.to_string()),
            ("feat_dim".into(), self.feat_dim.to_string()),
            ("frozen_seed".into(), self.frozen_seed.to_string()),
        ]
    }

    /// Overrides defaults with any model keys present in `kv`.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set(&mut self.grid_size, "grid_size")?;
        kv.set(&mut self.patch_size, "patch_size")?;
        kv.set(&mut self.channels, "channels")?;
        kv.set(&mut self.depth, "depth")?;
        kv.set(&mut self.hidden_dim, "hidden_dim")?;
        kv.set(&mut self.num_heads, "num_heads")?;
        kv.set(&mut self.tag_vocab_size, "tag_vocab_size")?;
        kv.set(&mut self.max_points, "max_points")?;
        kv.set(&mut self.align_block_index, "align_block_index")?;
        kv.set(&mut self.align_weight, "align_weight")?;
        kv.set(&mut self.mlp_ratio, "mlp_ratio")?;
        kv.set(&mut self.caption_vocab, "caption_vocab")?;
        kv.set(&mut self.caption_len, "caption_len")?;
        kv.set(&mut self.feat_dim, "feat_dim")?;
        kv.set(&mut self.frozen_seed, "frozen_seed")?;
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "grid_size",
        "patch_size",
        "channels",
        "depth",
        "hidden_dim",
        "num_heads",
        "tag_vocab_size",
        "max_points",
        "align_block_index",
        "align_weight",
        "mlp_ratio",
        "caption_vocab",
        "caption_len",
        "feat_dim",
        "frozen_seed",
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cond_dropout_prob: f64,
    pub seed: u64,
    /// Seeds the synthetic tile stream independently of the model seed.
    pub dataset_seed: u64,
    /// Training-time point count range, inclusive.
    pub points_range: (usize, usize),
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Unconditional,
            steps: 20_000,
            batch_size: 8,
            learning_rate: 1e-4,
            cond_dropout_prob: 0.1,
            seed: 0,
            dataset_seed: 1,
            points_range: (0, 50),
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::Config(format!("cond_dropout_prob {} outside [0, 1]", self.cond_dropout_prob)));
        }
        if self.points_range.0 > self.points_range.1 {
            return Err(Error::Config("points_min exceeds points_max".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(s) = kv.get("stage") {
            self.stage = s.parse()?;
        }
        kv.set(&mut self.steps, "steps")?;
        kv.set(&mut self.batch_size, "batch_size")?;
        kv.set(&mut self.learning_rate, "learning_rate")?;
        kv.set(&mut self.cond_dropout_prob, "cond_dropout_prob")?;
        kv.set(&mut self.seed, "seed")?;
        kv.set(&mut self.dataset_seed, "dataset_seed")?;
        kv.set(&mut self.points_range.0, "points_min")?;
        kv.set(&mut self.points_range.1, "points_max")?;
        kv.set(&mut self.log_every, "log_every")?;
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "stage",
        "steps",
        "batch_size",
        "learning_rate",
        "cond_dropout_prob",
        "seed",
        "dataset_seed",
        "points_min",
        "points_max",
        "log_every",
    ];
}

/// Parsed `key = value` text: one pair per line, `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse { location: format!("{source}:{}", n + 1), reason: "expected `key = value`".into() });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Parse { location: format!("{source}:{}", n + 1), reason: "empty key".into() });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Parse { location: format!("{source}:{}", n + 1), reason: format!("duplicate key `{k}`") });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.entries.iter()
    }

    fn set<T: FromStr>(&self, slot: &mut T, key: &str) -> Result<()> {
        if let Some(v) = self.get(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::Parse { location: key.to_string(), reason: format!("cannot parse `{v}`") })?;
        }
        Ok(())
    }

    /// Errors on keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    pub fn render(pairs: &[(String, String)]) -> String {
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Reads a combined model + training config file.
pub fn load_configs(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let kv = KeyValues::load(path)?;
    let allowed: Vec<&str> = ModelConfig::KEYS.iter().chain(TrainConfig::KEYS).copied().collect();
    kv.check_keys(&allowed)?;
    let mut model = ModelConfig::default();
    model.apply_kv(&kv)?;
    model.validate()?;
    let mut train = TrainConfig::default();
    train.apply_kv(&kv)?;
    train.validate()?;
    Ok((model, train))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_desk_config() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_tokens(), 64);
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = [
            ModelConfig { num_heads: 3, ..Default::default() },
            ModelConfig { hidden_dim: 130, num_heads: 2, ..Default::default() },
            ModelConfig { align_block_index: 6, ..Default::default() },
            ModelConfig { max_points: 0, ..Default::default() },
            ModelConfig { patch_size: 3, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn kv_parsing_handles_comments_and_errors() {
        let kv = KeyValues::parse("# header\ndepth = 2 # tiny\n\nhidden_dim=16\n", "t").unwrap();
        let mut c = ModelConfig::default();
        c.apply_kv(&kv).unwrap();
        assert_eq!((c.depth, c.hidden_dim), (2, 16));
        assert!(KeyValues::parse("depth 2", "t").is_err());
        assert!(KeyValues::parse("a = 1\na = 2", "t").is_err());
        let kv = KeyValues::parse("depth = two", "t").unwrap();
        assert!(c.apply_kv(&kv).is_err());
    }

    #[test]
    fn model_kv_round_trips() {
        let c = ModelConfig { align_weight: 0.3, depth: 3, align_block_index: 1, ..Default::default() };
        let text = KeyValues::render(&c.to_kv());
        let mut back = ModelConfig::default();
        back.apply_kv(&KeyValues::parse(&text, "t").unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
