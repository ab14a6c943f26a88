//! Versioned parameter bundles on disk.
//!
//! Layout: the 8-byte magic `GEODITCK`, a little-endian `u32` version, a
//! little-endian `u64` header length, the UTF-8 header, then the payload of
//! little-endian `f64` values. Header lines are `key = value` pairs
//! (`stage`, `step`, and every model config key prefixed with `config.`)
//! followed by one `array <name> <rows> <cols> <offset>` line per array,
//! where `offset` counts `f64` elements from the start of the payload.

use std::path::Path;

use crate::config::{KeyValues, ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::model::validate_params;
use crate::nn::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GEODITCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub stage: Stage,
    pub step: u64,
    pub params: Params,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, stage: Stage, step: u64, params: Params) -> Self {
        Self { version: VERSION, config, stage, step, params }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        validate_params(&self.params, &self.config, self.stage)
    }
}

/// Serializes a checkpoint to bytes after checking it against its config.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    Ok(encode(ckpt))
}

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut header = String::new();
    header.push_str(&format!("stage = {}\nstep = {}\n", ckpt.stage.name(), ckpt.step));
    for (k, v) in ckpt.config.to_kv() {
        header.push_str(&format!("config.{k} = {v}\n"));
    }
    let mut offset = 0usize;
    for (name, t) in &ckpt.params {
        header.push_str(&format!("array {name} {} {} {offset}\n", t.rows(), t.cols()));
        offset += t.len();
    }
    let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in ckpt.params.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Parses bytes produced by [`to_bytes`]; `path` only labels errors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: &str| Error::CorruptHeader { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion { path: path.to_path_buf(), found: version, expected: VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header = std::str::from_utf8(&bytes[20..header_end]).map_err(|_| corrupt("header is not UTF-8"))?;

    let mut kv_text = String::new();
    let mut arrays = Vec::new();
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("array ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 4 {
                return Err(corrupt(&format!("malformed array line `{line}`")));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt(&format!("bad number in `{line}`")));
            arrays.push((f[0].to_string(), num(f[1])?, num(f[2])?, num(f[3])?));
        } else {
            kv_text.push_str(line);
            kv_text.push('\n');
        }
    }
    let kv = KeyValues::parse(&kv_text, &path.display().to_string())?;
    let stage: Stage = kv.get("stage").ok_or_else(|| corrupt("missing stage"))?.parse()?;
    let step: u64 = kv.get("step").ok_or_else(|| corrupt("missing step"))?.parse().map_err(|_| corrupt("bad step"))?;
    let mut config_kv = KeyValues::default();
    for (k, v) in kv.iter() {
        if let Some(key) = k.strip_prefix("config.") {
            config_kv.insert(key, v.as_str());
        }
    }
    config_kv.check_keys(ModelConfig::KEYS)?;
    let mut config = ModelConfig::default();
    config.apply_kv(&config_kv)?;

    let payload = &bytes[header_end..];
    let needed = arrays.iter().map(|(_, r, c, o)| o + r * c).max().unwrap_or(0) * 8;
    if payload.len() != needed {
        return Err(Error::PayloadLength { path: path.to_path_buf(), found: payload.len(), expected: needed });
    }
    let mut params = Params::new();
    for (name, rows, cols, offset) in arrays {
        let data = payload[offset * 8..(offset + rows * cols) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.insert(name.clone(), Tensor::from_vec(rows, cols, data)).is_some() {
            return Err(corrupt(&format!("array `{name}` listed twice")));
        }
    }
    let ckpt = Checkpoint { version, config, stage, step, params };
    ckpt.validate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny() -> ModelConfig {
        ModelConfig { grid_size: 8, depth: 2, hidden_dim: 16, num_heads: 2, max_points: 4, align_block_index: 1, feat_dim: 8, ..Default::default() }
    }

    fn sample() -> Checkpoint {
        let cfg = tiny();
        let mut params = init_params(&cfg, Stage::Text, 3).unwrap();
        params.get_mut("x_embed.b").unwrap().data_mut()[0] = -0.0;
        params.get_mut("x_embed.b").unwrap().data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        Checkpoint::new(cfg, Stage::Text, 42, params)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = from_bytes(&to_bytes(&c).unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back.stage, c.stage);
        assert_eq!(back.step, 42);
        assert_eq!(back.config, c.config);
        for (k, v) in &c.params {
            let b = &back.params[k];
            assert!(v.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{k}");
        }
    }

    #[test]
    fn truncation_is_a_payload_error() {
        let bytes = to_bytes(&sample()).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 5], Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::PayloadLength { .. }), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = to_bytes(&sample()).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(from_bytes(&bytes, Path::new("v")), Err(Error::UnsupportedVersion { found: 7, .. })));
        assert!(matches!(from_bytes(b"not a checkpoint at all", Path::new("m")), Err(Error::CorruptHeader { .. })));
    }

    #[test]
    fn missing_array_is_named() {
        let mut c = sample();
        c.params.remove("final.out.w");
        assert!(matches!(to_bytes(&c), Err(Error::MissingArray(n)) if n == "final.out.w"));
        let err = from_bytes(&encode(&c), Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::MissingArray(ref n) if n == "final.out.w"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected_on_save() {
        let mut c = sample();
        c.params.insert("x_embed.w".into(), Tensor::zeros(2, 2));
        assert!(matches!(to_bytes(&c), Err(Error::ArrayShape { .. })));
    }
}
