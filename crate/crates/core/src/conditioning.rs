//! Conditioning encoders: timestep, caption codebook, point prompts, and
//! geolocation, plus the per-sample condition record they consume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::nn::{linear, Init, ParamVars, Params, SpecBuilder};
use crate::tensor::Tensor;

/// One sparse prompt: token-grid coordinates and a semantic tag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointQuery {
    pub x: f64,
    pub y: f64,
    pub tag_id: usize,
}

/// Up to `capacity` prompts; slots past `len()` are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    points: Vec<PointQuery>,
    capacity: usize,
}

impl PointSet {
    pub fn new(points: Vec<PointQuery>, capacity: usize) -> Result<Self> {
        if points.len() > capacity {
            return Err(Error::OutOfRange(format!("{} points exceed max_points {capacity}", points.len())));
        }
        Ok(Self { points, capacity })
    }

    pub fn empty(capacity: usize) -> Self {
        Self { points: Vec::new(), capacity }
    }

    pub fn points(&self) -> &[PointQuery] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Validity per slot, `true` exactly for populated slots.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.capacity).map(|i| i < self.points.len()).collect()
    }

    /// Checks coordinates against the token grid and tags against the
    /// vocabulary.
    pub fn validate(&self, tokens_per_side: usize, tag_vocab: usize) -> Result<()> {
        let side = tokens_per_side as f64;
        for p in &self.points {
            if !(0.0..side).contains(&p.x) || !(0.0..side).contains(&p.y) {
                return Err(Error::OutOfRange(format!("point ({}, {}) outside the {side}x{side} token grid", p.x, p.y)));
            }
            if p.tag_id >= tag_vocab {
                return Err(Error::OutOfRange(format!("tag {} outside vocabulary of {tag_vocab}", p.tag_id)));
            }
        }
        Ok(())
    }
}

/// Everything a sample can be conditioned on. Fields a stage does not use
/// are ignored; `caption: None` selects the learned null caption and an
/// empty point set is the null point condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditions {
    pub caption: Option<usize>,
    pub points: PointSet,
    pub latlon: Option<(f64, f64)>,
}

impl Conditions {
    pub fn unconditional(max_points: usize) -> Self {
        Self { caption: None, points: PointSet::empty(max_points), latlon: None }
    }

    /// The guidance null: every condition group dropped.
    pub fn null(&self) -> Self {
        Self::unconditional(self.points.capacity())
    }
}

/// 2D sine-cosine encoding, laid out `[sin x…, cos x…, sin y…, cos y…]`
/// with frequencies `10000^(-4k/dim)`, `k < dim/4`.
pub fn sincos2d(x: f64, y: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Config(format!("sincos2d dimension {dim} not divisible by 4")));
    }
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for coord in [x, y] {
        let freqs = (0..quarter).map(|k| 10000f64.powf(-4.0 * k as f64 / dim as f64));
        let args: Vec<f64> = freqs.map(|w| coord * w).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    Ok(out)
}

/// `dim/2` frequencies for the timestep embedding. `t ∈ [0, 1]` is scaled by
/// 1000 so the spread matches integer-timestep embeddings.
pub fn timestep_frequencies(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half).map(|k| 1000.0 * (-(10000f64.ln()) * k as f64 / half as f64).exp()).collect()
}

pub const GEO_FREQUENCIES: usize = 64;
const GEO_BANDWIDTHS: [f64; 3] = [1.0, 4.0, 16.0];

/// Frozen random Fourier features of `(sin φ, cos φ, sin λ, cos λ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoFourier {
    w: Vec<[f64; 4]>,
    b: Vec<f64>,
}

impl GeoFourier {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e0_f00d);
        let mut w = Vec::with_capacity(GEO_FREQUENCIES);
        let mut b = Vec::with_capacity(GEO_FREQUENCIES);
        for k in 0..GEO_FREQUENCIES {
            let bw = GEO_BANDWIDTHS[k % GEO_BANDWIDTHS.len()];
            let mut row = [0.0; 4];
            for r in &mut row {
                let z: f64 = StandardNormal.sample(&mut rng);
                *r = z * bw;
            }
            w.push(row);
            b.push(rng.random_range(0.0..std::f64::consts::TAU));
        }
        Self { w, b }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.w.len()
    }

    pub fn features(&self, lat: f64, lon: f64) -> Result<Vec<f64>> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::OutOfRange(format!("lat/lon ({lat}, {lon}) out of range")));
        }
        // +180 and -180 are the same meridian; fold before the trig so the
        // two produce bit-identical features.
        let lon = if lon >= 180.0 { lon - 360.0 } else { lon };
        let (phi, lam) = (lat.to_radians(), lon.to_radians());
        let u = [phi.sin(), phi.cos(), lam.sin(), lam.cos()];
        let n = self.w.len();
        let mut out = vec![0.0; 2 * n];
        for (k, (row, b)) in self.w.iter().zip(&self.b).enumerate() {
            let arg: f64 = row.iter().zip(&u).map(|(a, c)| a * c).sum::<f64>() + b;
            out[k] = arg.cos();
            out[n + k] = arg.sin();
        }
        Ok(out)
    }
}

/// Parameters owned by the conditioning encoders.
pub fn param_specs(cfg: &ModelConfig, out: &mut Vec<crate::nn::ParamSpec>) {
    let d = cfg.hidden_dim;
    SpecBuilder::new(out, Stage::Unconditional)
        .linear("t_embed.fc1", d, d, Init::Normal(0.02))
        .linear("t_embed.fc2", d, d, Init::Normal(0.02));
    SpecBuilder::new(out, Stage::Text)
        .add("caption.codebook", cfg.caption_vocab + 1, cfg.caption_len * d, Init::Normal(1.0))
        .linear("caption.pool", d, d, Init::Zeros);
    SpecBuilder::new(out, Stage::PointsGeo)
        .linear("points.fc1", d, d, Init::Xavier)
        .linear("points.fc2", d, d, Init::Xavier)
        .add("points.tags", cfg.tag_vocab_size, d, Init::Normal(1.0))
        .linear("geo.fc1", 2 * GEO_FREQUENCIES, d, Init::Xavier)
        .linear("geo.fc2", d, d, Init::Zeros);
}

/// `t: S×1` → `S×hidden`: sinusoidal features, then Linear–SiLU–Linear.
pub fn embed_timestep(g: &mut Graph, pv: &ParamVars, t: Var) -> Var {
    let dim = g.value(pv.get("t_embed.fc1.w")).rows();
    let freqs = timestep_frequencies(dim);
    let f = g.sincos_embed(t, &freqs);
    let h = linear(g, pv, "t_embed.fc1", f);
    let h = g.silu(h);
    linear(g, pv, "t_embed.fc2", h)
}

/// Pooled embedding `S×hidden` and dense tokens `(S·L)×hidden` for each
/// caption id; `None` selects the null row.
pub fn encode_captions(g: &mut Graph, pv: &ParamVars, cfg: &ModelConfig, ids: &[Option<usize>]) -> Result<(Var, Var)> {
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        match id {
            Some(i) if *i >= cfg.caption_vocab => {
                return Err(Error::OutOfRange(format!("caption id {i} outside vocabulary of {}", cfg.caption_vocab)))
            }
            Some(i) => rows.push(*i),
            None => rows.push(cfg.caption_vocab),
        }
    }
    let flat = g.gather(pv.get("caption.codebook"), &rows);
    let tokens = g.reshape(flat, ids.len() * cfg.caption_len, cfg.hidden_dim);
    let pooled = g.mean_seg(tokens, cfg.caption_len);
    Ok((pooled, tokens))
}

/// Point embeddings `(S·max_points)×hidden` and the matching slot mask.
/// Each embedding is `MLP(sincos2d(x, y)) + tags[tag_id]`.
pub fn encode_points(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    sets: &[&PointSet],
) -> Result<(Var, Vec<bool>)> {
    let m = cfg.max_points;
    let d = cfg.hidden_dim;
    let mut pos = Tensor::zeros(sets.len() * m, d);
    let mut tags = vec![0usize; sets.len() * m];
    let mut mask = vec![false; sets.len() * m];
    for (s, set) in sets.iter().enumerate() {
        if set.len() > m {
            return Err(Error::OutOfRange(format!("{} points exceed max_points {m}", set.len())));
        }
        for (i, p) in set.points().iter().enumerate() {
            if p.tag_id >= cfg.tag_vocab_size {
                return Err(Error::OutOfRange(format!("tag {} outside vocabulary of {}", p.tag_id, cfg.tag_vocab_size)));
            }
            pos.row_mut(s * m + i).copy_from_slice(&sincos2d(p.x, p.y, d)?);
            tags[s * m + i] = p.tag_id;
            mask[s * m + i] = true;
        }
    }
    let pos = g.constant(pos);
    let h = linear(g, pv, "points.fc1", pos);
    let h = g.silu(h);
    let h = linear(g, pv, "points.fc2", h);
    let tag_emb = g.gather(pv.get("points.tags"), &tags);
    Ok((g.add(h, tag_emb), mask))
}

/// `S×hidden` geolocation embeddings; `None` rows are the zero (null)
/// embedding.
pub fn embed_geolocation(g: &mut Graph, pv: &ParamVars, geo: &GeoFourier, latlons: &[Option<(f64, f64)>]) -> Result<Var> {
    let mut feats = Tensor::zeros(latlons.len(), geo.feature_dim());
    let mut keep = vec![0.0; latlons.len()];
    for (r, ll) in latlons.iter().enumerate() {
        if let Some((lat, lon)) = ll {
            feats.row_mut(r).copy_from_slice(&geo.features(*lat, *lon)?);
            keep[r] = 1.0;
        }
    }
    let f = g.constant(feats);
    let h = linear(g, pv, "geo.fc1", f);
    let h = g.silu(h);
    let h = linear(g, pv, "geo.fc2", h);
    Ok(g.scale_rows(h, keep))
}

/// Single-item views of the encoders over a parameter bundle.
pub struct Encoders<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Params,
    pub geo: &'a GeoFourier,
}

impl Encoders<'_> {
    fn run<T>(&self, f: impl FnOnce(&mut Graph, &ParamVars) -> Result<T>) -> Result<T> {
        let mut g = Graph::inference();
        let pv = ParamVars::bind(&mut g, self.params, false);
        f(&mut g, &pv)
    }

    pub fn embed_timestep(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfRange(format!("t = {t} outside [0, 1]")));
        }
        self.run(|g, pv| {
            let tv = g.constant(Tensor::scalar(t));
            let e = embed_timestep(g, pv, tv);
            Ok(g.value(e).data().to_vec())
        })
    }

    pub fn encode_point(&self, p: PointQuery) -> Result<Vec<f64>> {
        let set = PointSet::new(vec![p], self.cfg.max_points)?;
        self.run(|g, pv| {
            let (e, _) = encode_points(g, pv, self.cfg, &[&set])?;
            Ok(g.value(e).row(0).to_vec())
        })
    }

    pub fn embed_geolocation(&self, lat: f64, lon: f64) -> Result<Vec<f64>> {
        self.run(|g, pv| {
            let e = embed_geolocation(g, pv, self.geo, &[Some((lat, lon))])?;
            Ok(g.value(e).data().to_vec())
        })
    }

    /// `(pooled, tokens)` for one caption id.
    pub fn encode_caption(&self, caption_id: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.run(|g, pv| {
            let (pooled, tokens) = encode_captions(g, pv, self.cfg, &[Some(caption_id)])?;
            let t = g.value(tokens);
            let rows = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
            Ok((g.value(pooled).data().to_vec(), rows))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sincos2d_at_origin() {
        assert_eq!(sincos2d(0.0, 0.0, 8).unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sincos2d_hand_values() {
        let e = sincos2d(1.0, 0.0, 4).unwrap();
        assert!((e[0] - 1f64.sin()).abs() < 1e-15);
        assert!((e[0] - 0.8415).abs() < 1e-4);
        assert!((e[1] - 0.5403).abs() < 1e-4);
        assert_eq!(&e[2..], &[0.0, 1.0]);
    }

    #[test]
    fn sincos2d_is_separable() {
        let a = sincos2d(2.5, 1.0, 16).unwrap();
        let b = sincos2d(2.5, 7.0, 16).unwrap();
        assert_eq!(a[..8], b[..8]);
        assert_ne!(a[8..], b[8..]);
    }

    #[test]
    fn sincos2d_rejects_bad_dim() {
        assert!(sincos2d(0.0, 0.0, 6).is_err());
    }

    #[test]
    fn geo_features_wrap_longitude() {
        let geo = GeoFourier::new(1);
        assert_eq!(geo.features(10.0, -180.0).unwrap(), geo.features(10.0, 180.0).unwrap());
        assert!(geo.features(91.0, 0.0).is_err());
        assert!(geo.features(0.0, -181.0).is_err());
    }

    #[test]
    fn point_set_mask_tracks_population() {
        let p = PointQuery { x: 1.0, y: 2.0, tag_id: 0 };
        let s = PointSet::new(vec![p; 3], 5).unwrap();
        assert_eq!(s.mask(), vec![true, true, true, false, false]);
        assert!(PointSet::new(vec![p; 6], 5).is_err());
        assert!(s.validate(8, 8).is_ok());
        let far = PointSet::new(vec![PointQuery { x: 8.0, y: 0.0, tag_id: 0 }], 5).unwrap();
        assert!(far.validate(8, 8).is_err());
    }
}
