//! The point-conditioned diffusion transformer: patch embedding, AdaLN-Zero
//! blocks with optional caption cross-attention and local point attention,
//! and the velocity head.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ala::{self, token_positions};
use crate::autograd::{Graph, Var};
use crate::conditioning::{self, sincos2d, Conditions, GeoFourier, PointSet};
use crate::config::{ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::nn::{linear, Init, ParamSpec, ParamVars, Params, SpecBuilder};
use crate::tensor::Tensor;

/// Every parameter of every stage, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden_dim;
    let mut out = Vec::new();
    {
        let mut b = SpecBuilder::new(&mut out, Stage::Unconditional);
        b.linear("x_embed", cfg.patch_dim(), d, Init::Xavier);
        for i in 0..cfg.depth {
            b.linear(&format!("blocks.{i}.ada"), d, 6 * d, Init::Zeros)
                .linear(&format!("blocks.{i}.attn.qkv"), d, 3 * d, Init::Xavier)
                .linear(&format!("blocks.{i}.attn.out"), d, d, Init::Xavier)
                .linear(&format!("blocks.{i}.mlp.fc1"), d, cfg.mlp_ratio * d, Init::Xavier)
                .linear(&format!("blocks.{i}.mlp.fc2"), cfg.mlp_ratio * d, d, Init::Xavier);
        }
        b.linear("final.ada", d, 2 * d, Init::Zeros)
            .linear("final.out", d, cfg.patch_dim(), Init::Zeros)
            .linear("align.proj", d, cfg.feat_dim, Init::Xavier);
    }
    {
        let mut b = SpecBuilder::new(&mut out, Stage::Text);
        for i in 0..cfg.depth {
            b.linear(&format!("blocks.{i}.xattn.q"), d, d, Init::Xavier)
                .linear(&format!("blocks.{i}.xattn.kv"), d, 2 * d, Init::Xavier)
                .linear(&format!("blocks.{i}.xattn.out"), d, d, Init::Zeros);
        }
    }
    conditioning::param_specs(cfg, &mut out);
    ala::param_specs(cfg, &mut out);
    out
}

/// Shapes of all parameters present at `stage`.
pub fn expected_shapes(cfg: &ModelConfig, stage: Stage) -> BTreeMap<String, (usize, usize)> {
    param_specs(cfg)
        .into_iter()
        .filter(|s| s.stage <= stage)
        .map(|s| (s.name, (s.rows, s.cols)))
        .collect()
}

/// Checks that `params` holds exactly the arrays `stage` needs, with the
/// shapes `cfg` implies.
pub fn validate_params(params: &Params, cfg: &ModelConfig, stage: Stage) -> Result<()> {
    let expected = expected_shapes(cfg, stage);
    for (name, &shape) in &expected {
        match params.get(name) {
            None => return Err(Error::MissingArray(name.clone())),
            Some(t) if t.shape() != shape => {
                return Err(Error::ArrayShape { name: name.clone(), found: t.shape(), expected: shape })
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::UnexpectedArray(extra.clone()));
    }
    Ok(())
}

fn init_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stage.index() as u64)
}

/// Fresh parameters for `stage`.
pub fn init_params(cfg: &ModelConfig, stage: Stage, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut params = Params::new();
    for s in Stage::Unconditional.index()..=stage.index() {
        let s = Stage::from_index(s).expect("stage indices are contiguous");
        add_stage_params(&mut params, cfg, s, seed);
    }
    Ok(params)
}

fn add_stage_params(params: &mut Params, cfg: &ModelConfig, stage: Stage, seed: u64) {
    let mut rng = init_rng(seed, stage);
    for spec in param_specs(cfg).into_iter().filter(|s| s.stage == stage) {
        params.insert(spec.name, spec.init.sample(spec.rows, spec.cols, &mut rng));
    }
}

/// Carries `params` from the stage before `to` into `to`: existing arrays
/// are kept unchanged and the new branches get their initializers, which
/// zero every new output projection.
pub fn upgrade_params(params: &Params, cfg: &ModelConfig, to: Stage, seed: u64) -> Result<Params> {
    let from = to
        .previous()
        .ok_or_else(|| Error::StageOrder("the unconditional stage has no predecessor".into()))?;
    validate_params(params, cfg, from)?;
    let mut out = params.clone();
    add_stage_params(&mut out, cfg, to, seed);
    Ok(out)
}

/// Stacks each grid's non-overlapping `p×p` patches as rows,
/// `(S·N)×(p·p·C)`, patches row-major and each patch flattened `(dy, dx, c)`.
pub fn patchify_grids(grids: &[&ImageGrid], patch: usize) -> Result<Tensor> {
    let Some(first) = grids.first() else {
        return Err(Error::Empty("patchify batch".into()));
    };
    let (h, w, c) = first.shape();
    if !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::Shape(format!("{h}x{w} grid not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let mut out = Tensor::zeros(grids.len() * gh * gw, pd);
    for (s, img) in grids.iter().enumerate() {
        if img.shape() != (h, w, c) {
            return Err(Error::Shape("patchify batch has mixed shapes".into()));
        }
        for ty in 0..gh {
            for tx in 0..gw {
                let row = out.row_mut(s * gh * gw + ty * gw + tx);
                let mut k = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            row[k] = img.get(ty * patch + dy, tx * patch + dx, ch);
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify_grids`].
pub fn unpatchify(t: &Tensor, samples: usize, shape: (usize, usize, usize), patch: usize) -> Vec<ImageGrid> {
    let (h, w, c) = shape;
    let (gh, gw) = (h / patch, w / patch);
    (0..samples)
        .map(|s| {
            let mut img = ImageGrid::zeros(h, w, c);
            for ty in 0..gh {
                for tx in 0..gw {
                    let row = t.row(s * gh * gw + ty * gw + tx);
                    let mut k = 0;
                    for dy in 0..patch {
                        for dx in 0..patch {
                            for ch in 0..c {
                                img.set(ty * patch + dy, tx * patch + dx, ch, row[k]);
                                k += 1;
                            }
                        }
                    }
                }
            }
            img
        })
        .collect()
}

/// Conditioning seen by every block of one forward pass.
pub struct BlockConditioning {
    /// `SiLU(t_emb + caption pool + geo)`, `S×hidden`.
    pub adaln_input: Var,
    pub caption_tokens: Option<Var>,
    pub points: Option<PointBranch>,
    pub segments: usize,
}

pub struct PointBranch {
    pub embeddings: Var,
    pub mask: Vec<bool>,
    pub bias: Var,
}

pub struct ForwardOutput {
    /// Predicted velocity in patch layout, `(S·N)×patch_dim`.
    pub velocity: Var,
    /// Tokens after block `align_block_index`.
    pub hidden: Var,
    /// MetaRBF extents, `(S·max_points)×2`, at the points stage.
    pub extents: Option<Var>,
}

/// One residual block: gated self-attention, then (stage ≥ text) caption
/// cross-attention, then (points stage) the local point attention delta,
/// then the gated MLP.
pub fn dit_block(
    g: &mut Graph,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
    cond: &BlockConditioning,
    heads: usize,
) -> Var {
    let d = g.shape(x).1;
    let s = cond.segments;
    let n = g.shape(x).0 / s;
    let mods = linear(g, pv, &format!("{prefix}.ada"), cond.adaln_input);
    let chunk: Vec<Var> = (0..6).map(|k| g.slice_cols(mods, k * d, d)).collect();
    let (sh1, sc1, g1, sh2, sc2, g2) = (chunk[0], chunk[1], chunk[2], chunk[3], chunk[4], chunk[5]);

    let h = g.layer_norm(x);
    let h = g.modulate(h, sh1, sc1, n);
    let qkv = linear(g, pv, &format!("{prefix}.attn.qkv"), h);
    let q = g.slice_cols(qkv, 0, d);
    let k = g.slice_cols(qkv, d, d);
    let v = g.slice_cols(qkv, 2 * d, d);
    let a = g.attention(q, k, v, None, None, heads, s);
    let a = linear(g, pv, &format!("{prefix}.attn.out"), a);
    let mut x = g.gate_add(x, g1, a, n);

    if let Some(tokens) = cond.caption_tokens {
        let h = g.layer_norm(x);
        let q = linear(g, pv, &format!("{prefix}.xattn.q"), h);
        let kv = linear(g, pv, &format!("{prefix}.xattn.kv"), tokens);
        let k = g.slice_cols(kv, 0, d);
        let v = g.slice_cols(kv, d, d);
        let a = g.attention(q, k, v, None, None, heads, s);
        let a = linear(g, pv, &format!("{prefix}.xattn.out"), a);
        x = g.add(x, a);
    }

    if let Some(pts) = &cond.points {
        let h = g.layer_norm(x);
        let delta = ala::local_attention(
            g,
            pv,
            &format!("{prefix}.ala"),
            h,
            pts.embeddings,
            Some(pts.bias),
            &pts.mask,
            heads,
            s,
        );
        x = g.add(x, delta);
    }

    let h = g.layer_norm(x);
    let h = g.modulate(h, sh2, sc2, n);
    let h = linear(g, pv, &format!("{prefix}.mlp.fc1"), h);
    let h = g.gelu(h);
    let h = linear(g, pv, &format!("{prefix}.mlp.fc2"), h);
    g.gate_add(x, g2, h, n)
}

/// Network definition for one stage. Parameters live outside, in a
/// [`Params`] bundle bound per forward pass.
#[derive(Clone, Debug)]
pub struct GeoDiT {
    pub cfg: ModelConfig,
    pub stage: Stage,
    pub geo: GeoFourier,
    positions: Vec<[f64; 2]>,
    pos_embed: Tensor,
}

impl GeoDiT {
    pub fn new(cfg: ModelConfig, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        let side = cfg.tokens_per_side();
        let positions = token_positions(side);
        let mut pos_embed = Tensor::zeros(positions.len(), cfg.hidden_dim);
        for (j, p) in positions.iter().enumerate() {
            pos_embed.row_mut(j).copy_from_slice(&sincos2d(p[0], p[1], cfg.hidden_dim)?);
        }
        let geo = GeoFourier::new(cfg.frozen_seed);
        Ok(Self { cfg, stage, geo, positions, pos_embed })
    }

    pub fn token_positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.cfg.grid_size, self.cfg.grid_size, self.cfg.channels)
    }

    /// Builds the conditioning vector and the per-branch inputs.
    pub fn conditioning(&self, g: &mut Graph, pv: &ParamVars, t: Var, conds: &[&Conditions]) -> Result<(BlockConditioning, Option<Var>)> {
        let s = conds.len();
        let mut c = conditioning::embed_timestep(g, pv, t);
        let mut caption_tokens = None;
        let mut points = None;
        let mut extents = None;
        if self.stage.has_text() {
            let ids: Vec<Option<usize>> = conds.iter().map(|c| c.caption).collect();
            let (pooled, tokens) = conditioning::encode_captions(g, pv, &self.cfg, &ids)?;
            let pooled = linear(g, pv, "caption.pool", pooled);
            c = g.add(c, pooled);
            caption_tokens = Some(tokens);
        }
        if self.stage.has_points() {
            let latlons: Vec<Option<(f64, f64)>> = conds.iter().map(|c| c.latlon).collect();
            let geo = conditioning::embed_geolocation(g, pv, &self.geo, &latlons)?;
            c = g.add(c, geo);
            let sets: Vec<&PointSet> = conds.iter().map(|c| &c.points).collect();
            for set in &sets {
                if set.capacity() != self.cfg.max_points {
                    return Err(Error::Shape(format!("point set capacity {} vs max_points {}", set.capacity(), self.cfg.max_points)));
                }
                set.validate(self.cfg.tokens_per_side(), self.cfg.tag_vocab_size)?;
            }
            let (embeddings, mask) = conditioning::encode_points(g, pv, &self.cfg, &sets)?;
            let sigma = ala::meta_rbf(g, pv, embeddings, &mask, self.cfg.num_heads, self.cfg.max_points);
            let bias = ala::prior_bias(g, sigma, &sets, &self.positions);
            extents = Some(sigma);
            points = Some(PointBranch { embeddings, mask, bias });
        }
        let adaln_input = g.silu(c);
        Ok((BlockConditioning { adaln_input, caption_tokens, points, segments: s }, extents))
    }

    /// `x_patches: (S·N)×patch_dim`, `t: S×1`.
    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x_patches: Var, t: Var, conds: &[&Conditions]) -> Result<ForwardOutput> {
        let s = conds.len();
        let n = self.cfg.num_tokens();
        let d = self.cfg.hidden_dim;
        if g.shape(x_patches) != (s * n, self.cfg.patch_dim()) {
            return Err(Error::Shape(format!("input patches {:?}, expected {:?}", g.shape(x_patches), (s * n, self.cfg.patch_dim()))));
        }
        if g.shape(t) != (s, 1) {
            return Err(Error::Shape(format!("timesteps {:?}, expected ({s}, 1)", g.shape(t))));
        }
        let (cond, extents) = self.conditioning(g, pv, t, conds)?;

        let x = linear(g, pv, "x_embed", x_patches);
        let mut pos = Tensor::zeros(s * n, d);
        for r in 0..s * n {
            pos.row_mut(r).copy_from_slice(self.pos_embed.row(r % n));
        }
        let pos = g.constant(pos);
        let mut x = g.add(x, pos);
        let mut hidden = x;
        for i in 0..self.cfg.depth {
            x = dit_block(g, pv, &format!("blocks.{i}"), x, &cond, self.cfg.num_heads);
            if i == self.cfg.align_block_index {
                hidden = x;
            }
        }
        let mods = linear(g, pv, "final.ada", cond.adaln_input);
        let shift = g.slice_cols(mods, 0, d);
        let scale = g.slice_cols(mods, d, d);
        let h = g.layer_norm(x);
        let h = g.modulate(h, shift, scale, n);
        let velocity = linear(g, pv, "final.out", h);
        Ok(ForwardOutput { velocity, hidden, extents })
    }

    /// Inference: predicted velocity per sample at per-sample times.
    pub fn predict(&self, params: &Params, xs: &[&ImageGrid], ts: &[f64], conds: &[&Conditions]) -> Result<Vec<ImageGrid>> {
        if xs.len() != conds.len() || xs.len() != ts.len() {
            return Err(Error::Shape("predict: inputs, times and conditions differ in length".into()));
        }
        let mut g = Graph::inference();
        let pv = ParamVars::bind(&mut g, params, false);
        let patches = g.constant(patchify_grids(xs, self.cfg.patch_size)?);
        let t = g.constant(Tensor::from_vec(ts.len(), 1, ts.to_vec()));
        let out = self.forward(&mut g, &pv, patches, t, conds)?;
        Ok(unpatchify(g.value(out.velocity), xs.len(), self.image_shape(), self.cfg.patch_size))
    }

    /// Inference: MetaRBF extents for each sample's point set.
    pub fn predict_extents(&self, params: &Params, conds: &[&Conditions]) -> Result<Vec<ala::SpatialExtents>> {
        if !self.stage.has_points() {
            return Err(Error::StageOrder("extents need the points stage".into()));
        }
        let mut g = Graph::inference();
        let pv = ParamVars::bind(&mut g, params, false);
        let t = g.constant(Tensor::zeros(conds.len(), 1));
        let (_, extents) = self.conditioning(&mut g, &pv, t, conds)?;
        let sets: Vec<&PointSet> = conds.iter().map(|c| &c.points).collect();
        Ok(ala::extents_from(&g, extents.expect("points stage yields extents"), &sets))
    }
}
