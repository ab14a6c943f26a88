//! Adaptive local attention: per-point spatial extents, the Gaussian
//! spatial prior they parameterize, and prior-biased cross-attention from
//! image tokens to point prompts.

use crate::autograd::{gaussian_prior, Graph, Var};
use crate::conditioning::PointSet;
use crate::config::{ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::nn::{linear, Init, ParamSpec, ParamVars, SpecBuilder};

/// Lower bound on predicted extents, in token units.
pub const SIGMA_MIN: f64 = 0.25;
/// Added inside the log of the prior before it biases attention logits.
pub const PRIOR_FLOOR: f64 = 1e-6;
/// Initial extent the MetaRBF head is biased toward, in token units.
const SIGMA_INIT: f64 = 2.0;

/// Token `j` sits at `(j mod side, j div side)`.
pub fn token_positions(side: usize) -> Vec<[f64; 2]> {
    (0..side * side).map(|j| [(j % side) as f64, (j / side) as f64]).collect()
}

/// Predicted `(σx, σy)` per point slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialExtents {
    pub sigma_x: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SpatialExtents {
    pub fn len(&self) -> usize {
        self.sigma_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma_x.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            sigma_x: self.sigma_x.iter().map(|s| s * c).collect(),
            sigma_y: self.sigma_y.iter().map(|s| s * c).collect(),
            mask: self.mask.clone(),
        }
    }
}

/// `values[i][j]`: prior of point `i` at token `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfPriorMatrix {
    pub values: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl RbfPriorMatrix {
    /// The token with the largest prior for point `i`; the first index wins ties.
    pub fn argmax(&self, i: usize) -> usize {
        let row = &self.values[i];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    }
}

/// Evaluates `exp(-(j_x - x_i)²/σx,i² - (j_y - y_i)²/σy,i²)` for every
/// point slot and token. Padding rows are all zero.
pub fn rbf_prior(points: &PointSet, extents: &SpatialExtents, token_positions: &[[f64; 2]]) -> Result<RbfPriorMatrix> {
    if extents.len() != points.capacity() {
        return Err(Error::Shape(format!("{} extents for {} point slots", extents.len(), points.capacity())));
    }
    let mut values = vec![vec![0.0; token_positions.len()]; points.capacity()];
    for (i, p) in points.points().iter().enumerate() {
        let (sx, sy) = (extents.sigma_x[i], extents.sigma_y[i]);
        if !(sx >= SIGMA_MIN && sy >= SIGMA_MIN) {
            return Err(Error::OutOfRange(format!("extent ({sx}, {sy}) below sigma_min {SIGMA_MIN}")));
        }
        for (j, pos) in token_positions.iter().enumerate() {
            values[i][j] = gaussian_prior(pos, &[p.x, p.y], sx, sy);
        }
    }
    Ok(RbfPriorMatrix { values, mask: points.mask() })
}

/// Shared MetaRBF parameters plus one local-attention block per DiT block.
pub fn param_specs(cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    let d = cfg.hidden_dim;
    // softplus(raw) + SIGMA_MIN = SIGMA_INIT at raw = bias.
    let raw_bias = ((SIGMA_INIT - SIGMA_MIN).exp() - 1.0).ln();
    let mut b = SpecBuilder::new(out, Stage::PointsGeo);
    b.linear("meta_rbf.attn.qkv", d, 3 * d, Init::Xavier)
        .linear("meta_rbf.attn.out", d, d, Init::Xavier)
        .linear("meta_rbf.ffn.fc1", d, d, Init::Xavier)
        .add("meta_rbf.ffn.fc2.w", d, 2, Init::Normal(0.02))
        .add("meta_rbf.ffn.fc2.b", 1, 2, Init::Const(raw_bias));
    for i in 0..cfg.depth {
        b.linear(&format!("blocks.{i}.ala.q"), d, d, Init::Xavier)
            .linear(&format!("blocks.{i}.ala.kv"), d, 2 * d, Init::Xavier)
            .linear(&format!("blocks.{i}.ala.out"), d, d, Init::Zeros);
    }
}

/// MetaRBF: self-attention over the valid point embeddings followed by a
/// feedforward head; returns `σ = softplus(raw) + SIGMA_MIN` as an
/// `(S·M)×2` node. Padded slots carry values that are never read.
pub fn meta_rbf(g: &mut Graph, pv: &ParamVars, point_embs: Var, mask: &[bool], heads: usize, points_per_sample: usize) -> Var {
    let d = g.shape(point_embs).1;
    let segments = mask.len() / points_per_sample;
    let h = g.layer_norm(point_embs);
    let qkv = linear(g, pv, "meta_rbf.attn.qkv", h);
    let q = g.slice_cols(qkv, 0, d);
    let k = g.slice_cols(qkv, d, d);
    let v = g.slice_cols(qkv, 2 * d, d);
    let a = g.attention(q, k, v, None, Some(mask), heads, segments);
    let a = linear(g, pv, "meta_rbf.attn.out", a);
    let h = g.add(point_embs, a);
    let f = linear(g, pv, "meta_rbf.ffn.fc1", h);
    let f = g.silu(f);
    let raw = linear(g, pv, "meta_rbf.ffn.fc2", f);
    let sp = g.softplus(raw);
    g.add_scalar(sp, SIGMA_MIN)
}

/// Graph node holding `ln(prior + PRIOR_FLOOR)` as an `(S·N)×M` attention bias.
pub fn prior_bias(g: &mut Graph, sigma: Var, sets: &[&PointSet], positions: &[[f64; 2]]) -> Var {
    let m = sets.first().map_or(0, |s| s.capacity());
    let mut centers = Vec::with_capacity(sets.len() * m);
    let mut mask = Vec::with_capacity(sets.len() * m);
    for set in sets {
        for i in 0..m {
            match set.points().get(i) {
                Some(p) => {
                    centers.push([p.x, p.y]);
                    mask.push(true);
                }
                None => {
                    centers.push([0.0, 0.0]);
                    mask.push(false);
                }
            }
        }
    }
    g.rbf_log_bias(sigma, &centers, &mask, m, positions, PRIOR_FLOOR)
}

/// Cross-attention from tokens to point embeddings with an optional
/// additive logit bias shared across heads. Masked points are excluded;
/// a sample with no valid point gets a zero delta. The output projection
/// `{prefix}.out` is zero at initialization.
#[allow(clippy::too_many_arguments)]
pub fn local_attention(
    g: &mut Graph,
    pv: &ParamVars,
    prefix: &str,
    tokens: Var,
    point_embs: Var,
    bias: Option<Var>,
    mask: &[bool],
    heads: usize,
    segments: usize,
) -> Var {
    let d = g.shape(tokens).1;
    let q = linear(g, pv, &format!("{prefix}.q"), tokens);
    let kv = linear(g, pv, &format!("{prefix}.kv"), point_embs);
    let k = g.slice_cols(kv, 0, d);
    let v = g.slice_cols(kv, d, d);
    let a = g.attention(q, k, v, bias, Some(mask), heads, segments);
    let out = linear(g, pv, &format!("{prefix}.out"), a);
    // A sample without points contributes nothing, not the output bias.
    let n = g.shape(tokens).0 / segments;
    let m = mask.len() / segments;
    let keep: Vec<f64> = (0..segments * n)
        .map(|r| {
            let s = r / n;
            if mask[s * m..(s + 1) * m].iter().any(|&b| b) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    if keep.iter().all(|&k| k == 1.0) {
        out
    } else {
        g.scale_rows(out, keep)
    }
}

/// MetaRBF → prior → local attention for one block; returns the additive
/// token delta and the extents node.
#[allow(clippy::too_many_arguments)]
pub fn ala_block(
    g: &mut Graph,
    pv: &ParamVars,
    prefix: &str,
    tokens: Var,
    sets: &[&PointSet],
    point_embs: Var,
    mask: &[bool],
    positions: &[[f64; 2]],
    heads: usize,
) -> (Var, Var) {
    let m = sets.first().map_or(0, |s| s.capacity());
    let sigma = meta_rbf(g, pv, point_embs, mask, heads, m);
    let bias = prior_bias(g, sigma, sets, positions);
    let delta = local_attention(g, pv, prefix, tokens, point_embs, Some(bias), mask, heads, sets.len());
    (delta, sigma)
}

/// Reads an `(S·M)×2` extents node back into per-sample [`SpatialExtents`].
pub fn extents_from(g: &Graph, sigma: Var, sets: &[&PointSet]) -> Vec<SpatialExtents> {
    let t = g.value(sigma);
    let m = sets.first().map_or(0, |s| s.capacity());
    sets.iter()
        .enumerate()
        .map(|(s, set)| SpatialExtents {
            sigma_x: (0..m).map(|i| t.get(s * m + i, 0)).collect(),
            sigma_y: (0..m).map(|i| t.get(s * m + i, 1)).collect(),
            mask: set.mask(),
        })
        .collect()
}
