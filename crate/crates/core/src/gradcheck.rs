//! Central finite-difference checks of the reverse-mode gradients, plus the
//! suite of small double-precision cases covering every differentiable
//! component of the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ala;
use crate::autograd::{Graph, Var};
use crate::conditioning::{self, Conditions, GeoFourier, PointQuery, PointSet};
use crate::config::{ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::model::{self, BlockConditioning, GeoDiT, PointBranch};
use crate::nn::{ParamVars, Params};
use crate::repa;
use crate::tensor::Tensor;

/// Step of the fourth-order central stencil
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true
/// derivative is zero are judged by absolute error.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Compares analytic gradients of the scalar built by `f` with central
/// differences for every entry of every tensor in `inputs` (or at most
/// `max_per_tensor` randomly chosen entries per tensor).
pub fn check<F>(name: &str, inputs: &Params, max_per_tensor: Option<usize>, seed: u64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    check_with_step(name, inputs, max_per_tensor, seed, STEP, f)
}

/// [`check`] with an explicit stencil step, for inputs whose scale of
/// variation is far below [`STEP`].
pub fn check_with_step<F>(name: &str, inputs: &Params, max_per_tensor: Option<usize>, seed: u64, step: f64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, inputs, true);
    let loss = f(&mut g, &pv)?;
    if g.shape(loss) != (1, 1) {
        return Err(Error::Shape(format!("gradient check `{name}` needs a scalar, got {:?}", g.shape(loss))));
    }
    let mut grads = g.backward(loss);
    let analytic = pv.collect_grads(&g, &mut grads);

    let eval = |p: &Params| -> Result<f64> {
        let mut g = Graph::inference();
        let pv = ParamVars::bind(&mut g, p, false);
        let l = f(&mut g, &pv)?;
        Ok(g.value(l).get(0, 0))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = inputs.clone();
    let mut out = CheckResult { name: name.into(), entries: 0, max_rel_error: 0.0, max_abs_error: 0.0, worst: String::new() };
    for (key, tensor) in inputs {
        let len = tensor.len();
        let idx: Vec<usize> = match max_per_tensor {
            Some(m) if m < len => (0..m).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for i in idx {
            let orig = tensor.data()[i];
            let mut at = |dx: f64| -> Result<f64> {
                work.get_mut(key).expect("same keys").data_mut()[i] = orig + dx;
                eval(&work)
            };
            let (p2, p1, m1, m2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
            work.get_mut(key).expect("same keys").data_mut()[i] = orig;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * step);
            let a = analytic[key].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(FLOOR);
            out.entries += 1;
            out.max_abs_error = out.max_abs_error.max(abs);
            if rel > out.max_rel_error || !rel.is_finite() {
                out.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                out.worst = format!("{key}[{i}]");
            }
        }
    }
    Ok(out)
}

/// `Σ out ⊙ W` for a fixed random `W`, turning any node into a scalar with
/// generic (nonzero) upstream gradients.
pub fn random_projection(g: &mut Graph, out: Var, seed: u64) -> Var {
    let (r, c) = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    let w = g.constant(Tensor::from_fn(r, c, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)));
    let p = g.mul(out, w);
    g.sum(p)
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}

/// Replaces every all-zero tensor by small Gaussian noise, so zero-init
/// branches carry gradient into everything upstream of them.
pub fn randomize_zero_init(params: &mut Params, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.values_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = gaussian(t.rows(), t.cols(), scale, &mut rng);
        }
    }
}

/// The tiny configuration every case runs at.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        grid_size: 8,
        patch_size: 2,
        channels: 3,
        depth: 2,
        hidden_dim: 16,
        num_heads: 2,
        tag_vocab_size: 8,
        max_points: 4,
        align_block_index: 0,
        align_weight: 0.5,
        mlp_ratio: 2,
        caption_vocab: 3,
        caption_len: 3,
        feat_dim: 8,
        frozen_seed: 7,
    }
}

fn subset(params: &Params, prefixes: &[&str]) -> Params {
    params.iter().filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))).map(|(k, v)| (k.clone(), v.clone())).collect()
}

fn point_sets(cfg: &ModelConfig) -> Vec<PointSet> {
    let a = vec![
        PointQuery { x: 0.5, y: 1.0, tag_id: 2 },
        PointQuery { x: 3.0, y: 2.5, tag_id: 5 },
        PointQuery { x: 1.75, y: 3.0, tag_id: 0 },
    ];
    let b = vec![PointQuery { x: 2.0, y: 0.0, tag_id: 7 }];
    vec![PointSet::new(a, cfg.max_points).expect("fits"), PointSet::new(b, cfg.max_points).expect("fits")]
}

fn conditions(cfg: &ModelConfig) -> Vec<Conditions> {
    let sets = point_sets(cfg);
    vec![
        Conditions { caption: Some(1), points: sets[0].clone(), latlon: Some((12.0, -40.0)) },
        Conditions { caption: None, points: sets[1].clone(), latlon: None },
    ]
}

fn stage_params(cfg: &ModelConfig, stage: Stage, seed: u64) -> Result<Params> {
    let mut p = model::init_params(cfg, stage, seed)?;
    randomize_zero_init(&mut p, 0.3, seed ^ 1);
    Ok(p)
}

/// Every case of the suite. `max_per_tensor` bounds the entries sampled per
/// tensor (`None` checks all of them).
pub fn run_suite(max_per_tensor: Option<usize>) -> Result<Vec<CheckResult>> {
    let cfg = tiny_config();
    let d = cfg.hidden_dim;
    let m = cfg.max_points;
    let full = stage_params(&cfg, Stage::PointsGeo, 11)?;
    let sets = point_sets(&cfg);
    let set_refs: Vec<&PointSet> = sets.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut results = Vec::new();

    // Encoders.
    {
        let mut p = subset(&full, &["t_embed."]);
        p.insert("input.t".into(), Tensor::from_vec(3, 1, vec![0.1, 0.55, 0.93]));
        // Timestep frequencies reach 1000, so the stencil step shrinks to match.
        results.push(check_with_step("timestep_embedding", &p, max_per_tensor, 1, 1e-6, |g, pv| {
            let e = conditioning::embed_timestep(g, pv, pv.get("input.t"));
            Ok(random_projection(g, e, 1))
        })?);
        let p = subset(&full, &["caption."]);
        results.push(check("caption_encoder", &p, max_per_tensor, 2, |g, pv| {
            let (pooled, tokens) = conditioning::encode_captions(g, pv, &cfg, &[Some(0), None, Some(2)])?;
            let pooled = crate::nn::linear(g, pv, "caption.pool", pooled);
            let a = random_projection(g, pooled, 2);
            let b = random_projection(g, tokens, 3);
            Ok(g.add(a, b))
        })?);
        let p = subset(&full, &["points."]);
        results.push(check("point_encoder", &p, max_per_tensor, 3, |g, pv| {
            let (e, _) = conditioning::encode_points(g, pv, &cfg, &set_refs)?;
            Ok(random_projection(g, e, 4))
        })?);
        let p = subset(&full, &["geo."]);
        let geo = GeoFourier::new(cfg.frozen_seed);
        results.push(check("geo_encoder", &p, max_per_tensor, 4, |g, pv| {
            let e = conditioning::embed_geolocation(g, pv, &geo, &[Some((10.0, 20.0)), None, Some((-33.0, 179.5))])?;
            Ok(random_projection(g, e, 5))
        })?);
    }

    // ALA components.
    let mask: Vec<bool> = set_refs.iter().flat_map(|s| s.mask()).collect();
    let positions: Vec<[f64; 2]> = (0..8).map(|j| [(j % 4) as f64, (j / 4) as f64 * 1.5]).collect();
    {
        let mut p = subset(&full, &["meta_rbf."]);
        p.insert("input.points".into(), gaussian(2 * m, d, 1.0, &mut rng));
        results.push(check("meta_rbf", &p, max_per_tensor, 6, |g, pv| {
            let s = ala::meta_rbf(g, pv, pv.get("input.points"), &mask, cfg.num_heads, m);
            let keep: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let s = g.scale_rows(s, keep);
            Ok(random_projection(g, s, 6))
        })?);

        let mut p = Params::new();
        p.insert("input.sigma".into(), Tensor::from_fn(2 * m, 2, |r, c| 0.6 + 0.3 * ((r * 2 + c) % 5) as f64));
        results.push(check("rbf_prior_bias", &p, max_per_tensor, 7, |g, pv| {
            let b = ala::prior_bias(g, pv.get("input.sigma"), &set_refs, &positions);
            Ok(random_projection(g, b, 7))
        })?);

        let mut p = subset(&full, &["blocks.0.ala."]);
        p.insert("input.tokens".into(), gaussian(2 * 8, d, 1.0, &mut rng));
        p.insert("input.points".into(), gaussian(2 * m, d, 1.0, &mut rng));
        p.insert("input.sigma".into(), Tensor::from_fn(2 * m, 2, |r, c| 0.7 + 0.4 * ((r + c) % 3) as f64));
        results.push(check("local_attention", &p, max_per_tensor, 8, |g, pv| {
            let bias = ala::prior_bias(g, pv.get("input.sigma"), &set_refs, &positions);
            let out = ala::local_attention(
                g,
                pv,
                "blocks.0.ala",
                pv.get("input.tokens"),
                pv.get("input.points"),
                Some(bias),
                &mask,
                cfg.num_heads,
                2,
            );
            Ok(random_projection(g, out, 8))
        })?);

        let mut p = subset(&full, &["meta_rbf.", "blocks.0.ala."]);
        p.insert("input.tokens".into(), gaussian(2 * 8, d, 1.0, &mut rng));
        p.insert("input.points".into(), gaussian(2 * m, d, 1.0, &mut rng));
        results.push(check("ala_block", &p, max_per_tensor, 9, |g, pv| {
            let (delta, _) = ala::ala_block(
                g,
                pv,
                "blocks.0.ala",
                pv.get("input.tokens"),
                &set_refs,
                pv.get("input.points"),
                &mask,
                &positions,
                cfg.num_heads,
            );
            Ok(random_projection(g, delta, 9))
        })?);
    }

    // One full block with every branch active.
    {
        let mut p = subset(&full, &["blocks.0."]);
        p.insert("input.tokens".into(), gaussian(2 * 8, d, 1.0, &mut rng));
        p.insert("input.cond".into(), gaussian(2, d, 1.0, &mut rng));
        p.insert("input.caption".into(), gaussian(2 * cfg.caption_len, d, 1.0, &mut rng));
        p.insert("input.points".into(), gaussian(2 * m, d, 1.0, &mut rng));
        p.insert("input.sigma".into(), Tensor::from_fn(2 * m, 2, |r, c| 0.8 + 0.5 * ((r + 2 * c) % 3) as f64));
        results.push(check("dit_block", &p, max_per_tensor, 10, |g, pv| {
            let bias = ala::prior_bias(g, pv.get("input.sigma"), &set_refs, &positions);
            let cond = BlockConditioning {
                adaln_input: pv.get("input.cond"),
                caption_tokens: Some(pv.get("input.caption")),
                points: Some(PointBranch { embeddings: pv.get("input.points"), mask: mask.clone(), bias }),
                segments: 2,
            };
            let out = model::dit_block(g, pv, "blocks.0", pv.get("input.tokens"), &cond, cfg.num_heads);
            Ok(random_projection(g, out, 10))
        })?);
    }

    // Full forward with the training objective, per stage.
    let conds = conditions(&cfg);
    let cond_refs: Vec<&Conditions> = conds.iter().collect();
    let encoder = repa::TargetEncoder::new(&cfg);
    let n = cfg.num_tokens();
    let x = gaussian(2 * n, cfg.patch_dim(), 1.0, &mut rng);
    let target_v = gaussian(2 * n, cfg.patch_dim(), 1.0, &mut rng);
    let target_f = gaussian(2 * n, encoder.feat_dim(), 1.0, &mut rng);
    let ts = Tensor::from_vec(2, 1, vec![0.3, 0.85]);
    for stage in [Stage::Unconditional, Stage::Text, Stage::PointsGeo] {
        let net = GeoDiT::new(cfg.clone(), stage)?;
        let p = stage_params(&cfg, stage, 11)?;
        results.push(check(&format!("forward_loss_{}", stage.name()), &p, max_per_tensor, 12, |g, pv| {
            let xp = g.constant(x.clone());
            let t = g.constant(ts.clone());
            let out = net.forward(g, pv, xp, t, &cond_refs)?;
            let v = g.mse(out.velocity, &target_v);
            let a = repa::alignment_loss(g, pv, out.hidden, &target_f)?;
            let a = g.scale(a, cfg.align_weight);
            Ok(g.add(v, a))
        })?);
    }
    Ok(results)
}

/// Per-case summary lines.
pub fn format_results(results: &[CheckResult]) -> String {
    results
        .iter()
        .map(|r| {
            let verdict = if r.passed() { "ok".to_string() } else { format!("FAIL at {}", r.worst) };
            format!(
                "{:<24} {:>6} entries  max rel {:.3e}  max abs {:.3e}  {verdict}\n",
                r.name, r.entries, r.max_rel_error, r.max_abs_error
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient_scale() {
        let mut p = Params::new();
        p.insert("x".into(), Tensor::from_vec(1, 3, vec![0.3, -1.2, 2.0]));
        let ok = check("square", &p, None, 0, |g, pv| {
            let s = g.square(pv.get("x"));
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert_eq!(ok.entries, 3);
        // A scalar that is not differentiable in the graph's sense: the
        // constant leaf hides the dependence, so the analytic gradient is 0.
        let bad = check("hidden", &p, None, 0, |g, pv| {
            let c = g.constant(g.value(pv.get("x")).clone());
            let s = g.square(c);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn non_scalar_is_rejected() {
        let mut p = Params::new();
        p.insert("x".into(), Tensor::zeros(2, 2));
        assert!(check("m", &p, None, 0, |_, pv| Ok(pv.get("x"))).is_err());
    }
}
