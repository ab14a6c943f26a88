use geodit::conditioning::{sincos2d, Encoders, GeoFourier, PointQuery};
use geodit::config::{ModelConfig, Stage};
use geodit::gradcheck::{randomize_zero_init, tiny_config};
use geodit::model::init_params;
use geodit::nn::Params;
use proptest::prelude::*;

fn setup(seed: u64) -> (ModelConfig, Params, GeoFourier) {
    let cfg = ModelConfig { frozen_seed: seed, ..tiny_config() };
    let mut params = init_params(&cfg, Stage::PointsGeo, seed).unwrap();
    randomize_zero_init(&mut params, 0.3, seed);
    let geo = GeoFourier::new(cfg.frozen_seed);
    (cfg, params, geo)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn timestep_embedding_is_deterministic_and_nondegenerate() {
    let (cfg, params, geo) = setup(1);
    let enc = Encoders { cfg: &cfg, params: &params, geo: &geo };
    assert_eq!(enc.embed_timestep(0.4).unwrap(), enc.embed_timestep(0.4).unwrap());
    let norm = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (n0, n1) = (norm(enc.embed_timestep(0.0).unwrap()), norm(enc.embed_timestep(1.0).unwrap()));
    assert!((n0 - n1).abs() > 0.0, "{n0} vs {n1}");
    assert!(enc.embed_timestep(1.01).is_err());
    assert!(enc.embed_timestep(-0.01).is_err());
}

#[test]
fn point_embeddings_separate_tags() {
    let (cfg, params, geo) = setup(2);
    let enc = Encoders { cfg: &cfg, params: &params, geo: &geo };
    let p = PointQuery { x: 1.5, y: 2.0, tag_id: 3 };
    assert_eq!(enc.encode_point(p).unwrap(), enc.encode_point(p).unwrap());
    let q = PointQuery { tag_id: 4, ..p };
    assert_ne!(enc.encode_point(p).unwrap(), enc.encode_point(q).unwrap());
    assert!(enc.encode_point(PointQuery { tag_id: cfg.tag_vocab_size, ..p }).is_err());
}

#[test]
fn geolocation_wraps_longitude_and_rejects_out_of_range() {
    let (cfg, params, geo) = setup(3);
    let enc = Encoders { cfg: &cfg, params: &params, geo: &geo };
    assert_eq!(enc.embed_geolocation(0.0, 0.0).unwrap(), enc.embed_geolocation(0.0, 0.0).unwrap());
    assert_eq!(enc.embed_geolocation(-20.0, -180.0).unwrap(), enc.embed_geolocation(-20.0, 180.0).unwrap());
    assert!(enc.embed_geolocation(90.5, 0.0).is_err());
}

#[test]
fn nearby_locations_embed_closer_over_frozen_seeds() {
    let mut wins = 0;
    for seed in 0..100 {
        let (cfg, params, geo) = setup(1000 + seed);
        let enc = Encoders { cfg: &cfg, params: &params, geo: &geo };
        let origin = enc.embed_geolocation(0.0, 0.0).unwrap();
        let near = enc.embed_geolocation(0.0, 0.1).unwrap();
        let far = enc.embed_geolocation(0.0, 90.0).unwrap();
        if l2(&origin, &near) < l2(&origin, &far) {
            wins += 1;
        }
    }
    assert!(wins >= 95, "{wins}/100");
}

#[test]
fn caption_pool_is_the_token_mean() {
    let (cfg, params, geo) = setup(4);
    let enc = Encoders { cfg: &cfg, params: &params, geo: &geo };
    let mut seqs = Vec::new();
    for id in 0..cfg.caption_vocab {
        let (pooled, tokens) = enc.encode_caption(id).unwrap();
        assert_eq!(tokens.len(), cfg.caption_len);
        for c in 0..cfg.hidden_dim {
            let m = tokens.iter().map(|t| t[c]).sum::<f64>() / tokens.len() as f64;
            assert!((pooled[c] - m).abs() < 1e-15);
        }
        seqs.push(tokens);
    }
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            assert_ne!(seqs[i], seqs[j]);
        }
    }
    assert!(enc.encode_caption(cfg.caption_vocab).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fusion_is_additive(x in 0.0f64..4.0, y in 0.0f64..4.0, t1 in 0usize..8, t2 in 0usize..8) {
        let (cfg, params, geo) = setup(5);
        let enc = Encoders { cfg: &cfg, params: &params, geo: &geo };
        let tags = &params["points.tags"];
        let strip = |tag: usize| -> Vec<f64> {
            let e = enc.encode_point(PointQuery { x, y, tag_id: tag }).unwrap();
            e.iter().zip(tags.row(tag)).map(|(a, b)| a - b).collect()
        };
        let (a, b) = (strip(t1), strip(t2));
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn sincos_halves_are_separable(x in -10.0f64..10.0, y1 in -10.0f64..10.0, y2 in -10.0f64..10.0) {
        let a = sincos2d(x, y1, 16).unwrap();
        let b = sincos2d(x, y2, 16).unwrap();
        prop_assert_eq!(&a[..8], &b[..8]);
    }
}
