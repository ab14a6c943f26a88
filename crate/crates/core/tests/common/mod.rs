#![allow(dead_code)]

use geodit::checkpoint::Checkpoint;
use geodit::conditioning::{Conditions, PointQuery, PointSet};
use geodit::config::{ModelConfig, Stage, TrainConfig};
use geodit::flow::standard_normal_grid;
use geodit::gradcheck::tiny_config;
use geodit::image::ImageGrid;
use geodit::model::GeoDiT;
use geodit::train::{run_stage, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_train(stage: Stage, steps: usize) -> TrainConfig {
    TrainConfig { stage, steps, batch_size: 2, points_range: (1, 4), ..Default::default() }
}

/// Random inputs with every condition group populated.
pub fn random_inputs(cfg: &ModelConfig, n: usize, seed: u64) -> (Vec<ImageGrid>, Vec<f64>, Vec<Conditions>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.tokens_per_side() as f64;
    let xs = (0..n).map(|_| standard_normal_grid(cfg.grid_size, cfg.grid_size, cfg.channels, &mut rng)).collect();
    let ts = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    let conds = (0..n)
        .map(|_| {
            let k = rng.random_range(1..=cfg.max_points);
            let pts = (0..k)
                .map(|_| PointQuery { x: rng.random_range(0.0..side), y: rng.random_range(0.0..side), tag_id: rng.random_range(0..cfg.tag_vocab_size) })
                .collect();
            Conditions {
                caption: Some(rng.random_range(0..cfg.caption_vocab)),
                points: PointSet::new(pts, cfg.max_points).unwrap(),
                latlon: Some((rng.random_range(-90.0..90.0), rng.random_range(-180.0..180.0))),
            }
        })
        .collect();
    (xs, ts, conds)
}

/// Largest absolute output difference between the trained `prev` checkpoint
/// and the next stage's initialization built from it, over random inputs.
pub fn continuity_gap(prev: &Checkpoint, next: Stage, trials: usize) -> f64 {
    let trainer = Trainer::new(prev.config.clone(), TrainConfig { stage: next, ..tiny_train(next, 1) }).unwrap();
    let (params, _) = trainer.initial_params(Some(prev)).unwrap();
    let old = GeoDiT::new(prev.config.clone(), prev.stage).unwrap();
    let new = GeoDiT::new(prev.config.clone(), next).unwrap();
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let (xs, ts, conds) = random_inputs(&prev.config, 3, 100 + trial as u64);
        let xr: Vec<&ImageGrid> = xs.iter().collect();
        let cr: Vec<&Conditions> = conds.iter().collect();
        let a = old.predict(&prev.params, &xr, &ts, &cr).unwrap();
        let b = new.predict(&params, &xr, &ts, &cr).unwrap();
        for (u, v) in a.iter().zip(&b) {
            for (p, q) in u.data().iter().zip(v.data()) {
                worst = worst.max(if p.to_bits() == q.to_bits() { 0.0 } else { (p - q).abs().max(f64::MIN_POSITIVE) });
            }
        }
    }
    worst
}

/// Trains the tiny config through all three stages for a few steps each.
pub fn tiny_pipeline(steps: usize) -> (Checkpoint, Checkpoint, Checkpoint) {
    let cfg = ModelConfig { align_block_index: 1, caption_vocab: 6, ..tiny_config() };
    let c1 = run_stage(&tiny_train(Stage::Unconditional, steps), &cfg, None, None).unwrap();
    let c2 = run_stage(&tiny_train(Stage::Text, steps), &cfg, Some(&c1), None).unwrap();
    let c3 = run_stage(&tiny_train(Stage::PointsGeo, steps), &cfg, Some(&c2), None).unwrap();
    (c1, c2, c3)
}
