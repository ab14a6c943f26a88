mod common;

use common::tiny_train;
use geodit::checkpoint::{load_checkpoint, save_checkpoint};
use geodit::config::{ModelConfig, Stage, TrainConfig};
use geodit::error::Error;
use geodit::gradcheck::tiny_config;
use geodit::train::{parse_log, run_stage, Trainer};

fn text_config() -> ModelConfig {
    ModelConfig { caption_vocab: 6, ..tiny_config() }
}

#[test]
fn trained_checkpoint_survives_the_file_system() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt_path, log_path) = (dir.path().join("s1.ckpt"), dir.path().join("logs/s1.csv"));
    let ckpt = run_stage(&TrainConfig { log_every: 1, ..tiny_train(Stage::Unconditional, 3) }, &text_config(), None, Some(&log_path)).unwrap();
    save_checkpoint(&ckpt, &ckpt_path).unwrap();
    let back = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.step, 3);
    let log = parse_log(&std::fs::read_to_string(&log_path).unwrap()).unwrap();
    assert_eq!(log.iter().map(|s| s.step).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(log.iter().all(|s| s.v_loss.is_finite() && s.a_loss.is_finite()));

    let bytes = std::fs::read(&ckpt_path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::PayloadLength { .. })));
    std::fs::write(&cut, &bytes[..10]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::CorruptHeader { .. })));
    assert!(matches!(load_checkpoint(&dir.path().join("absent.ckpt")), Err(Error::Io { .. })));
}

#[test]
fn next_stage_carries_every_array_and_adds_its_branches() {
    let cfg = text_config();
    let s1 = run_stage(&tiny_train(Stage::Unconditional, 2), &cfg, None, None).unwrap();
    let trainer = Trainer::new(cfg.clone(), tiny_train(Stage::Text, 1)).unwrap();
    let (params, start) = trainer.initial_params(Some(&s1)).unwrap();
    assert_eq!(start, 0);
    for (name, t) in &s1.params {
        assert_eq!(&params[name], t, "{name}");
    }
    let added: Vec<&String> = params.keys().filter(|k| !s1.params.contains_key(*k)).collect();
    assert!(added.iter().any(|k| k.starts_with("caption.")), "{added:?}");
    assert!(!added.iter().any(|k| k.starts_with("points.") || k.starts_with("geo.")), "{added:?}");
}

#[test]
fn resuming_a_stage_continues_its_step_count() {
    let cfg = text_config();
    let s1 = run_stage(&tiny_train(Stage::Unconditional, 2), &cfg, None, None).unwrap();
    let more = run_stage(&tiny_train(Stage::Unconditional, 2), &cfg, Some(&s1), None).unwrap();
    assert_eq!(more.step, 4);
    assert_ne!(more.params, s1.params);
}

#[test]
fn stage_order_and_config_are_enforced() {
    let cfg = text_config();
    let s1 = run_stage(&tiny_train(Stage::Unconditional, 1), &cfg, None, None).unwrap();
    assert!(matches!(run_stage(&tiny_train(Stage::Text, 1), &cfg, None, None), Err(Error::StageOrder(_))));
    assert!(matches!(run_stage(&tiny_train(Stage::PointsGeo, 1), &cfg, Some(&s1), None), Err(Error::StageOrder(_))));
    let other = ModelConfig { align_weight: 0.25, ..cfg };
    assert!(matches!(run_stage(&tiny_train(Stage::Unconditional, 1), &other, Some(&s1), None), Err(Error::Config(_))));
    // The training stream draws captions from every archetype.
    assert!(matches!(Trainer::new(tiny_config(), tiny_train(Stage::Text, 1)), Err(Error::Config(_))));
}
