use geodit::conditioning::Conditions;
use geodit::data::{generate_tile, AnnotatedTile};
use geodit::image::ImageGrid;
use geodit::sampler::{
    build_inpaint_points, inpaint, inpaint_batch, integrate_batch, integrate_from, FnField, InpaintTask, Integrator,
    SamplerConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SHAPE: (usize, usize, usize) = (4, 4, 3);

fn null() -> Conditions {
    Conditions::unconditional(4)
}

fn scalar(v: f64) -> ImageGrid {
    ImageGrid::filled(1, 1, 1, v)
}

/// Mean velocity for scalar data `N(m, s²)` under the linear path.
fn gaussian_field(m: f64, s: f64) -> impl Fn(&ImageGrid, f64, &Conditions) -> ImageGrid {
    move |x, t, _| {
        let var = (1.0 - t).powi(2) * s * s + t * t;
        let centered = x.data()[0] - (1.0 - t) * m;
        scalar((t - (1.0 - t) * s * s) * centered / var - m)
    }
}

/// A smooth field that depends on position, time and channel.
fn wavy(x: &ImageGrid, t: f64, _c: &Conditions) -> ImageGrid {
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v * 1.3 + t).sin() - 0.1 * i as f64 * t;
    }
    out
}

#[test]
fn heun_beats_euler_on_an_exact_flow() {
    let (m, s, eps) = (0.5, 0.2, 1.3);
    let exact = m + s * eps;
    let f = FnField::new(gaussian_field(m, s));
    for steps in [10, 20, 50] {
        let err = |integrator| {
            let cfg = SamplerConfig { num_steps: steps, integrator, ..Default::default() };
            (integrate_from(&f, vec![scalar(eps)], &[&null()], &cfg).unwrap()[0].data()[0] - exact).abs()
        };
        let (e, h) = (err(Integrator::Euler), err(Integrator::Heun));
        assert!(h < e, "steps {steps}: heun {h:e} euler {e:e}");
    }
}

#[test]
fn point_mass_is_recovered_by_euler() {
    let f = FnField::new(|x: &ImageGrid, t: f64, _c: &Conditions| scalar((x.data()[0] - 0.7) / t));
    let cfg = SamplerConfig { num_steps: 10, ..Default::default() };
    let out = integrate_from(&f, vec![scalar(1.0)], &[&null()], &cfg).unwrap();
    assert!((out[0].data()[0] - 0.7).abs() < 1e-12);
}

#[test]
fn full_mask_matches_plain_sampling_and_empty_mask_returns_known() {
    let f = FnField::new(wavy);
    let cfg = SamplerConfig { num_steps: 12, seed: 5, ..Default::default() };
    let known = ImageGrid::filled(SHAPE.0, SHAPE.1, SHAPE.2, 0.25);
    let c = null();
    let plain = integrate_batch(&f, SHAPE, &[&c, &c], &cfg, 3).unwrap();
    let full = InpaintTask { known: known.clone(), mask: vec![true; 16], conditions: c.clone() };
    assert_eq!(inpaint_batch(&f, &[full.clone(), full], &cfg, 3).unwrap(), plain);
    let empty = InpaintTask { known: known.clone(), mask: vec![false; 16], conditions: c };
    assert_eq!(inpaint(&f, &empty, &cfg).unwrap(), known);
}

#[test]
fn guidance_of_identical_fields_is_the_conditional_field() {
    let f = FnField::new(wavy);
    let c = null();
    let base = SamplerConfig { num_steps: 8, seed: 2, ..Default::default() };
    let guided = SamplerConfig { cfg_scale: 1.0, ..base };
    let a = integrate_batch(&f, SHAPE, &[&c], &base, 0).unwrap();
    let b = integrate_batch(&f, SHAPE, &[&c], &guided, 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, integrate_batch(&f, SHAPE, &[&c], &base, 0).unwrap());
    assert_ne!(a, integrate_batch(&f, SHAPE, &[&c], &SamplerConfig { seed: 3, ..base }, 0).unwrap());
}

#[test]
fn samples_do_not_depend_on_batching() {
    let f = FnField::new(wavy);
    let c = null();
    let cfg = SamplerConfig { num_steps: 6, ..Default::default() };
    let all = integrate_batch(&f, SHAPE, &[&c, &c, &c], &cfg, 10).unwrap();
    for (i, sample) in all.iter().enumerate() {
        assert_eq!(&integrate_batch(&f, SHAPE, &[&c], &cfg, 10 + i as u64).unwrap()[0], sample);
    }
}

fn tile_with_upper_annotations() -> AnnotatedTile {
    (0..)
        .map(|seed| generate_tile(seed, 0, 16).unwrap())
        .find(|t| t.labels[..128].iter().any(Option::is_some))
        .unwrap()
}

#[test]
fn prompt_counts_follow_the_masked_fraction() {
    let tile = tile_with_upper_annotations();
    let mask: Vec<bool> = (0..256).map(|i| i < 128).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws = 10_000;
    let mut total = 0;
    for _ in 0..draws {
        let ps = build_inpaint_points(&mask, &tile, 20.0, 2, 50, &mut rng).unwrap();
        for p in ps.points() {
            let (x, y) = ((p.x * 2.0) as usize, (p.y * 2.0) as usize);
            assert!(mask[y * 16 + x]);
            assert_eq!(tile.label(x, y), Some(p.tag_id));
        }
        total += ps.len();
    }
    let mean = total as f64 / draws as f64;
    assert!((9.7..=10.3).contains(&mean), "mean {mean}");
}

#[test]
fn tiny_rates_still_place_one_point() {
    let tile = tile_with_upper_annotations();
    let mask: Vec<bool> = (0..256).map(|i| i < 128).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        assert_eq!(build_inpaint_points(&mask, &tile, 0.001, 2, 50, &mut rng).unwrap().len(), 1);
    }
    assert!(build_inpaint_points(&[false; 256], &tile, 1.0, 2, 50, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unmasked_pixels_are_preserved_exactly(
        mask in prop::collection::vec(any::<bool>(), 16),
        seed in 0u64..1000,
        heun in any::<bool>(),
    ) {
        let f = FnField::new(wavy);
        let cfg = SamplerConfig {
            num_steps: 5,
            seed,
            integrator: if heun { Integrator::Heun } else { Integrator::Euler },
            ..Default::default()
        };
        let known = ImageGrid::from_vec(4, 4, 3, (0..48).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let task = InpaintTask { known: known.clone(), mask: mask.clone(), conditions: null() };
        let out = inpaint(&f, &task, &cfg).unwrap();
        for (cell, &m) in mask.iter().enumerate() {
            for c in 0..3 {
                if !m {
                    prop_assert_eq!(out.data()[cell * 3 + c].to_bits(), known.data()[cell * 3 + c].to_bits());
                }
            }
        }
    }
}
