use geodit::conditioning::{PointQuery, PointSet};
use geodit::data::{
    classify_pixel, fidelity_oracle, generate_tile, sample_point_prompts, scene_spec, ARCHETYPES, BACKGROUND_COLOR,
    TAG_COLORS,
};
use geodit::image::ImageGrid;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn annotation_tags_follow_the_archetype_mix() {
    for (id, arch) in ARCHETYPES.iter().enumerate() {
        let mut counts = [0usize; 8];
        for seed in 0..10_000 {
            for a in scene_spec(seed, id, 16).unwrap().annotations {
                counts[a.tag_id] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let mix_total: f64 = arch.mix.iter().sum();
        for (tag, &n) in counts.iter().enumerate() {
            let want = arch.mix[tag] / mix_total;
            let got = n as f64 / total as f64;
            if want == 0.0 {
                assert_eq!(n, 0, "{} tag {tag}", arch.name);
            } else {
                assert!((got - want).abs() <= 0.2 * want, "{} tag {tag}: {got} vs {want}", arch.name);
            }
        }
    }
}

#[test]
fn latitude_bands_are_disjoint_and_respected() {
    let mut bands: Vec<(f64, f64)> = ARCHETYPES.iter().map(|a| a.lat_band).collect();
    bands.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in bands.windows(2) {
        assert!(w[0].1 < w[1].0, "{w:?}");
    }
    for (id, arch) in ARCHETYPES.iter().enumerate() {
        for seed in 0..200 {
            let (lat, lon) = generate_tile(seed, id, 16).unwrap().spec.latlon;
            assert!(lat >= arch.lat_band.0 && lat < arch.lat_band.1);
            assert!((-180.0..180.0).contains(&lon));
        }
    }
}

#[test]
fn point_counts_are_uniform_over_the_range() {
    let tile = generate_tile(3, 2, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 10_000;
    let mut total = 0;
    for _ in 0..draws {
        let ps = sample_point_prompts(&tile, &mut rng, (10, 50), 2, 50).unwrap();
        assert!((10..=50).contains(&ps.len()));
        total += ps.len();
    }
    let mean = total as f64 / draws as f64;
    assert!((29.5..=30.5).contains(&mean), "mean {mean}");
}

#[test]
fn background_image_scores_zero() {
    let img = ImageGrid::from_vec(16, 16, 3, BACKGROUND_COLOR.repeat(256)).unwrap();
    let tile = generate_tile(5, 0, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ps = sample_point_prompts(&tile, &mut rng, (5, 20), 2, 50).unwrap();
    assert_eq!(fidelity_oracle(&img, &ps, 2.0, 2), 0.0);
    assert_eq!(fidelity_oracle(&img, &PointSet::empty(4), 2.0, 2), 1.0);
}

#[test]
fn three_point_case_matches_hand_count() {
    // 8×8 pixels, stride 2. Water at pixel (6, 1), tree at pixel (0, 7).
    let mut img = ImageGrid::from_vec(8, 8, 3, BACKGROUND_COLOR.repeat(64)).unwrap();
    img.pixel_mut(1, 6).copy_from_slice(&TAG_COLORS[2]);
    img.pixel_mut(7, 0).copy_from_slice(&TAG_COLORS[3]);
    let points = vec![
        // Water pixel sits at token (3, 0.5): distance 1.118 from (2, 0).
        PointQuery { x: 2.0, y: 0.0, tag_id: 2 },
        // Tree pixel at token (0, 3.5): distance 1.5 from (0, 2).
        PointQuery { x: 0.0, y: 2.0, tag_id: 3 },
        // No road anywhere.
        PointQuery { x: 1.0, y: 1.0, tag_id: 1 },
    ];
    let ps = PointSet::new(points, 4).unwrap();
    assert!((fidelity_oracle(&img, &ps, 1.2, 2) - 1.0 / 3.0).abs() < 1e-15);
    assert!((fidelity_oracle(&img, &ps, 1.5, 2) - 2.0 / 3.0).abs() < 1e-15);
    assert!((fidelity_oracle(&img, &ps, 1.1, 2)).abs() < 1e-15);
}

#[test]
fn signature_colors_classify_to_their_tag() {
    assert_eq!(classify_pixel(&BACKGROUND_COLOR), None);
    for (t, c) in TAG_COLORS.iter().enumerate() {
        assert_eq!(classify_pixel(c), Some(t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prompts_from_a_tile_are_satisfied_by_the_tile(seed in 0u64..100_000, arch in 0usize..6, rseed in 0u64..1000) {
        let tile = generate_tile(seed, arch, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(rseed);
        let ps = sample_point_prompts(&tile, &mut rng, (1, 50), 2, 50).unwrap();
        prop_assert_eq!(fidelity_oracle(&tile.image, &ps, 1.0, 2), 1.0);
        for y in 0..16 {
            for x in 0..16 {
                prop_assert_eq!(classify_pixel(tile.image.pixel(y, x)), tile.label(x, y));
            }
        }
    }
}
