use geodit::image::ImageGrid;
use geodit::metrics::{frechet_distance, ssim};
use geodit::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal_set(n: usize, mean: &[f64], std: &[f64], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(n, mean.len(), |_, c| mean[c] + std[c] * rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn frechet_matches_the_gaussian_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let a = normal_set(n, &[0.0; 4], &[1.0; 4], &mut rng);
    let shifted = normal_set(n, &[1.0, 0.0, 0.0, 0.0], &[1.0; 4], &mut rng);
    let got = frechet_distance(&a, &shifted).unwrap();
    assert!((got - 1.0).abs() < 0.05, "shifted mean: {got}");
    // Equal means, diagonal scales s: the distance is Σ(1 − s)².
    let s = [1.0, 2.0, 0.5, 1.5];
    let scaled = normal_set(n, &[0.0; 4], &s, &mut rng);
    let expect: f64 = s.iter().map(|v| (1.0 - v) * (1.0 - v)).sum();
    let got = frechet_distance(&a, &scaled).unwrap();
    assert!((got - expect).abs() < 0.05, "scaled: {got} vs {expect}");
}

#[test]
fn frechet_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = normal_set(400, &[0.0; 2], &[1.0, 3.0], &mut rng);
    let b = normal_set(400, &[1.0, 0.0], &[2.0, 0.5], &mut rng);
    let (c, s) = (0.6f64, 0.8f64);
    let rot = Tensor::from_vec(2, 2, vec![c, -s, s, c]);
    let base = frechet_distance(&a, &b).unwrap();
    let turned = frechet_distance(&a.matmul(&rot), &b.matmul(&rot)).unwrap();
    assert!((base - turned).abs() < 1e-8 * base, "{base} vs {turned}");
}

fn image(values: &[f64], side: usize) -> ImageGrid {
    ImageGrid::from_vec(side, side, 1, values.to_vec()).unwrap()
}

#[test]
fn checkerboard_against_its_inverse_is_anticorrelated() {
    let board: Vec<f64> = (0..100).map(|i| if (i % 10 + i / 10) % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let inverse: Vec<f64> = board.iter().map(|v| -v).collect();
    assert!(ssim(&image(&board, 10), &image(&inverse, 10)).unwrap() < 0.0);
    assert_eq!(ssim(&image(&board, 10), &image(&board, 10)).unwrap(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_is_symmetric_and_bounded(a in prop::collection::vec(-1.0f64..1.0, 64), b in prop::collection::vec(-1.0f64..1.0, 64)) {
        let (x, y) = (image(&a, 8), image(&b, 8));
        let xy = ssim(&x, &y).unwrap();
        prop_assert!((xy - ssim(&y, &x).unwrap()).abs() < 1e-15);
        prop_assert!((-1.0..=1.0).contains(&xy));
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in 0u64..10_000, shift in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normal_set(40, &[0.0; 3], &[1.0; 3], &mut rng);
        let b = normal_set(30, &[shift, 0.0, 0.0], &[1.0, 0.5, 2.0], &mut rng);
        let ab = frechet_distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-8 * ab.max(1.0));
    }
}
