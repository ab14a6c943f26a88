use geodit::flow::{interpolate, velocity_loss, CosineSchedule, FlowSchedule, LinearSchedule};
use geodit::image::ImageGrid;
use proptest::prelude::*;

fn grid(values: Vec<f64>) -> ImageGrid {
    let n = values.len();
    ImageGrid::from_vec(1, n, 1, values).unwrap()
}

fn schedules() -> [&'static dyn FlowSchedule; 2] {
    [&LinearSchedule, &CosineSchedule]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sample_satisfies_both_identities(
        xs in prop::collection::vec(-1.0f64..1.0, 6),
        es in prop::collection::vec(-3.0f64..3.0, 6),
        t in 0.0f64..=1.0,
    ) {
        for sched in schedules() {
            let s = interpolate(&grid(xs.clone()), &grid(es.clone()), t, sched).unwrap();
            for i in 0..6 {
                let want_x = sched.alpha(t) * xs[i] + sched.sigma(t) * es[i];
                let want_v = sched.dalpha(t) * xs[i] + sched.dsigma(t) * es[i];
                prop_assert_eq!(s.x_t.data()[i], want_x);
                prop_assert_eq!(s.v_target.data()[i], want_v);
            }
        }
    }

    #[test]
    fn target_is_the_time_derivative_of_the_path(
        xs in prop::collection::vec(-1.0f64..1.0, 4),
        es in prop::collection::vec(-3.0f64..3.0, 4),
        t in 0.01f64..0.99,
    ) {
        let h = 1e-5;
        for sched in schedules() {
            let (x, e) = (grid(xs.clone()), grid(es.clone()));
            let s = interpolate(&x, &e, t, sched).unwrap();
            let hi = interpolate(&x, &e, t + h, sched).unwrap().x_t;
            let lo = interpolate(&x, &e, t - h, sched).unwrap().x_t;
            for i in 0..4 {
                let fd = (hi.data()[i] - lo.data()[i]) / (2.0 * h);
                let v = s.v_target.data()[i];
                prop_assert!((fd - v).abs() <= 1e-4 * v.abs().max(1e-6) + 1e-9, "fd {} vs {}", fd, v);
            }
        }
    }

    #[test]
    fn linear_target_is_noise_minus_data(
        xs in prop::collection::vec(-1.0f64..1.0, 5),
        es in prop::collection::vec(-3.0f64..3.0, 5),
        t in 0.0f64..=1.0,
    ) {
        let s = interpolate(&grid(xs.clone()), &grid(es.clone()), t, &LinearSchedule).unwrap();
        for i in 0..5 {
            prop_assert_eq!(s.v_target.data()[i], es[i] - xs[i]);
        }
    }

    #[test]
    fn loss_is_symmetric_and_zero_only_on_equality(
        a in prop::collection::vec(-2.0f64..2.0, 4),
        b in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let zero = grid(vec![0.0; 4]);
        let as_target = |v: &[f64]| interpolate(&zero, &grid(v.to_vec()), 1.0, &LinearSchedule).unwrap();
        let ab = velocity_loss(&grid(a.clone()), &as_target(&b)).unwrap();
        let ba = velocity_loss(&grid(b.clone()), &as_target(&a)).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(ab == 0.0, a == b);
        prop_assert_eq!(velocity_loss(&grid(a.clone()), &as_target(&a)).unwrap(), 0.0);
    }
}
