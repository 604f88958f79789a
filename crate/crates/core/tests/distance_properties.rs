use pedflow::initial::PhasePoint;
use pedflow::measures::{bl_lower, bl_upper, empirical_lipschitz, truncated_w1, EmpiricalMeasure};
use proptest::prelude::*;

fn cloud(len: usize) -> impl Strategy<Value = Vec<PhasePoint>> {
    prop::collection::vec(prop::array::uniform4(-2.0f64..2.0), len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lower_never_exceeds_upper(a in cloud(12), b in cloud(12), seed in any::<u64>()) {
        let mu = EmpiricalMeasure::uniform(a).unwrap();
        let nu = EmpiricalMeasure::uniform(b).unwrap();
        let lo = bl_lower(&mu, &nu, 64, seed).unwrap();
        let up = bl_upper(&mu, &nu, 12, 2, seed).unwrap();
        prop_assert!(up.exact);
        prop_assert!(lo.value <= up.value + 1e-9, "{} > {}", lo.value, up.value);
    }

    #[test]
    fn witness_is_admissible_on_the_supports(a in cloud(10), b in cloud(10), seed in any::<u64>()) {
        let mu = EmpiricalMeasure::uniform(a.clone()).unwrap();
        let nu = EmpiricalMeasure::uniform(b.clone()).unwrap();
        let lo = bl_lower(&mu, &nu, 32, seed).unwrap();
        let pts: Vec<PhasePoint> = a.into_iter().chain(b).collect();
        let sup = pts.iter().map(|z| lo.witness.eval(z).abs()).fold(0.0, f64::max);
        prop_assert!(sup <= 1.0 + 1e-9);
        prop_assert!(empirical_lipschitz(&lo.witness, &pts) <= 1.0 + 1e-9);
    }

    #[test]
    fn w1_is_a_metric(a in cloud(8), b in cloud(8), c in cloud(8)) {
        let (ab, ba) = (truncated_w1(&a, &b), truncated_w1(&b, &a));
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ab <= truncated_w1(&a, &c) + truncated_w1(&c, &b) + 1e-12);
        prop_assert!(ab <= 2.0);
        let mut shuffled = a.clone();
        shuffled.reverse();
        prop_assert!(truncated_w1(&a, &shuffled) <= 1e-12);
    }

    #[test]
    fn w1_vanishes_only_on_equal_supports(a in cloud(6), shift in 1e-3f64..1.0) {
        let mut b = a.clone();
        b[0][2] += shift;
        prop_assert!(truncated_w1(&a, &b) > 0.0);
    }
}
