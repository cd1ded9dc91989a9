use proptest::prelude::*;

use mrs_core::envs::{env_reset, EnvConfig};
use mrs_core::hierarchy::{cosine_max, lambda_returns, lambda_returns_with_continues, LambdaReturnConfig};
use mrs_core::skills::{Horizon, ResolutionSet};

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

proptest! {
    #[test]
    fn cosine_max_is_symmetric_and_bounded(a in vector(6), b in vector(6)) {
        let ab = cosine_max(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab.to_bits(), cosine_max(&b, &a).to_bits());
    }

    #[test]
    fn cosine_max_penalizes_scale(a in vector(4), s in 1.0..20.0f64) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3));
        let scaled: Vec<f64> = a.iter().map(|x| s * x).collect();
        prop_assert!((cosine_max(&a, &scaled) - 1.0 / s).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_is_the_discounted_monte_carlo_return(r in vector(12), v in vector(13), gamma in 0.5..1.0f64) {
        let cfg = LambdaReturnConfig { lambda: 1.0, gamma };
        let g = lambda_returns(&r, &v, &cfg).unwrap();
        let mut expect = v[12];
        for t in (0..12).rev() {
            expect = r[t] + gamma * expect;
            prop_assert!((g[t] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn lambda_zero_is_one_step_bootstrap(r in vector(8), v in vector(9), gamma in 0.5..1.0f64) {
        let cfg = LambdaReturnConfig { lambda: 0.0, gamma };
        let g = lambda_returns(&r, &v, &cfg).unwrap();
        for t in 0..8 {
            prop_assert!((g[t] - (r[t] + gamma * v[t + 1])).abs() < 1e-12);
        }
    }

    #[test]
    fn all_ones_continues_match_the_plain_recursion(r in vector(10), v in vector(11), lambda in 0.0..=1.0f64) {
        let cfg = LambdaReturnConfig { lambda, gamma: 0.99 };
        let plain = lambda_returns(&r, &v, &cfg).unwrap();
        let masked = lambda_returns_with_continues(&r, &v, &[1.0; 10], &cfg).unwrap();
        prop_assert_eq!(plain, masked);
    }

    #[test]
    fn a_terminal_cuts_off_everything_after_it(r in vector(6), v in vector(7), cut in 0usize..6) {
        let cfg = LambdaReturnConfig::default();
        let mut c = vec![1.0; 6];
        c[cut] = 0.0;
        let g = lambda_returns_with_continues(&r, &v, &c, &cfg).unwrap();
        prop_assert_eq!(g[cut], r[cut]);
    }

    #[test]
    fn resolution_sets_round_trip_through_text(mult in prop::collection::btree_set(1usize..12, 1..5), inf in any::<bool>()) {
        let mut finite: Vec<usize> = mult.into_iter().map(|m| 8 * m).collect();
        finite.reverse();
        let mut text: Vec<String> = finite.iter().map(usize::to_string).collect();
        if inf {
            text.push("inf".into());
        }
        let set = ResolutionSet::parse(&text.join(","), 8).unwrap();
        prop_assert_eq!(set.len(), text.len());
        prop_assert_eq!(set.infinite_index().is_some(), inf);
        prop_assert_eq!(set.get(0), Horizon::Finite(finite[0]));
        let shown: Vec<String> = set.horizons().iter().map(|h| h.to_string()).collect();
        prop_assert_eq!(shown, text);
    }

    #[test]
    fn env_resets_are_reproducible(env in prop::sample::select(vec!["corridor", "maze"]), seed in any::<u64>()) {
        let cfg = EnvConfig::new(env);
        let (mut a, oa) = env_reset(&cfg, seed).unwrap();
        let (mut b, ob) = env_reset(&cfg, seed).unwrap();
        prop_assert_eq!(oa, ob);
        for i in 0..20 {
            let act = [(i as f64 * 0.7).sin(), (i as f64 * 0.3).cos()];
            prop_assert_eq!(a.step(&act).unwrap(), b.step(&act).unwrap());
        }
    }
}

#[test]
fn misordered_or_misaligned_resolutions_are_rejected() {
    assert!(ResolutionSet::parse("8,16", 8).is_err());
    assert!(ResolutionSet::parse("12,inf", 8).is_err());
    assert!(ResolutionSet::parse("inf,8", 8).is_err());
}
