mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::Instance;
use unikw_core::{beam_search, permutation_decode, DecodeConfig, Order};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn full_beam_is_exhaustive(seed in any::<u64>()) {
        let inst = Instance::random(&mut ChaCha8Rng::seed_from_u64(seed), 40, 4);
        let want = inst.brute_force();
        let got = beam_search(&inst.table, &inst.forward, inst.keywords.len(), f64::NEG_INFINITY).unwrap();
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(g.keyword, w.0);
            prop_assert!((g.score - w.1).abs() < 1e-9);
        }
    }

    #[test]
    fn results_are_sorted_catalog_members(seed in any::<u64>(), beam in 1usize..20) {
        let inst = Instance::random(&mut ChaCha8Rng::seed_from_u64(seed), 40, 4);
        for trie in [&inst.forward, &inst.reversed] {
            let got = beam_search(&inst.table, trie, beam, f64::NEG_INFINITY).unwrap();
            prop_assert!(got.len() <= beam);
            prop_assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
            let ids: BTreeSet<_> = got.iter().map(|s| s.keyword).collect();
            prop_assert_eq!(ids.len(), got.len());
            for s in &got {
                prop_assert!((s.score - inst.score(s.keyword.index())).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn union_is_at_least_as_good_as_either_order(seed in any::<u64>(), beam in 1usize..6) {
        let inst = Instance::random(&mut ChaCha8Rng::seed_from_u64(seed), 40, 4);
        let both = permutation_decode(&inst.table, &inst.forward, Some(&inst.reversed), &DecodeConfig::with_beam(beam)).unwrap();
        let l2r = beam_search(&inst.table, &inst.forward, beam, f64::NEG_INFINITY).unwrap();
        let r2l = beam_search(&inst.table, &inst.reversed, beam, f64::NEG_INFINITY).unwrap();
        prop_assert!(both.len() <= beam);
        let best = l2r[0].score.max(r2l[0].score);
        prop_assert!((both[0].score - best).abs() < 1e-9);
    }
}

#[test]
fn single_order_config_matches_beam_search() {
    let inst = Instance::random(&mut ChaCha8Rng::seed_from_u64(9), 50, 4);
    let cfg = DecodeConfig {
        orders: vec![Order::R2L],
        ..DecodeConfig::with_beam(7)
    };
    let a = permutation_decode(&inst.table, &inst.forward, Some(&inst.reversed), &cfg).unwrap();
    let b = beam_search(&inst.table, &inst.reversed, 7, f64::NEG_INFINITY).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_reversed_trie_is_an_error() {
    let inst = Instance::random(&mut ChaCha8Rng::seed_from_u64(10), 10, 3);
    assert!(permutation_decode(&inst.table, &inst.forward, None, &DecodeConfig::default()).is_err());
    assert!(permutation_decode(&inst.table, &inst.reversed, Some(&inst.reversed), &DecodeConfig::default()).is_err());
}
