mod common;

use bimflow_core::redundancy::AssociationStats;
use common::criteria::arm_oracle;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ratios_match_direct_counting() {
    let o = arm_oracle();
    assert!(o.pass, "{}", o.detail);
}

proptest! {
    #[test]
    fn wider_windows_never_lose_pairs(seed in any::<u64>(), w in 1usize..8) {
        let corpus = random_arm_corpus(&mut ChaCha8Rng::seed_from_u64(seed), 5, 30);
        let narrow = AssociationStats::count(&corpus, w);
        let wide = AssociationStats::count(&corpus, w + 1);
        for ((x, y), n) in &narrow.pair_counts {
            prop_assert!(wide.pair_count(x, y) >= *n);
        }
    }

    #[test]
    fn confidence_is_a_probability(seed in any::<u64>()) {
        let corpus = random_arm_corpus(&mut ChaCha8Rng::seed_from_u64(seed), 4, 25);
        let stats = AssociationStats::count(&corpus, 10);
        for (x, y) in stats.pair_counts.keys() {
            let c = stats.confidence(x, y).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert!(stats.support_pair(x, y).unwrap() <= stats.support(x).unwrap());
        }
    }

    #[test]
    fn counting_in_parts_equals_counting_at_once(seed in any::<u64>()) {
        let corpus = random_arm_corpus(&mut ChaCha8Rng::seed_from_u64(seed), 6, 20);
        let whole = AssociationStats::count(&corpus, 5);
        let mut a = AssociationStats::count(&corpus[..3], 5);
        a.merge(AssociationStats::count(&corpus[3..], 5));
        prop_assert_eq!(whole, a);
    }
}
