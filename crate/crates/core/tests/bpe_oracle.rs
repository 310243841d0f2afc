mod common;

use bimflow_core::augment::bpe::learn_workflows;
use common::criteria::bpe_oracle;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn merges_and_round_trips() {
    let o = bpe_oracle();
    assert!(o.pass, "{}", o.detail);
}

proptest! {
    #[test]
    fn decode_inverts_encode(seed in any::<u64>(), merges in 0usize..20) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let corpus = random_token_corpus(&mut r, 5, 10, 30);
        let model = learn_workflows(&corpus, merges);
        prop_assert!(model.merges.len() <= merges);
        for seq in &corpus {
            let enc = model.encode(seq);
            prop_assert!(enc.len() <= seq.len());
            prop_assert_eq!(&model.decode(&enc), seq);
        }
    }

    #[test]
    fn more_merges_never_lengthen_the_corpus(seed in any::<u64>(), merges in 0usize..15) {
        let corpus = random_token_corpus(&mut ChaCha8Rng::seed_from_u64(seed), 4, 8, 25);
        let len = |n: usize| {
            let m = learn_workflows(&corpus, n);
            corpus.iter().map(|s| m.encode(s).len()).sum::<usize>()
        };
        prop_assert!(len(merges + 1) <= len(merges));
    }
}
