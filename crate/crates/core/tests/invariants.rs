mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use srlstm::refine::RefinementConfig;

use common::{random_instance, refine_records, refinement_store};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn attention_sums_to_one_and_gates_stay_open_interval(
        seed in any::<u64>(),
        n in 2usize..8,
        iterations in 1usize..4,
    ) {
        let config = RefinementConfig { iterations, ..RefinementConfig::default() };
        let store = refinement_store(&config, iterations, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17));
        let inst = random_instance(n, &mut rng);
        let mut sums: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for m in refine_records(&store, &config, &inst) {
            *sums.entry((m.layer, m.i)).or_default() += m.alpha;
            for &g in m.gate.as_ref().unwrap() {
                prop_assert!(g > 0.0 && g < 1.0, "gate {}", g);
            }
        }
        for s in sums.values() {
            prop_assert!((s - 1.0).abs() <= 1e-9, "sum {}", s);
        }
    }
}
