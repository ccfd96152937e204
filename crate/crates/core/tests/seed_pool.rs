use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use cdfuzz_core::evm::{Address, BlockEnv, ExecutionTrace, TransactionEnv, WorldState, U256};
use cdfuzz_core::replay::{Seed, SeedPool};
use cdfuzz_core::semantics::TxSemantics;
use cdfuzz_core::taint::StorageTaint;
use proptest::prelude::*;

fn seed(index: usize, selector: u8, arg: u8) -> Seed {
    let sel = [selector, 0, 0, 1];
    let mut data = sel.to_vec();
    data.extend(U256::from(arg).to_be_bytes::<32>());
    Seed {
        index,
        tx: TransactionEnv::call(Address::from_low_u64(1), Address::from_low_u64(2), data),
        pre_state: WorldState::new(),
        block: BlockEnv::default(),
        trace: Arc::new(ExecutionTrace::default()),
        selector: sel,
        pre_storage_taint: StorageTaint::default(),
        taint: None,
        semantics: Arc::new(TxSemantics::default()),
    }
}

proptest! {
    #[test]
    fn pool_invariants(capacity in 0usize..12, items in prop::collection::vec((0u8..4, 0u8..6), 0..80)) {
        let mut pool = SeedPool::new(capacity);
        // accepted insertions per selector, in order
        let mut accepted: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (i, &(sel, arg)) in items.iter().enumerate() {
            let present = pool.seeds.iter().any(|s| s.selector[0] == sel && s.tx.data[35] == arg);
            let inserted = pool.insert(seed(i, sel, arg));
            prop_assert_eq!(inserted, !present && capacity > 0);
            if inserted {
                accepted.entry(sel).or_default().push(i);
            }
            prop_assert!(pool.len() <= capacity);

            let keys: BTreeSet<_> = pool.seeds.iter().map(|s| s.tx.data.clone()).collect();
            prop_assert_eq!(keys.len(), pool.len());
            let order: Vec<usize> = pool.seeds.iter().map(|s| s.index).collect();
            prop_assert!(order.windows(2).all(|w| w[0] < w[1]));

            // each selector keeps a suffix of its accepted seeds: oldest go first
            for (sel, acc) in &accepted {
                let kept: Vec<usize> = pool.seeds.iter().filter(|s| s.selector[0] == *sel).map(|s| s.index).collect();
                prop_assert_eq!(&acc[acc.len() - kept.len()..], kept.as_slice());
            }
        }
        let distinct: BTreeSet<_> = items.iter().collect();
        if distinct.len() <= capacity {
            prop_assert_eq!(pool.len(), distinct.len());
        }
    }
}

#[test]
fn eviction_rotates_over_selectors() {
    let mut pool = SeedPool::new(4);
    for (i, sel) in [1u8, 1, 2, 2].into_iter().enumerate() {
        pool.insert(seed(i, sel, i as u8));
    }
    pool.insert(seed(4, 3, 0));
    pool.insert(seed(5, 3, 1));
    let per: BTreeMap<u8, usize> = pool.seeds.iter().fold(BTreeMap::new(), |mut m, s| {
        *m.entry(s.selector[0]).or_default() += 1;
        m
    });
    assert_eq!(per, BTreeMap::from([(1, 1), (2, 1), (3, 2)]));
}
