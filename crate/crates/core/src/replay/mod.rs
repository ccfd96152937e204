//! Historical replay: executes fixture transactions in order against the
//! cumulative state, keeps the crypto-related ones as seeds, and profiles
//! each function.

pub mod fixture;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::evm::{execute_transaction, keccak256, Address, BlockEnv, EvmError, ExecutionTrace, TransactionEnv, WorldState};
use crate::semantics::{profile_function, FunctionProfile, Observation, TxSemantics};
use crate::taint::{analyze_trace, StorageTaint, TaintAnalysis};

pub use fixture::{Fixture, FixtureError, FixtureTx};

pub const DEFAULT_POOL_CAPACITY: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("transaction {tx_index}: {source}")]
pub struct ReplayError {
    pub tx_index: usize,
    pub source: EvmError,
}

/// A historical transaction with everything needed to re-execute it.
#[derive(Debug, Clone)]
pub struct Seed {
    /// Position in the fixture's transaction list.
    pub index: usize,
    pub tx: TransactionEnv,
    pub pre_state: WorldState,
    pub block: BlockEnv,
    pub trace: Arc<ExecutionTrace>,
    pub selector: [u8; 4],
    /// Slot taint accumulated by the history before this transaction.
    pub pre_storage_taint: StorageTaint,
    pub taint: Option<Arc<TaintAnalysis>>,
    pub semantics: Arc<TxSemantics>,
}

impl Seed {
    pub fn contract(&self) -> Address {
        self.tx.to
    }
}

pub fn selector_of_calldata(data: &[u8]) -> [u8; 4] {
    let mut s = [0u8; 4];
    let n = data.len().min(4);
    s[..n].copy_from_slice(&data[..n]);
    s
}

/// Bounded seed store. Duplicates by (selector, keccak(calldata)) are
/// dropped; overflow evicts the oldest seed of the next selector in
/// round-robin order.
#[derive(Debug, Clone)]
pub struct SeedPool {
    pub seeds: Vec<Seed>,
    pub capacity: usize,
    keys: BTreeSet<([u8; 4], [u8; 32])>,
    last_victim: Option<[u8; 4]>,
}

impl SeedPool {
    pub fn new(capacity: usize) -> Self {
        SeedPool { seeds: Vec::new(), capacity, keys: BTreeSet::new(), last_victim: None }
    }

    fn key(seed: &Seed) -> ([u8; 4], [u8; 32]) {
        (seed.selector, keccak256(&seed.tx.data))
    }

    /// Returns false when the seed duplicates one already pooled.
    pub fn insert(&mut self, seed: Seed) -> bool {
        if self.capacity == 0 || !self.keys.insert(Self::key(&seed)) {
            return false;
        }
        self.seeds.push(seed);
        while self.seeds.len() > self.capacity {
            self.evict();
        }
        true
    }

    fn evict(&mut self) {
        let selectors: BTreeSet<[u8; 4]> = self.seeds.iter().map(|s| s.selector).collect();
        let victim = self
            .last_victim
            .and_then(|last| selectors.range((std::ops::Bound::Excluded(last), std::ops::Bound::Unbounded)).next().copied())
            .or_else(|| selectors.iter().next().copied())
            .expect("pool is non-empty");
        let pos = self.seeds.iter().position(|s| s.selector == victim).expect("victim selector present");
        let removed = self.seeds.remove(pos);
        self.keys.remove(&Self::key(&removed));
        self.last_victim = Some(victim);
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

/// keccak output → input, collected from every observed KECCAK256 step.
#[derive(Debug, Clone, Default)]
pub struct PreimageRegistry {
    map: BTreeMap<[u8; 32], Vec<u8>>,
}

impl PreimageRegistry {
    pub fn record(&mut self, semantics: &TxSemantics) {
        for r in &semantics.records {
            if r.api == crate::evm::CryptoApi::Keccak256 {
                if let Some(out) = r.output_word() {
                    self.map.entry(out).or_insert_with(|| r.input_bytes.clone());
                }
            }
        }
    }

    pub fn get(&self, hash: &[u8; 32]) -> Option<&[u8]> {
        self.map.get(hash).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// True when `address` appears in the preimage of `hash`, directly or
    /// through words that are themselves recorded hashes.
    pub fn preimage_contains(&self, hash: &[u8; 32], address: &Address, max_depth: usize) -> bool {
        let mut frontier = vec![*hash];
        let mut seen = BTreeSet::new();
        for _ in 0..=max_depth {
            let mut next = Vec::new();
            for h in frontier {
                if !seen.insert(h) {
                    continue;
                }
                let Some(pre) = self.map.get(&h) else { continue };
                if pre.windows(20).any(|w| w == address.as_bytes()) {
                    return true;
                }
                for chunk in pre.windows(32) {
                    let w: [u8; 32] = chunk.try_into().expect("32-byte window");
                    if self.map.contains_key(&w) {
                        next.push(w);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        false
    }
}

/// One replayed historical transaction.
#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub index: usize,
    pub tx: TransactionEnv,
    pub success: bool,
    pub semantics: Arc<TxSemantics>,
    pub stubbed_precompiles: Vec<u8>,
    pub taint_error: Option<String>,
}

pub struct ReplayOutcome {
    pub pool: SeedPool,
    pub profiles: BTreeMap<(Address, [u8; 4]), FunctionProfile>,
    pub preimages: PreimageRegistry,
    pub history: Vec<HistoryEntry>,
    pub final_state: WorldState,
    pub final_storage_taint: StorageTaint,
}

/// Replays the fixture history and builds the seed pool and profiles.
pub fn build_seed_pool(fixture: &Fixture, capacity: usize) -> Result<ReplayOutcome, ReplayError> {
    let mut state = fixture.accounts.clone();
    let mut storage_taint = StorageTaint::default();
    let mut pool = SeedPool::new(capacity);
    let mut preimages = PreimageRegistry::default();
    let mut history = Vec::with_capacity(fixture.transactions.len());

    for (i, ftx) in fixture.transactions.iter().enumerate() {
        let tx = &ftx.tx;
        let (post, trace) =
            execute_transaction(&state, &ftx.block, tx).map_err(|source| ReplayError { tx_index: i, source })?;
        let pre_taint = storage_taint.clone();
        let mut next_taint = storage_taint.clone();
        let (taint, taint_error) = match analyze_trace(&trace, i as u32, tx.sender, tx.data.len(), &mut next_taint) {
            Ok(t) => {
                storage_taint = next_taint;
                (Some(Arc::new(t)), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        let selector = selector_of_calldata(&tx.data);
        let function = fixture.abis.get(&tx.to).and_then(|a| a.function(selector));
        let semantics = Arc::new(TxSemantics::analyze(&trace, tx, i as u32, taint.as_deref(), function));
        preimages.record(&semantics);
        history.push(HistoryEntry {
            index: i,
            tx: tx.clone(),
            success: trace.receipt.success,
            semantics: semantics.clone(),
            stubbed_precompiles: trace.stubbed_precompiles.clone(),
            taint_error,
        });
        if semantics.has_crypto() {
            pool.insert(Seed {
                index: i,
                tx: tx.clone(),
                pre_state: state.clone(),
                block: ftx.block.clone(),
                trace: Arc::new(trace),
                selector,
                pre_storage_taint: pre_taint,
                taint,
                semantics,
            });
        }
        state = post;
    }

    let mut groups: BTreeMap<(Address, [u8; 4]), Vec<&HistoryEntry>> = BTreeMap::new();
    for h in &history {
        groups.entry((h.tx.to, selector_of_calldata(&h.tx.data))).or_default().push(h);
    }
    let profiles = groups
        .into_iter()
        .map(|((to, sel), entries)| {
            let obs: Vec<Observation<'_>> = entries
                .iter()
                .map(|h| Observation { tx: &h.tx, tx_index: h.index as u32, semantics: &h.semantics })
                .collect();
            let function = fixture.abis.get(&to).and_then(|a| a.function(sel));
            ((to, sel), profile_function(sel, function, &obs))
        })
        .collect();

    Ok(ReplayOutcome { pool, profiles, preimages, history, final_state: state, final_storage_taint: storage_taint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evm::U256;

    fn dummy_seed(selector: [u8; 4], n: u32) -> Seed {
        let mut data = selector.to_vec();
        data.extend(U256::from(n).to_be_bytes::<32>());
        Seed {
            index: n as usize,
            tx: TransactionEnv::call(Address::from_low_u64(1), Address::from_low_u64(2), data),
            pre_state: WorldState::new(),
            block: BlockEnv::default(),
            trace: Arc::new(ExecutionTrace::default()),
            selector,
            pre_storage_taint: StorageTaint::default(),
            taint: None,
            semantics: Arc::new(TxSemantics::default()),
        }
    }

    #[test]
    fn pool_keeps_newest_of_one_selector() {
        let mut pool = SeedPool::new(500);
        for n in 0..600 {
            pool.insert(dummy_seed([1, 2, 3, 4], n));
        }
        assert_eq!(pool.len(), 500);
        assert_eq!(pool.seeds[0].index, 100);
        assert_eq!(pool.seeds[499].index, 599);
    }

    #[test]
    fn pool_dedupes() {
        let mut pool = SeedPool::new(10);
        assert!(pool.insert(dummy_seed([1, 2, 3, 4], 7)));
        assert!(!pool.insert(dummy_seed([1, 2, 3, 4], 7)));
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn pool_round_robin_across_selectors() {
        let mut pool = SeedPool::new(4);
        for n in 0..4 {
            pool.insert(dummy_seed([0, 0, 0, (n % 2) as u8], n));
        }
        pool.insert(dummy_seed([0, 0, 0, 0], 10));
        pool.insert(dummy_seed([0, 0, 0, 0], 11));
        let idx: Vec<usize> = pool.seeds.iter().map(|s| s.index).collect();
        // first eviction hits selector 0 (seed 0), second selector 1 (seed 1)
        assert_eq!(idx, vec![2, 3, 10, 11]);
    }

    #[test]
    fn registry_transitive_match() {
        let addr = Address::from_low_u64(0xbeef);
        let inner = [vec![7u8; 32], addr.to_padded().to_vec()].concat();
        let h_inner = keccak256(&inner);
        let outer = [b"\x19\x01".to_vec(), h_inner.to_vec(), vec![9u8; 32]].concat();
        let h_outer = keccak256(&outer);
        let mut reg = PreimageRegistry::default();
        reg.map.insert(h_inner, inner);
        reg.map.insert(h_outer, outer);
        assert!(reg.preimage_contains(&h_outer, &addr, 4));
        assert!(!reg.preimage_contains(&h_outer, &Address::from_low_u64(1), 4));
    }
}
