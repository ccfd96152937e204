//! Crypto semantics recovered from traces: which crypto APIs ran, which
//! calldata parameters fed them, and where Merkle proofs were walked.

pub mod abi;

use std::collections::{BTreeMap, BTreeSet};

use crate::evm::opcode::{SLOAD, SSTORE};
use crate::evm::{Address, CryptoApi, ExecutionTrace, TransactionEnv, U256};
use crate::taint::{CryptoCallId, TaintAnalysis, TaintSet};

use abi::{AbiFunction, Decoded};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CryptoCallRecord {
    pub call_id: CryptoCallId,
    pub step_index: usize,
    pub api: CryptoApi,
    /// Storage-owning contract of the frame that made the call.
    pub caller_contract: Address,
    pub code_address: Address,
    pub pc: usize,
    pub input_bytes: Vec<u8>,
    pub output_bytes: Vec<u8>,
    /// Per-byte taint of `input_bytes`; empty when taint was unavailable.
    pub input_taint: Vec<TaintSet>,
    pub output_taint: TaintSet,
    pub success: bool,
}

impl CryptoCallRecord {
    pub fn taint_of(&self, range: std::ops::Range<usize>) -> TaintSet {
        TaintSet::union_all(range.filter_map(|i| self.input_taint.get(i)))
    }

    pub fn output_word(&self) -> Option<[u8; 32]> {
        self.output_bytes.as_slice().try_into().ok()
    }
}

/// One record per KECCAK256 step and per call into a crypto precompile, in
/// execution order. ECRECOVER inputs are padded or truncated to 128 bytes.
pub fn extract_crypto_calls(trace: &ExecutionTrace, tx_index: u32, taint: Option<&TaintAnalysis>) -> Vec<CryptoCallRecord> {
    let mut out = Vec::new();
    for (seq, idx) in trace.crypto_step_indices().into_iter().enumerate() {
        let step = &trace.steps[idx];
        let api = step.crypto_api().expect("crypto step");
        let (mut input, output, success) = match &step.call {
            Some(call) => {
                let input = step.memory_reads.first().map(|m| m.data.clone()).unwrap_or_default();
                (input, call.return_data.clone(), call.success)
            }
            None => {
                let input = step.memory_reads.first().map(|m| m.data.clone()).unwrap_or_default();
                let out = step.output().map(|w| w.to_be_bytes::<32>().to_vec()).unwrap_or_default();
                (input, out, true)
            }
        };
        let sink = taint.and_then(|t| t.sinks.crypto.iter().find(|c| c.step_index == idx));
        let mut input_taint = sink.map(|s| s.input.clone()).unwrap_or_default();
        if api == CryptoApi::Ecrecover {
            input.resize(128, 0);
            if sink.is_some() {
                input_taint.resize(128, TaintSet::empty());
            }
        }
        out.push(CryptoCallRecord {
            call_id: CryptoCallId { tx: tx_index, seq: seq as u32 },
            step_index: idx,
            api,
            caller_contract: step.context_address,
            code_address: step.code_address,
            pc: step.pc,
            input_bytes: input,
            output_bytes: output,
            input_taint,
            output_taint: sink.map(|s| s.output.clone()).unwrap_or_default(),
            success,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    HashSource,
    V,
    R,
    S,
    MerkleElement,
    MerkleLeaf,
    HashInput,
}

impl ParamRole {
    pub fn is_signature(self) -> bool {
        matches!(self, ParamRole::HashSource | ParamRole::V | ParamRole::R | ParamRole::S)
    }

    pub fn is_merkle(self) -> bool {
        matches!(self, ParamRole::MerkleElement | ParamRole::MerkleLeaf)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureUse {
    pub record: CryptoCallRecord,
    pub hash: [u8; 32],
    pub v: U256,
    pub r: U256,
    pub s: U256,
    pub recovered: Address,
    pub param_roles: BTreeMap<usize, BTreeSet<ParamRole>>,
}

impl SignatureUse {
    pub fn from_record(record: &CryptoCallRecord, layout: Option<&[Decoded]>) -> Option<SignatureUse> {
        if record.api != CryptoApi::Ecrecover {
            return None;
        }
        let b = &record.input_bytes;
        let word = |i: usize| U256::from_be_slice(&b[i * 32..i * 32 + 32]);
        let recovered = if record.output_bytes.len() == 32 {
            Address::from_slice(&record.output_bytes[12..])
        } else {
            Address::ZERO
        };
        let mut param_roles: BTreeMap<usize, BTreeSet<ParamRole>> = BTreeMap::new();
        if let Some(layout) = layout {
            let roles = [ParamRole::HashSource, ParamRole::V, ParamRole::R, ParamRole::S];
            for (i, role) in roles.into_iter().enumerate() {
                let offsets = record.taint_of(i * 32..i * 32 + 32).calldata_offsets(record.call_id.tx);
                for p in params_touching(layout, &offsets) {
                    param_roles.entry(p).or_default().insert(role);
                }
            }
        }
        Some(SignatureUse {
            hash: b[..32].try_into().expect("padded input"),
            v: word(1),
            r: word(2),
            s: word(3),
            recovered,
            record: record.clone(),
            param_roles,
        })
    }

    pub fn hash_taint(&self) -> TaintSet {
        self.record.taint_of(0..32)
    }

    pub fn s_taint(&self) -> TaintSet {
        self.record.taint_of(96..128)
    }
}

/// Top-level parameter indices whose encoding covers any of `offsets`.
pub fn params_touching(layout: &[Decoded], offsets: &BTreeSet<u32>) -> BTreeSet<usize> {
    layout
        .iter()
        .enumerate()
        .filter(|(_, d)| offsets.iter().any(|o| d.contains(*o as usize)))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleProofUse {
    pub chain: Vec<CryptoCallRecord>,
    /// Output of the last link.
    pub root: [u8; 32],
    /// Leaf preimage when a leaf hash feeds the chain, else the leaf word.
    pub leaf: Vec<u8>,
    pub leaf_word: [u8; 32],
    pub leaf_hash: Option<CryptoCallRecord>,
    pub proof_elements: Vec<[u8; 32]>,
    pub element_taints: Vec<TaintSet>,
    pub leaf_taint: TaintSet,
}

impl MerkleProofUse {
    /// Recomputes the root from the leaf word and proof elements alone,
    /// trying both concatenation orders at each level.
    pub fn reconstructs_root(&self, hash: impl Fn(&[u8]) -> [u8; 32]) -> bool {
        fn walk(cur: [u8; 32], rest: &[[u8; 32]], root: &[u8; 32], hash: &dyn Fn(&[u8]) -> [u8; 32]) -> bool {
            match rest.split_first() {
                None => cur == *root,
                Some((e, tail)) => {
                    walk(hash(&[cur.as_slice(), e.as_slice()].concat()), tail, root, hash)
                        || walk(hash(&[e.as_slice(), cur.as_slice()].concat()), tail, root, hash)
                }
            }
        }
        self.proof_elements.len() <= 24 && walk(self.leaf_word, &self.proof_elements, &self.root, &hash)
    }
}

fn halves(r: &CryptoCallRecord) -> ([u8; 32], [u8; 32]) {
    (r.input_bytes[..32].try_into().expect("64 bytes"), r.input_bytes[32..].try_into().expect("64 bytes"))
}

fn min_offset(t: &TaintSet) -> Option<u32> {
    t.iter()
        .filter_map(|l| match l {
            crate::taint::TaintLabel::CalldataSlot { offset, .. } => Some(*offset),
            _ => None,
        })
        .min()
}

/// Finds maximal hash chains where each 64-byte input is `prev‖element` or
/// `element‖prev` with a calldata-derived element. Chains whose outputs are
/// used as storage keys are nested mapping lookups and are skipped.
pub fn detect_merkle_verifications(records: &[CryptoCallRecord], trace: &ExecutionTrace) -> Vec<MerkleProofUse> {
    let storage_keys: BTreeSet<U256> =
        trace.steps.iter().filter(|s| s.opcode == SLOAD || s.opcode == SSTORE).map(|s| s.input(0)).collect();
    let hashes: Vec<&CryptoCallRecord> = records
        .iter()
        .filter(|r| matches!(r.api, CryptoApi::Keccak256 | CryptoApi::Sha256) && r.success && r.output_bytes.len() == 32)
        .collect();
    let node = |r: &CryptoCallRecord| r.input_bytes.len() == 64 && r.input_taint.len() == 64;

    let mut used = vec![false; hashes.len()];
    let mut out = Vec::new();
    for i in 0..hashes.len() {
        if used[i] || !node(hashes[i]) {
            continue;
        }
        let first = hashes[i];
        let (a, b) = halves(first);
        let (ta, tb) = (first.taint_of(0..32), first.taint_of(32..64));

        // leaf hash: the latest earlier record whose output is one half
        let leaf_hash = (0..i).rev().find_map(|j| {
            let o = hashes[j].output_word()?;
            if o == a && tb.has_calldata() {
                Some((j, false))
            } else if o == b && ta.has_calldata() {
                Some((j, true))
            } else {
                None
            }
        });

        // walk forward through linked nodes
        let mut chain = vec![i];
        let mut elements: Vec<([u8; 32], TaintSet)> = Vec::new();
        let mut cur = first.output_word().expect("32-byte output");
        for k in i + 1..hashes.len() {
            if used[k] || !node(hashes[k]) {
                continue;
            }
            let (x, y) = halves(hashes[k]);
            let (tx, ty) = (hashes[k].taint_of(0..32), hashes[k].taint_of(32..64));
            let elem = if x == cur && ty.has_calldata() {
                Some((y, ty))
            } else if y == cur && tx.has_calldata() {
                Some((x, tx))
            } else {
                None
            };
            if let Some(e) = elem {
                elements.push(e);
                chain.push(k);
                cur = hashes[k].output_word().expect("32-byte output");
            }
        }

        // which half of the first node is the element
        let first_elem_is_b = match leaf_hash {
            Some((_, leaf_is_b)) => Some(!leaf_is_b),
            None => {
                let next = elements.first().and_then(|(_, t)| min_offset(t));
                match (min_offset(&ta), min_offset(&tb), next) {
                    (Some(oa), _, Some(n)) if oa + 32 == n => Some(false),
                    (_, Some(ob), Some(n)) if ob + 32 == n => Some(true),
                    (Some(oa), Some(ob), _) => Some(ob > oa),
                    (Some(_), None, _) => Some(false),
                    (None, Some(_), _) => Some(true),
                    (None, None, _) => None,
                }
            }
        };
        let Some(elem_is_b) = first_elem_is_b else { continue };
        if chain.len() < 2 && leaf_hash.is_none() {
            continue;
        }
        if chain.iter().any(|&c| storage_keys.contains(&U256::from_be_bytes(hashes[c].output_word().expect("word")))) {
            continue;
        }
        let (leaf_word, leaf_taint, e0, te0) = if elem_is_b { (a, ta, b, tb) } else { (b, tb, a, ta) };
        elements.insert(0, (e0, te0));
        for &c in &chain {
            used[c] = true;
        }
        let leaf_hash = leaf_hash.map(|(j, _)| hashes[j].clone());
        out.push(MerkleProofUse {
            chain: chain.iter().map(|&c| hashes[c].clone()).collect(),
            root: cur,
            leaf: leaf_hash.as_ref().map(|h| h.input_bytes.clone()).unwrap_or_else(|| leaf_word.to_vec()),
            leaf_word,
            leaf_hash,
            proof_elements: elements.iter().map(|(e, _)| *e).collect(),
            element_taints: elements.into_iter().map(|(_, t)| t).collect(),
            leaf_taint,
        });
    }
    out
}

/// Per-transaction semantic summary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TxSemantics {
    pub records: Vec<CryptoCallRecord>,
    pub signatures: Vec<SignatureUse>,
    pub merkle: Vec<MerkleProofUse>,
    /// Decoded top-level arguments, when the ABI matched.
    pub layout: Option<Vec<Decoded>>,
}

impl TxSemantics {
    pub fn analyze(
        trace: &ExecutionTrace,
        tx: &TransactionEnv,
        tx_index: u32,
        taint: Option<&TaintAnalysis>,
        function: Option<&AbiFunction>,
    ) -> TxSemantics {
        let records = extract_crypto_calls(trace, tx_index, taint);
        let layout = function.and_then(|f| f.decode_input(&tx.data).ok());
        let signatures = records.iter().filter_map(|r| SignatureUse::from_record(r, layout.as_deref())).collect();
        let merkle = detect_merkle_verifications(&records, trace);
        TxSemantics { records, signatures, merkle, layout }
    }

    pub fn has_crypto(&self) -> bool {
        !self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionProfile {
    pub selector: [u8; 4],
    pub function: Option<AbiFunction>,
    /// True when some calldata did not decode under the ABI (or no ABI entry
    /// exists); roles are then incomplete.
    pub partial: bool,
    pub crypto_apis_used: BTreeSet<CryptoApi>,
    pub signature_uses: Vec<SignatureUse>,
    pub merkle_uses: Vec<MerkleProofUse>,
    pub param_roles: BTreeMap<usize, BTreeSet<ParamRole>>,
    pub historical_senders: BTreeSet<Address>,
    pub historical_calls: Vec<Vec<u8>>,
    pub historical_values: Vec<U256>,
}

impl FunctionProfile {
    pub fn params_with(&self, pred: impl Fn(ParamRole) -> bool) -> BTreeSet<usize> {
        self.param_roles.iter().filter(|(_, rs)| rs.iter().any(|r| pred(*r))).map(|(i, _)| *i).collect()
    }

    pub fn is_crypto_related(&self) -> bool {
        !self.crypto_apis_used.is_empty()
    }
}

/// One historical transaction as seen by the profiler.
pub struct Observation<'a> {
    pub tx: &'a TransactionEnv,
    pub tx_index: u32,
    pub semantics: &'a TxSemantics,
}

/// Aggregates roles and history over every observed call of one selector.
pub fn profile_function(selector: [u8; 4], function: Option<&AbiFunction>, observations: &[Observation<'_>]) -> FunctionProfile {
    let mut p = FunctionProfile {
        selector,
        function: function.cloned(),
        partial: function.is_none(),
        crypto_apis_used: BTreeSet::new(),
        signature_uses: Vec::new(),
        merkle_uses: Vec::new(),
        param_roles: BTreeMap::new(),
        historical_senders: BTreeSet::new(),
        historical_calls: Vec::new(),
        historical_values: Vec::new(),
    };
    for obs in observations {
        let sem = obs.semantics;
        p.historical_senders.insert(obs.tx.sender);
        p.historical_calls.push(obs.tx.data.clone());
        p.historical_values.push(obs.tx.value);
        p.crypto_apis_used.extend(sem.records.iter().map(|r| r.api));
        p.signature_uses.extend(sem.signatures.iter().cloned());
        p.merkle_uses.extend(sem.merkle.iter().cloned());
        let Some(layout) = sem.layout.as_deref() else {
            p.partial = true;
            continue;
        };
        for sig in &sem.signatures {
            for (i, roles) in &sig.param_roles {
                p.param_roles.entry(*i).or_default().extend(roles.iter().copied());
            }
        }
        let mut add = |taint: &TaintSet, role: ParamRole| {
            for i in params_touching(layout, &taint.calldata_offsets(obs.tx_index)) {
                p.param_roles.entry(i).or_default().insert(role);
            }
        };
        for m in &sem.merkle {
            for t in &m.element_taints {
                add(t, ParamRole::MerkleElement);
            }
            add(&m.leaf_taint, ParamRole::MerkleLeaf);
        }
        for r in sem.records.iter().filter(|r| r.api.is_hash()) {
            add(&TaintSet::union_all(r.input_taint.iter()), ParamRole::HashInput);
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evm::{execute_transaction, keccak256, Account, BlockEnv, WorldState};
    use crate::taint::{analyze_trace, StorageTaint};

    fn run(code: &str, data: Vec<u8>) -> (ExecutionTrace, TxSemantics) {
        let mut world = WorldState::new();
        let to = Address::from_low_u64(0x1000);
        world.insert(to, Account::with_code(hex::decode(code).unwrap()));
        let sender = Address::from_low_u64(0xaa);
        let tx = TransactionEnv::call(sender, to, data.clone());
        let (_, trace) = execute_transaction(&world, &BlockEnv::default(), &tx).unwrap();
        let t = analyze_trace(&trace, 0, sender, data.len(), &mut StorageTaint::default()).unwrap();
        let sem = TxSemantics::analyze(&trace, &tx, 0, Some(&t), None);
        (trace, sem)
    }

    #[test]
    fn arithmetic_has_no_records() {
        let (_, sem) = run("600160020100", vec![]);
        assert!(sem.records.is_empty());
    }

    #[test]
    fn ecrecover_record_is_padded() {
        // STATICCALL(gas, 1, 0, 0, 0, 32) with empty input
        let (_, sem) = run("60206000600060006001 5a fa 00".replace(' ', "").as_str(), vec![]);
        assert_eq!(sem.records.len(), 1);
        assert_eq!(sem.records[0].api, CryptoApi::Ecrecover);
        assert_eq!(sem.records[0].input_bytes.len(), 128);
        assert_eq!(sem.signatures[0].recovered, Address::ZERO);
    }

    #[test]
    fn single_hash_is_not_merkle() {
        // KECCAK over 64 calldata bytes, once
        let (_, sem) = run("60406000600037604060002000", vec![3; 64]);
        assert_eq!(sem.records.len(), 1);
        assert!(sem.merkle.is_empty());
    }

    #[test]
    fn two_level_chain() {
        // leaf = cd[0..32], proof = cd[32..64], cd[64..96]
        // h1 = keccak(leaf || p0); h2 = keccak(p1 || h1)
        let code = concat!(
            "600035600052", // mstore(0, cd[0])
            "602035602052", // mstore(32, cd[32])
            "6040600020",   // keccak(0, 64)
            "602052",       // mstore(32, h1)
            "604035600052", // mstore(0, cd[64])
            "6040600020",   // keccak(0, 64)
            "00"
        );
        let mut cd = vec![1u8; 32];
        cd.extend([2u8; 32]);
        cd.extend([3u8; 32]);
        let (_, sem) = run(code, cd.clone());
        assert_eq!(sem.merkle.len(), 1);
        let m = &sem.merkle[0];
        assert_eq!(m.proof_elements, vec![[2u8; 32], [3u8; 32]]);
        assert_eq!(m.leaf_word, [1u8; 32]);
        assert!(m.reconstructs_root(keccak256));
    }
}
