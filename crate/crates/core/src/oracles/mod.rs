//! Defect oracles over executed test cases.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::evm::{execute_transaction, opcode, Address, CryptoApi, ExecutionTrace, WorldState, U256};
use crate::fuzz::{CaseStep, TestCase, TxTag, CASE_TX_BASE};
use crate::replay::PreimageRegistry;
use crate::semantics::abi::{encode_packed, AbiType};
use crate::semantics::FunctionProfile;
use crate::taint::{BlockAttr, CryptoCallId, TaintAnalysis, TaintLabel, TaintSet};

/// Order of the secp256k1 group.
pub const SECP256K1_N: U256 = U256::from_limbs([0xBFD25E8CD0364141, 0xBAAEDCE6AF48A03B, 0xFFFFFFFFFFFFFFFE, 0xFFFFFFFFFFFFFFFF]);
/// floor(N / 2): the largest canonical `s`.
pub const HALF_N: U256 = U256::from_limbs([0xDFE92F46681B20A0, 0x5D576E7357A4501D, 0xFFFFFFFFFFFFFFFF, 0x7FFFFFFFFFFFFFFF]);

/// Transitive depth for the preimage address search.
const PREIMAGE_DEPTH: usize = 4;
/// Producer hops searched when tracing a comparison operand to an SLOAD.
const SLOAD_HOPS: usize = 4;

pub const PER_ADDRESS_LIMIT: &str = "per-address-limit";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Defect {
    SSR,
    CSR,
    SF,
    SM,
    ISV,
    MR,
    MF,
    HC,
    WR,
}

impl Defect {
    pub const ALL: [Defect; 9] =
        [Defect::SSR, Defect::CSR, Defect::SF, Defect::SM, Defect::ISV, Defect::MR, Defect::MF, Defect::HC, Defect::WR];

    pub fn as_str(self) -> &'static str {
        match self {
            Defect::SSR => "SSR",
            Defect::CSR => "CSR",
            Defect::SF => "SF",
            Defect::SM => "SM",
            Defect::ISV => "ISV",
            Defect::MR => "MR",
            Defect::MF => "MF",
            Defect::HC => "HC",
            Defect::WR => "WR",
        }
    }
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Defect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Defect::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown defect {s:?}"))
    }
}

/// A trace step named by its position in the case sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct StepRef {
    pub tx: usize,
    pub step: usize,
    pub pc: usize,
    pub opcode: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Evidence {
    pub case_id: String,
    /// Fixture position of the seed transaction the case derives from.
    pub seed_tx: usize,
    /// Positions within the case sequence.
    pub tx_indices: Vec<usize>,
    /// `tx:seq` identifiers of the relevant crypto calls.
    pub crypto_calls: Vec<String>,
    pub steps: Vec<StepRef>,
    pub taints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub defect: Defect,
    pub contract: Address,
    #[serde(serialize_with = "ser_selector")]
    pub selector: [u8; 4],
    pub evidence: Evidence,
    pub suppressed_by: Option<String>,
}

fn ser_selector<S: serde::Serializer>(sel: &[u8; 4], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("0x{}", hex::encode(sel)))
}

impl Finding {
    pub fn is_active(&self) -> bool {
        self.suppressed_by.is_none()
    }

    pub fn selector_hex(&self) -> String {
        format!("0x{}", hex::encode(self.selector))
    }
}

/// Everything a detector may consult about one executed case.
pub struct CaseRun<'a> {
    pub case: &'a TestCase,
    pub steps: &'a [CaseStep],
    pub profile: &'a FunctionProfile,
    /// keccak preimages from the history and every executed case.
    pub preimages: &'a PreimageRegistry,
}

impl<'a> CaseRun<'a> {
    fn original(&self) -> Option<&'a CaseStep> {
        self.steps.iter().find(|s| s.tag == TxTag::Original)
    }

    fn tagged(&self, tag: TxTag) -> impl Iterator<Item = &'a CaseStep> {
        self.steps.iter().filter(move |s| s.tag == tag)
    }

    fn finding(&self, defect: Defect, evidence: Evidence) -> Finding {
        Finding { defect, contract: self.case.contract, selector: self.case.selector, evidence, suppressed_by: None }
    }

    fn evidence(&self, tx_indices: Vec<usize>) -> Evidence {
        Evidence {
            case_id: self.case.id.clone(),
            seed_tx: self.case.seed_tx_index,
            tx_indices,
            crypto_calls: Vec::new(),
            steps: Vec::new(),
            taints: Vec::new(),
        }
    }
}

fn call_id_str(id: CryptoCallId) -> String {
    let tx = id.tx.checked_sub(CASE_TX_BASE).unwrap_or(id.tx);
    format!("{tx}:{}", id.seq)
}

fn step_ref(tx: usize, trace: &ExecutionTrace, step: usize) -> StepRef {
    let s = &trace.steps[step];
    StepRef { tx, step, pc: s.pc, opcode: opcode::name(s.opcode) }
}

fn block_attr_name(a: BlockAttr) -> &'static str {
    match a {
        BlockAttr::Number => "block.number",
        BlockAttr::Timestamp => "block.timestamp",
        BlockAttr::Coinbase => "block.coinbase",
        BlockAttr::Prevrandao => "block.prevrandao",
        BlockAttr::Gaslimit => "block.gaslimit",
        BlockAttr::Blockhash => "blockhash",
    }
}

/// Human-readable labels with calldata bytes collapsed into ranges.
pub fn describe_taint(t: &TaintSet) -> Vec<String> {
    let mut calldata: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut out = Vec::new();
    for l in t.iter() {
        match l {
            TaintLabel::CalldataSlot { tx, offset } => calldata.entry(*tx).or_default().push(*offset),
            TaintLabel::BlockAttr(a) => out.push(block_attr_name(*a).to_string()),
            TaintLabel::SelfAddress => out.push("address(this)".into()),
            TaintLabel::SenderAddr => out.push("msg.sender".into()),
            TaintLabel::CryptoOutput(id) => out.push(format!("crypto-output({})", call_id_str(*id))),
        }
    }
    for (tx, mut offs) in calldata {
        offs.sort_unstable();
        let who = match tx.checked_sub(CASE_TX_BASE) {
            Some(p) => format!("tx {p}"),
            None => format!("history tx {tx}"),
        };
        let mut start = offs[0];
        let mut prev = offs[0];
        for &o in &offs[1..] {
            if o != prev + 1 {
                out.push(format!("calldata({who})[{start}..{}]", prev + 1));
                start = o;
            }
            prev = o;
        }
        out.push(format!("calldata({who})[{start}..{}]", prev + 1));
    }
    out.sort();
    out
}

/// Follows a JUMPI condition back through ISZERO steps to the comparison
/// that produced it.
fn comparison_behind(taint: &TaintAnalysis, trace: &ExecutionTrace, jumpi: usize) -> Option<usize> {
    let mut p = taint.producer(jumpi, 1)?;
    for _ in 0..16 {
        let op = trace.steps[p].opcode;
        if opcode::is_comparison(op) {
            return Some(p);
        }
        if op != opcode::ISZERO {
            return None;
        }
        p = taint.producer(p, 0)?;
    }
    None
}

fn is_constant(trace: &ExecutionTrace, producer: Option<usize>) -> bool {
    producer.is_some_and(|p| {
        let op = trace.steps[p].opcode;
        opcode::is_push(op) || op == opcode::PUSH0
    })
}

/// Storage key hash of an SLOAD reached from `start` within a few producer hops.
fn sload_behind(taint: &TaintAnalysis, trace: &ExecutionTrace, start: usize) -> Option<usize> {
    let mut frontier = vec![start];
    let mut seen = BTreeSet::new();
    for _ in 0..=SLOAD_HOPS {
        let mut next = Vec::new();
        for p in frontier {
            if !seen.insert(p) {
                continue;
            }
            let s = &trace.steps[p];
            if s.opcode == opcode::SLOAD {
                return Some(p);
            }
            for k in 0..s.stack_inputs.len() {
                if let Some(q) = taint.producer(p, k) {
                    next.push(q);
                }
            }
        }
        frontier = next;
    }
    None
}

/// For a reverted transaction, the comparison step of the failing check
/// when it compares a constant against a storage slot keyed by an address
/// that appears in the calldata.
pub fn limit_comparison(step: &CaseStep) -> Option<usize> {
    if step.success() {
        return None;
    }
    let trace = &step.trace;
    let taint = step.taint.as_ref()?;
    let revert = trace.steps.iter().rposition(|s| s.opcode == opcode::REVERT)?;
    let depth = trace.steps[revert].frame_depth;
    let jumpi = (0..revert).rev().find(|&i| {
        let s = &trace.steps[i];
        s.opcode == opcode::JUMPI && s.frame_depth == depth && s.input(1).is_zero()
    })?;
    let cmp = comparison_behind(taint, trace, jumpi)?;
    let calldata_words: BTreeSet<[u8; 32]> =
        step.tx.data.get(4..).unwrap_or(&[]).chunks(32).filter(|c| c.len() == 32).map(|c| c.try_into().unwrap()).collect();
    for k in 0..2 {
        if !is_constant(trace, taint.producer(cmp, k)) {
            continue;
        }
        let Some(other) = taint.producer(cmp, 1 - k) else { continue };
        let Some(sload) = sload_behind(taint, trace, other) else { continue };
        let Some(key_step) = taint.producer(sload, 0) else { continue };
        let ks = &trace.steps[key_step];
        if ks.opcode != opcode::KECCAK256 {
            continue;
        }
        let Some(input) = ks.memory_reads.first() else { continue };
        let keyed_by_address = input.data.chunks(32).any(|w| {
            w.len() == 32 && w[..12].iter().all(|b| *b == 0) && w[12..].iter().any(|b| *b != 0) && calldata_words.contains(w)
        });
        if keyed_by_address {
            return Some(cmp);
        }
    }
    None
}

fn attach_suppression(run: &CaseRun<'_>, f: &mut Finding, hit: &CaseStep) {
    let data = &hit.tx.data;
    let later = run.tagged(TxTag::Replay).filter(|s| s.position > hit.position && &s.tx.data == data);
    for r in later {
        if let Some(cmp) = limit_comparison(r) {
            f.suppressed_by = Some(PER_ADDRESS_LIMIT.to_string());
            f.evidence.tx_indices.push(r.position);
            f.evidence.steps.push(step_ref(r.position, &r.trace, cmp));
            return;
        }
    }
}

/// Signature replay: a replayed transaction feeding the same 128-byte
/// ECRECOVER input succeeds and changes the contract's storage.
pub fn detect_ssr(run: &CaseRun<'_>) -> Option<Finding> {
    let o = run.original()?;
    let contract = run.case.contract;
    let inputs: BTreeSet<&[u8]> = o
        .semantics
        .signatures
        .iter()
        .filter(|s| s.record.caller_contract == contract)
        .map(|s| s.record.input_bytes.as_slice())
        .collect();
    if inputs.is_empty() {
        return None;
    }
    let hit = run.tagged(TxTag::Replay).find(|r| {
        r.changed_storage_of(&contract) && r.semantics.signatures.iter().any(|s| inputs.contains(s.record.input_bytes.as_slice()))
    })?;
    let sig = hit.semantics.signatures.iter().find(|s| inputs.contains(s.record.input_bytes.as_slice()))?;
    let mut ev = run.evidence(vec![o.position, hit.position]);
    ev.crypto_calls.push(call_id_str(sig.record.call_id));
    ev.steps.push(step_ref(hit.position, &hit.trace, sig.record.step_index));
    ev.taints = describe_taint(&sig.hash_taint());
    let mut f = run.finding(Defect::SSR, ev);
    attach_suppression(run, &mut f, hit);
    Some(f)
}

/// Missing contract binding: the signed hash neither carries the
/// contract-address label nor has the address in its recorded preimages.
pub fn detect_csr(run: &CaseRun<'_>) -> Option<Finding> {
    let o = run.original()?;
    let contract = run.case.contract;
    let sig = o.semantics.signatures.iter().filter(|s| s.record.caller_contract == contract).find(|s| {
        !s.hash_taint().contains(&TaintLabel::SelfAddress)
            && !run.preimages.preimage_contains(&s.hash, &contract, PREIMAGE_DEPTH)
    })?;
    let mut ev = run.evidence(vec![o.position]);
    ev.crypto_calls.push(call_id_str(sig.record.call_id));
    ev.steps.push(step_ref(o.position, &o.trace, sig.record.step_index));
    ev.taints = describe_taint(&sig.hash_taint());
    Some(run.finding(Defect::CSR, ev))
}

fn normalized(state: &WorldState, tx: &crate::evm::TransactionEnv, success: bool) -> WorldState {
    let mut s = state.clone();
    if success && !tx.value.is_zero() {
        let acct = s.account_mut(tx.sender);
        acct.balance += tx.value;
    }
    s
}

fn states_differ(a: &WorldState, b: &WorldState, contract: &Address) -> bool {
    let storage = |w: &WorldState| w.get(contract).map(|acc| acc.storage.clone()).unwrap_or_default();
    if storage(a) != storage(b) {
        return true;
    }
    let addrs: BTreeSet<&Address> = a.accounts.keys().chain(b.accounts.keys()).collect();
    addrs.into_iter().any(|x| a.balance(x) != b.balance(x))
}

/// Differential front-run check: the attacker's copy and the original, each
/// executed alone from the case start state.
fn differential<'a>(run: &CaseRun<'a>) -> Option<&'a CaseStep> {
    let front = run.tagged(TxTag::Frontrun).next()?;
    if front.position != 0 || !front.success() {
        return None;
    }
    let original = run.case.original();
    let (post_o, trace_o) = execute_transaction(&run.case.start_state, &run.case.block, original).ok()?;
    let a = normalized(&front.post_state, &front.tx, true);
    let b = normalized(&post_o, original, trace_o.receipt.success);
    states_differ(&a, &b, &run.case.contract).then_some(front)
}

fn differential_finding(run: &CaseRun<'_>, defect: Defect, front: &CaseStep) -> Finding {
    let o = run.original().map(|s| s.position).unwrap_or(1);
    let mut ev = run.evidence(vec![front.position, o]);
    for r in front.semantics.records.iter().filter(|r| r.caller_contract == run.case.contract) {
        let wanted = match defect {
            Defect::SF => r.api == CryptoApi::Ecrecover,
            _ => front.semantics.merkle.iter().any(|m| m.chain.iter().any(|c| c.call_id == r.call_id)),
        };
        if wanted {
            ev.crypto_calls.push(call_id_str(r.call_id));
        }
    }
    let sender = TaintSet::single(TaintLabel::SenderAddr);
    ev.taints = describe_taint(&sender);
    run.finding(defect, ev)
}

/// Signature front-running.
pub fn detect_sf(run: &CaseRun<'_>) -> Option<Finding> {
    if run.profile.signature_uses.is_empty() {
        return None;
    }
    differential(run).map(|front| differential_finding(run, Defect::SF, front))
}

/// Merkle-proof front-running.
pub fn detect_mf(run: &CaseRun<'_>) -> Option<Finding> {
    if run.profile.merkle_uses.is_empty() {
        return None;
    }
    differential(run).map(|front| differential_finding(run, Defect::MF, front))
}

fn is_order_bound(v: U256) -> bool {
    v == HALF_N || v == HALF_N + U256::from(1u8) || v == SECP256K1_N || v == SECP256K1_N - U256::from(1u8)
}

/// True when some JUMPI branches on a comparison of `s` against the curve
/// order or its half.
fn has_s_guard(trace: &ExecutionTrace, taint: &TaintAnalysis, s_taint: &TaintSet, s: U256) -> bool {
    trace.steps.iter().enumerate().filter(|(_, st)| st.opcode == opcode::JUMPI).any(|(j, _)| {
        let Some(cmp) = comparison_behind(taint, trace, j) else { return false };
        let c = &trace.steps[cmp];
        (0..2).any(|k| {
            let other = 1 - k;
            is_order_bound(c.input(k))
                && (c.input(other) == s || taint.steps[cmp].inputs[other].iter().any(|l| s_taint.contains(l)))
        })
    })
}

/// Malleability: ECRECOVER is reached with no branch bounding `s`.
pub fn detect_sm(run: &CaseRun<'_>) -> Option<Finding> {
    let o = run.original()?;
    let taint = o.taint.as_ref()?;
    let contract = run.case.contract;
    let sig = o
        .semantics
        .signatures
        .iter()
        .filter(|s| s.record.caller_contract == contract)
        .find(|sig| !has_s_guard(&o.trace, taint, &sig.s_taint(), sig.s))?;
    let mut ev = run.evidence(vec![o.position]);
    ev.crypto_calls.push(call_id_str(sig.record.call_id));
    ev.steps.push(step_ref(o.position, &o.trace, sig.record.step_index));
    ev.taints = describe_taint(&sig.s_taint());
    Some(run.finding(Defect::SM, ev))
}

/// Invalid signature verification: a transaction with forged signature
/// words succeeds and changes storage.
pub fn detect_isv(run: &CaseRun<'_>) -> Option<Finding> {
    let contract = run.case.contract;
    let o = run.original()?;
    let forged = run
        .tagged(TxTag::Forged)
        .find(|f| f.changed_storage_of(&contract) && !(records_signer_only(o, &contract) && !branches_on_signer(f, &contract)))?;
    let mut ev = run.evidence(vec![o.position, forged.position]);
    for s in forged.semantics.signatures.iter().filter(|s| s.record.caller_contract == contract) {
        ev.crypto_calls.push(call_id_str(s.record.call_id));
        ev.steps.push(step_ref(forged.position, &forged.trace, s.record.step_index));
        ev.taints.extend(describe_taint(&s.record.output_taint));
    }
    ev.taints.sort();
    ev.taints.dedup();
    Some(run.finding(Defect::ISV, ev))
}

fn signer_labels(step: &CaseStep, contract: &Address) -> Vec<TaintLabel> {
    step.semantics
        .signatures
        .iter()
        .filter(|s| s.record.caller_contract == *contract)
        .map(|s| TaintLabel::CryptoOutput(s.record.call_id))
        .collect()
}

fn branches_on_signer(step: &CaseStep, contract: &Address) -> bool {
    let Some(taint) = &step.taint else { return true };
    let labels = signer_labels(step, contract);
    taint.sinks.jumpis.iter().any(|j| labels.iter().any(|l| j.condition.contains(l)))
}

/// The recovered address is written to storage but never decides a branch.
/// Judged on a step whose recovery succeeded: a forged signature recovers
/// nothing, so its label cannot reach the store.
fn records_signer_only(step: &CaseStep, contract: &Address) -> bool {
    let Some(taint) = &step.taint else { return false };
    let labels = signer_labels(step, contract);
    if labels.is_empty() {
        return false;
    }
    let stored = taint.sinks.sstores.iter().any(|s| labels.iter().any(|l| s.key.contains(l) || s.value.contains(l)));
    stored && !branches_on_signer(step, contract)
}

/// Merkle replay: a replay presenting the same leaf and proof elements
/// succeeds, and both it and the original change storage.
pub fn detect_mr(run: &CaseRun<'_>) -> Option<Finding> {
    if run.profile.merkle_uses.is_empty() {
        return None;
    }
    let o = run.original()?;
    let contract = run.case.contract;
    if !o.changed_storage_of(&contract) {
        return None;
    }
    let proofs: BTreeSet<([u8; 32], Vec<[u8; 32]>)> =
        o.semantics.merkle.iter().map(|m| (m.leaf_word, m.proof_elements.clone())).collect();
    if proofs.is_empty() {
        return None;
    }
    let hit = run.tagged(TxTag::Replay).find(|r| {
        r.changed_storage_of(&contract)
            && r.semantics.merkle.iter().any(|m| proofs.contains(&(m.leaf_word, m.proof_elements.clone())))
    })?;
    let m = hit.semantics.merkle.iter().find(|m| proofs.contains(&(m.leaf_word, m.proof_elements.clone())))?;
    let mut ev = run.evidence(vec![o.position, hit.position]);
    ev.crypto_calls = m.chain.iter().map(|c| call_id_str(c.call_id)).collect();
    ev.taints = describe_taint(&TaintSet::union_all(m.element_taints.iter().chain([&m.leaf_taint])));
    let mut f = run.finding(Defect::MR, ev);
    attach_suppression(run, &mut f, hit);
    Some(f)
}

fn is_dynamic_length(ty: &AbiType) -> bool {
    matches!(ty, AbiType::Bytes | AbiType::String | AbiType::Array(_))
}

/// Hash collision: some hash input holds the packed encodings of two
/// non-empty dynamic-length arguments back to back.
pub fn detect_hc(run: &CaseRun<'_>) -> Option<Finding> {
    let o = run.original()?;
    let f = run.case.function.as_ref()?;
    let layout = o.semantics.layout.as_ref()?;
    let packed: Vec<(usize, Vec<u8>)> = f
        .inputs
        .iter()
        .zip(layout)
        .enumerate()
        .filter(|(_, (p, _))| is_dynamic_length(&p.ty))
        .map(|(i, (p, d))| (i, encode_packed(&p.ty, &d.value)))
        .filter(|(_, enc)| !enc.is_empty())
        .collect();
    if packed.len() < 2 {
        return None;
    }
    for r in o.semantics.records.iter().filter(|r| r.api.is_hash() && r.caller_contract == run.case.contract) {
        if !TaintSet::union_all(r.input_taint.iter()).has_calldata() {
            continue;
        }
        for (i, a) in &packed {
            for (j, b) in &packed {
                if i == j {
                    continue;
                }
                let joined = [a.as_slice(), b.as_slice()].concat();
                if r.input_bytes.windows(joined.len()).any(|w| w == joined.as_slice()) {
                    let mut ev = run.evidence(vec![o.position]);
                    ev.crypto_calls.push(call_id_str(r.call_id));
                    ev.steps.push(step_ref(o.position, &o.trace, r.step_index));
                    ev.taints = describe_taint(&TaintSet::union_all(r.input_taint.iter()));
                    return Some(run.finding(Defect::HC, ev));
                }
            }
        }
    }
    None
}

/// Weak randomness: a hash over block attributes whose output decides a
/// branch or is stored as a value.
pub fn detect_wr(run: &CaseRun<'_>) -> Option<Finding> {
    let contract = run.case.contract;
    for step in run.steps.iter().filter(|s| matches!(s.tag, TxTag::Original | TxTag::Probe)) {
        let Some(taint) = &step.taint else { continue };
        for sink in &taint.sinks.crypto {
            if !sink.api.is_hash() || step.trace.steps[sink.step_index].context_address != contract {
                continue;
            }
            let input = TaintSet::union_all(sink.input.iter());
            if input.block_attrs().is_empty() {
                continue;
            }
            let label = TaintLabel::CryptoOutput(sink.call_id);
            let branch = taint.sinks.jumpis.iter().find(|j| j.condition.contains(&label)).map(|j| j.step_index);
            let stored = taint.sinks.sstores.iter().find(|s| s.value.contains(&label)).map(|s| s.step_index);
            if let Some(at) = branch.or(stored) {
                let mut ev = run.evidence(vec![step.position]);
                ev.crypto_calls.push(call_id_str(sink.call_id));
                ev.steps.push(step_ref(step.position, &step.trace, sink.step_index));
                ev.steps.push(step_ref(step.position, &step.trace, at));
                ev.taints = describe_taint(&input);
                return Some(run.finding(Defect::WR, ev));
            }
        }
    }
    None
}

pub fn detector(defect: Defect) -> fn(&CaseRun<'_>) -> Option<Finding> {
    match defect {
        Defect::SSR => detect_ssr,
        Defect::CSR => detect_csr,
        Defect::SF => detect_sf,
        Defect::SM => detect_sm,
        Defect::ISV => detect_isv,
        Defect::MR => detect_mr,
        Defect::MF => detect_mf,
        Defect::HC => detect_hc,
        Defect::WR => detect_wr,
    }
}

/// Runs the selected detectors over one case.
pub fn judge_case(run: &CaseRun<'_>, only: Option<&BTreeSet<Defect>>) -> Vec<Finding> {
    Defect::ALL
        .into_iter()
        .filter(|d| only.is_none_or(|o| o.contains(d)))
        .filter_map(|d| detector(d)(run))
        .collect()
}

fn case_number(id: &str) -> usize {
    id.rsplit('-').next().and_then(|n| n.parse().ok()).unwrap_or(usize::MAX)
}

/// Keeps one finding per (defect, contract, selector). Active findings win
/// over suppressed ones; ties go to the shortest case, then the lowest case
/// number. `lengths` maps case ids to sequence lengths.
pub fn merge_findings(findings: Vec<Finding>, lengths: &BTreeMap<String, usize>) -> Vec<Finding> {
    let mut best: BTreeMap<(Address, [u8; 4], Defect), Finding> = BTreeMap::new();
    let rank = |f: &Finding| {
        (
            !f.is_active(),
            lengths.get(&f.evidence.case_id).copied().unwrap_or(usize::MAX),
            case_number(&f.evidence.case_id),
        )
    };
    for f in findings {
        let key = (f.contract, f.selector, f.defect);
        match best.get(&key) {
            Some(cur) if rank(cur) <= rank(&f) => {}
            _ => {
                best.insert(key, f);
            }
        }
    }
    best.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_n_relation() {
        assert_eq!(HALF_N * U256::from(2u8) + U256::from(1u8), SECP256K1_N);
        assert_eq!(HALF_N, SECP256K1_N / U256::from(2u8));
    }

    #[test]
    fn constants_match_hex() {
        let n: U256 = "0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141".parse().unwrap();
        let h: U256 = "0x7FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFF5D576E7357A4501DDFE92F46681B20A0".parse().unwrap();
        assert_eq!(n, SECP256K1_N);
        assert_eq!(h, HALF_N);
    }

    #[test]
    fn defect_parse() {
        assert_eq!("ssr".parse::<Defect>().unwrap(), Defect::SSR);
        assert!("XYZ".parse::<Defect>().is_err());
    }

    #[test]
    fn taint_description_ranges() {
        let t: TaintSet = (4..36)
            .chain(68..100)
            .map(|o| TaintLabel::CalldataSlot { tx: CASE_TX_BASE + 1, offset: o })
            .chain([TaintLabel::BlockAttr(BlockAttr::Timestamp)])
            .collect();
        assert_eq!(describe_taint(&t), vec!["block.timestamp", "calldata(tx 1)[4..36]", "calldata(tx 1)[68..100]"]);
    }

    fn finding(case: &str, suppressed: bool) -> Finding {
        Finding {
            defect: Defect::SSR,
            contract: Address::from_low_u64(1),
            selector: [1, 2, 3, 4],
            evidence: Evidence {
                case_id: case.into(),
                seed_tx: 0,
                tx_indices: vec![],
                crypto_calls: vec![],
                steps: vec![],
                taints: vec![],
            },
            suppressed_by: suppressed.then(|| PER_ADDRESS_LIMIT.to_string()),
        }
    }

    #[test]
    fn merge_prefers_active_then_shortest() {
        let lengths: BTreeMap<String, usize> =
            [("case-0".to_string(), 9), ("case-3".to_string(), 9), ("case-5".to_string(), 2)].into();
        let merged = merge_findings(vec![finding("case-3", false), finding("case-0", false), finding("case-5", true)], &lengths);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].evidence.case_id, "case-0");
        let merged = merge_findings(vec![finding("case-5", false), finding("case-0", false)], &lengths);
        assert_eq!(merged[0].evidence.case_id, "case-5");
    }
}
