//! Dynamic taint over execution traces.
//!
//! Stack taint is per word, memory/calldata/returndata taint per byte, and
//! storage taint per slot. Only explicit data flow is tracked. Each shadow
//! stack slot also remembers the step that produced its value, which lets
//! the oracles walk comparison chains backwards from a branch.

mod set;

use std::collections::BTreeMap;

use crate::evm::opcode::*;
use crate::evm::{Address, CallKind, CryptoApi, ExecutionTrace, TraceStep, U256};

pub use set::{BlockAttr, CryptoCallId, TaintLabel, TaintSet};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaintError {
    #[error("shadow desync at step {step} (pc {pc}): machine stack depth {machine}, shadow depth {shadow}")]
    ShadowDesync { step: usize, pc: usize, machine: usize, shadow: usize },
}

/// A shadow stack slot: taint plus the step index that produced the value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Slot {
    pub taint: TaintSet,
    pub producer: Option<usize>,
}

/// Taint facts about one executed step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepTaint {
    /// Taint of each popped operand, top of stack first.
    pub inputs: Vec<TaintSet>,
    /// Producing step of each popped operand.
    pub producers: Vec<Option<usize>>,
    /// Taint of the pushed result (single-output opcodes).
    pub output: TaintSet,
}

/// Storage-slot taint shared by the transactions of one test case.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StorageTaint {
    slots: BTreeMap<(Address, U256), TaintSet>,
}

impl StorageTaint {
    pub fn get(&self, address: &Address, key: U256) -> TaintSet {
        self.slots.get(&(*address, key)).cloned().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CryptoSink {
    pub step_index: usize,
    pub call_id: CryptoCallId,
    pub api: CryptoApi,
    /// Per-byte taint of the input region (before 128-byte padding).
    pub input: Vec<TaintSet>,
    pub output: TaintSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JumpiSink {
    pub step_index: usize,
    pub condition: TaintSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SstoreSink {
    pub step_index: usize,
    pub address: Address,
    pub key: TaintSet,
    pub value: TaintSet,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SinkReport {
    pub crypto: Vec<CryptoSink>,
    pub jumpis: Vec<JumpiSink>,
    pub sstores: Vec<SstoreSink>,
}

impl SinkReport {
    pub fn is_empty(&self) -> bool {
        self.crypto.is_empty() && self.jumpis.is_empty() && self.sstores.is_empty()
    }
}

/// Result of propagating taint over one trace.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaintAnalysis {
    pub tx_index: u32,
    pub steps: Vec<StepTaint>,
    pub sinks: SinkReport,
}

impl TaintAnalysis {
    /// Walks DUP/SWAP-transparent producers: the step that produced operand
    /// `operand` of step `index`.
    pub fn producer(&self, index: usize, operand: usize) -> Option<usize> {
        self.steps.get(index)?.producers.get(operand).copied().flatten()
    }
}

struct PendingCall {
    step_index: usize,
    ret_offset: usize,
    ret_len: usize,
}

#[derive(Default)]
struct ShadowFrame {
    stack: Vec<Slot>,
    memory: Vec<TaintSet>,
    calldata: Vec<TaintSet>,
    returndata: Vec<TaintSet>,
    output: Vec<TaintSet>,
    journal_mark: usize,
    /// Set on the callee frame: the parent's CALL step awaiting completion.
    pending: Option<PendingCall>,
}

impl ShadowFrame {
    fn mem_read(&self, offset: usize, len: usize) -> Vec<TaintSet> {
        (offset..offset + len).map(|i| self.memory.get(i).cloned().unwrap_or_default()).collect()
    }

    fn mem_write(&mut self, offset: usize, taints: Vec<TaintSet>) {
        if taints.is_empty() {
            return;
        }
        let end = offset + taints.len();
        if self.memory.len() < end {
            self.memory.resize(end, TaintSet::empty());
        }
        for (i, t) in taints.into_iter().enumerate() {
            self.memory[offset + i] = t;
        }
    }

    fn mem_fill(&mut self, offset: usize, len: usize, taint: &TaintSet) {
        self.mem_write(offset, vec![taint.clone(); len]);
    }
}

fn region(src: &[TaintSet], offset: U256, len: usize) -> Vec<TaintSet> {
    let off = crate::evm::primitives::word_to_usize_saturating(offset);
    (0..len).map(|i| off.checked_add(i).and_then(|j| src.get(j)).cloned().unwrap_or_default()).collect()
}

/// Shadow machine state mirroring the interpreter across one trace.
pub struct ShadowState<'a> {
    tx_index: u32,
    sender: Address,
    frames: Vec<ShadowFrame>,
    storage: &'a mut StorageTaint,
    journal: Vec<((Address, U256), Option<TaintSet>)>,
    crypto_seq: u32,
    sinks: SinkReport,
}

impl<'a> ShadowState<'a> {
    pub fn new(tx_index: u32, sender: Address, calldata_len: usize, storage: &'a mut StorageTaint) -> Self {
        let calldata =
            (0..calldata_len).map(|i| TaintSet::single(TaintLabel::CalldataSlot { tx: tx_index, offset: i as u32 })).collect();
        ShadowState {
            tx_index,
            sender,
            frames: vec![ShadowFrame { calldata, ..Default::default() }],
            storage,
            journal: Vec::new(),
            crypto_seq: 0,
            sinks: SinkReport::default(),
        }
    }

    fn top(&mut self) -> &mut ShadowFrame {
        self.frames.last_mut().expect("at least one shadow frame")
    }

    fn set_storage(&mut self, address: Address, key: U256, taint: TaintSet) {
        let old = if taint.is_empty() {
            self.storage.slots.remove(&(address, key))
        } else {
            self.storage.slots.insert((address, key), taint)
        };
        self.journal.push(((address, key), old));
    }

    fn rollback(&mut self, mark: usize) {
        while self.journal.len() > mark {
            let (slot, old) = self.journal.pop().expect("journal entry");
            match old {
                Some(t) => {
                    self.storage.slots.insert(slot, t);
                }
                None => {
                    self.storage.slots.remove(&slot);
                }
            }
        }
    }

    /// Pops the callee frame and completes the parent's pending call.
    fn pop_frame(&mut self, trace: &ExecutionTrace) {
        let callee = self.frames.pop().expect("callee frame");
        let pending = callee.pending.expect("callee frames carry their call");
        let call = trace.steps[pending.step_index].call.as_ref().expect("call step");
        if !call.success {
            self.rollback(callee.journal_mark);
        }
        let is_create = matches!(call.kind, CallKind::Create | CallKind::Create2);
        let output = if is_create && call.success { Vec::new() } else { callee.output };
        self.finish_call(pending, output, is_create);
    }

    fn finish_call(&mut self, pending: PendingCall, output: Vec<TaintSet>, is_create: bool) {
        let frame = self.top();
        if !is_create {
            let n = pending.ret_len.min(output.len());
            frame.mem_write(pending.ret_offset, output[..n].to_vec());
        }
        frame.returndata = output;
        frame.stack.push(Slot { taint: TaintSet::empty(), producer: Some(pending.step_index) });
    }

    fn unwind_to(&mut self, depth: usize, trace: &ExecutionTrace) {
        while self.frames.len() > depth + 1 {
            self.pop_frame(trace);
        }
    }

    /// Applies one step. `index` is the step's position in `trace`.
    pub fn propagate(&mut self, index: usize, trace: &ExecutionTrace) -> Result<StepTaint, TaintError> {
        let step = &trace.steps[index];
        self.unwind_to(step.frame_depth, trace);
        let shadow_depth = self.top().stack.len();
        if self.frames.len() != step.frame_depth + 1 || shadow_depth != step.stack_depth {
            return Err(TaintError::ShadowDesync {
                step: index,
                pc: step.pc,
                machine: step.stack_depth,
                shadow: if self.frames.len() == step.frame_depth + 1 { shadow_depth } else { usize::MAX },
            });
        }
        let (n_in, n_out) = arity(step.opcode).expect("traced opcodes are implemented");
        let op = step.opcode;

        // DUP/SWAP move slots without creating new values; inputs list the
        // slots they read, top first, as the trace does
        if (DUP1..=DUP16).contains(&op) || (SWAP1..=SWAP16).contains(&op) {
            let frame = self.top();
            let read: Vec<&Slot> = frame.stack.iter().rev().take(n_in).collect();
            let st = StepTaint {
                inputs: read.iter().map(|s| s.taint.clone()).collect(),
                producers: read.iter().map(|s| s.producer).collect(),
                output: TaintSet::empty(),
            };
            if (DUP1..=DUP16).contains(&op) {
                let slot = frame.stack[frame.stack.len() - n_in].clone();
                frame.stack.push(slot);
            } else {
                let top = frame.stack.len() - 1;
                frame.stack.swap(top, top + 1 - n_in);
            }
            return Ok(st);
        }

        let frame = self.top();
        let popped: Vec<Slot> = (0..n_in).map(|_| frame.stack.pop().expect("depth checked")).collect();
        let inputs: Vec<TaintSet> = popped.iter().map(|s| s.taint.clone()).collect();
        let producers: Vec<Option<usize>> = popped.iter().map(|s| s.producer).collect();
        let input_union = || TaintSet::union_all(inputs.iter());

        let mut output = TaintSet::empty();
        match op {
            ADD | MUL | SUB | DIV | SDIV | MOD | SMOD | ADDMOD | MULMOD | EXP | SIGNEXTEND | LT | GT | SLT | SGT
            | EQ | ISZERO | AND | OR | XOR | NOT | BYTE | SHL | SHR | SAR | BALANCE | EXTCODESIZE
            | EXTCODEHASH => output = input_union(),
            KECCAK256 => {
                let (off, len) = mem_range(step, 0);
                let input = self.top().mem_read(off, len);
                let id = self.next_crypto_id();
                output = TaintSet::union_all(input.iter()).with(TaintLabel::CryptoOutput(id));
                self.sinks.crypto.push(CryptoSink {
                    step_index: index,
                    call_id: id,
                    api: CryptoApi::Keccak256,
                    input,
                    output: output.clone(),
                });
            }
            ADDRESS => output = TaintSet::single(TaintLabel::SelfAddress),
            CALLER | ORIGIN => {
                if step.output().map(Address::from_word) == Some(self.sender) {
                    output = TaintSet::single(TaintLabel::SenderAddr);
                }
            }
            CALLDATALOAD => {
                let frame = self.top();
                output = TaintSet::union_all(region(&frame.calldata, step.input(0), 32).iter());
            }
            CALLDATACOPY | RETURNDATACOPY => {
                let frame = self.top();
                let len = crate::evm::primitives::word_to_usize_saturating(step.input(2));
                if len > 0 {
                    let src = if op == CALLDATACOPY { &frame.calldata } else { &frame.returndata };
                    let taints = region(src, step.input(1), len);
                    frame.mem_write(step.input(0).to::<usize>(), taints);
                }
            }
            CODECOPY | EXTCODECOPY => {
                let (dst, len) = if op == CODECOPY { (0, 2) } else { (1, 3) };
                let len = crate::evm::primitives::word_to_usize_saturating(step.input(len));
                if len > 0 {
                    self.top().mem_fill(step.input(dst).to::<usize>(), len, &TaintSet::empty());
                }
            }
            BLOCKHASH => output = input_union().with(TaintLabel::BlockAttr(BlockAttr::Blockhash)),
            COINBASE => output = TaintSet::single(TaintLabel::BlockAttr(BlockAttr::Coinbase)),
            TIMESTAMP => output = TaintSet::single(TaintLabel::BlockAttr(BlockAttr::Timestamp)),
            NUMBER => output = TaintSet::single(TaintLabel::BlockAttr(BlockAttr::Number)),
            PREVRANDAO => output = TaintSet::single(TaintLabel::BlockAttr(BlockAttr::Prevrandao)),
            GASLIMIT => output = TaintSet::single(TaintLabel::BlockAttr(BlockAttr::Gaslimit)),
            MLOAD => {
                let off = step.input(0).to::<usize>();
                output = TaintSet::union_all(self.top().mem_read(off, 32).iter());
            }
            MSTORE => {
                let off = step.input(0).to::<usize>();
                self.top().mem_fill(off, 32, &inputs[1]);
            }
            MSTORE8 => {
                let off = step.input(0).to::<usize>();
                self.top().mem_fill(off, 1, &inputs[1]);
            }
            SLOAD => output = self.storage.get(&step.context_address, step.input(0)),
            SSTORE => {
                self.set_storage(step.context_address, step.input(0), inputs[1].clone());
                self.sinks.sstores.push(SstoreSink {
                    step_index: index,
                    address: step.context_address,
                    key: inputs[0].clone(),
                    value: inputs[1].clone(),
                });
            }
            JUMPI => self.sinks.jumpis.push(JumpiSink { step_index: index, condition: inputs[1].clone() }),
            RETURN | REVERT => {
                let (off, len) = mem_range(step, 0);
                let out = self.top().mem_read(off, len);
                self.top().output = out;
            }
            CALL | CALLCODE | DELEGATECALL | STATICCALL | CREATE | CREATE2 => {
                return self.propagate_call(index, step, inputs, producers);
            }
            _ => {}
        }

        if n_out == 1 {
            self.top().stack.push(Slot { taint: output.clone(), producer: Some(index) });
        }
        Ok(StepTaint { inputs, producers, output })
    }

    fn next_crypto_id(&mut self) -> CryptoCallId {
        let id = CryptoCallId { tx: self.tx_index, seq: self.crypto_seq };
        self.crypto_seq += 1;
        id
    }

    fn propagate_call(
        &mut self,
        index: usize,
        step: &TraceStep,
        inputs: Vec<TaintSet>,
        producers: Vec<Option<usize>>,
    ) -> Result<StepTaint, TaintError> {
        let call = step.call.as_ref().expect("call steps carry CallInfo");
        let is_create = matches!(call.kind, CallKind::Create | CallKind::Create2);
        let args = self.top().mem_read(call.args_offset, call.args_len);
        let pending = PendingCall { step_index: index, ret_offset: call.ret_offset, ret_len: call.ret_len };

        let api = step.crypto_api();
        let crypto_id = api.map(|_| self.next_crypto_id());

        if call.entered {
            let journal_mark = self.journal.len();
            let calldata = if is_create { Vec::new() } else { args };
            self.frames.push(ShadowFrame { calldata, journal_mark, pending: Some(pending), ..Default::default() });
        } else {
            let output: Vec<TaintSet> = match (api, crypto_id) {
                (Some(api), Some(id)) => {
                    let out = TaintSet::union_all(args.iter()).with(TaintLabel::CryptoOutput(id));
                    self.sinks.crypto.push(CryptoSink {
                        step_index: index,
                        call_id: id,
                        api,
                        input: args,
                        output: out.clone(),
                    });
                    vec![out; call.return_data.len()]
                }
                // IDENTITY copies its input byte for byte
                _ if call.precompile == Some(4) => args.into_iter().take(call.return_data.len()).collect(),
                _ => vec![TaintSet::empty(); call.return_data.len()],
            };
            self.finish_call(pending, output, is_create);
        }
        Ok(StepTaint { inputs, producers, output: TaintSet::empty() })
    }

    /// Closes all frames; rolls back this transaction's storage taint when
    /// the transaction failed.
    pub fn finish(mut self, trace: &ExecutionTrace) -> SinkReport {
        self.unwind_to(0, trace);
        if !trace.receipt.success {
            self.rollback(0);
        }
        self.sinks
    }
}

fn mem_range(step: &TraceStep, first: usize) -> (usize, usize) {
    let len = crate::evm::primitives::word_to_usize_saturating(step.input(first + 1));
    if len == 0 {
        (0, 0)
    } else {
        (step.input(first).to::<usize>(), len)
    }
}

/// Propagates taint over a whole trace. `storage` carries slot taint in from
/// earlier transactions of the same case and is updated in place.
pub fn analyze_trace(
    trace: &ExecutionTrace,
    tx_index: u32,
    sender: Address,
    calldata_len: usize,
    storage: &mut StorageTaint,
) -> Result<TaintAnalysis, TaintError> {
    let mut shadow = ShadowState::new(tx_index, sender, calldata_len, storage);
    let mut steps = Vec::with_capacity(trace.steps.len());
    for i in 0..trace.steps.len() {
        steps.push(shadow.propagate(i, trace)?);
    }
    let sinks = shadow.finish(trace);
    Ok(TaintAnalysis { tx_index, steps, sinks })
}

/// The sink view of a completed analysis.
pub fn query_sinks(analysis: &TaintAnalysis) -> &SinkReport {
    &analysis.sinks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evm::{execute_transaction, Account, BlockEnv, TransactionEnv, WorldState};

    fn trace_of(code: &str, data: Vec<u8>) -> (ExecutionTrace, TaintAnalysis, StorageTaint) {
        let mut world = WorldState::new();
        let to = Address::from_low_u64(0x1000);
        world.insert(to, Account::with_code(hex::decode(code).unwrap()));
        let sender = Address::from_low_u64(0xaa);
        let tx = TransactionEnv::call(sender, to, data.clone());
        let (_, trace) = execute_transaction(&world, &BlockEnv::default(), &tx).unwrap();
        let mut storage = StorageTaint::default();
        let analysis = analyze_trace(&trace, 0, sender, data.len(), &mut storage).unwrap();
        (trace, analysis, storage)
    }

    #[test]
    fn add_unions_and_push_is_clean() {
        // CALLDATALOAD(0) + 1
        let (_, a, _) = trace_of("60003560010100", vec![7; 32]);
        assert!(a.steps[0].output.is_empty());
        assert_eq!(a.steps[3].output.len(), 32);
    }

    #[test]
    fn calldatacopy_mload_sstore() {
        // CALLDATACOPY(0, 4, 32); MLOAD(0); SSTORE(0, .)
        let (_, _, storage) = trace_of("6020600460003760005160005500", vec![1; 36]);
        let t = storage.get(&Address::from_low_u64(0x1000), U256::ZERO);
        let offsets: Vec<u32> = t.calldata_offsets(0).into_iter().collect();
        assert_eq!(offsets, (4..36).collect::<Vec<u32>>());
    }

    #[test]
    fn keccak_carries_inputs_and_crypto_label() {
        // MSTORE(0, TIMESTAMP); KECCAK(0, 32); SSTORE(0, .)
        let (_, a, _) = trace_of("4260005260206000206000550000", vec![]);
        assert_eq!(a.sinks.crypto.len(), 1);
        let out = &a.sinks.crypto[0].output;
        assert!(out.contains(&TaintLabel::BlockAttr(BlockAttr::Timestamp)));
        assert!(out.contains(&TaintLabel::CryptoOutput(CryptoCallId { tx: 0, seq: 0 })));
    }

    #[test]
    fn reverted_tx_leaves_no_storage_taint() {
        let (_, _, storage) = trace_of("600035600055600060006000fd", vec![1; 32]);
        assert!(storage.is_empty());
    }

    #[test]
    fn producers_follow_dup() {
        // CALLDATALOAD(0); DUP1; ISZERO
        let (_, a, _) = trace_of("600035801500", vec![1; 32]);
        assert_eq!(a.producer(3, 0), Some(1));
    }
}
