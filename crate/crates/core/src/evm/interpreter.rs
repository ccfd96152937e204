//! Instrumented interpreter. Every executed instruction is appended to the
//! trace; faulting instructions are not.

use std::collections::BTreeSet;
use std::sync::Arc;

use super::opcode::{self, *};
use super::precompiles::{keccak256, precompile_id, run_precompile, PrecompileOutcome};
use super::primitives::{word_to_usize_saturating, Address, U256};
use super::state::{BlockEnv, TransactionEnv, WorldState};
use super::trace::*;

pub const MAX_CALL_DEPTH: usize = 1024;
pub const MAX_STACK: usize = 1024;
/// Memory beyond this many bytes is treated as out of gas.
pub const MEMORY_CAP: usize = 8 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvmError {
    #[error("unsupported opcode {} at pc {pc} in {address}", opcode::name(*opcode))]
    UnsupportedOpcode { opcode: u8, pc: usize, address: Address },
    #[error("invalid transaction: {0}")]
    InvalidTransaction(String),
}

/// Executes a message call. On failure the returned state equals `world`.
pub fn execute_transaction(
    world: &WorldState,
    block: &BlockEnv,
    tx: &TransactionEnv,
) -> Result<(WorldState, ExecutionTrace), EvmError> {
    check_tx(tx.sender, tx.gas_limit)?;
    let mut m = Machine::new(world.clone(), block, tx.sender);
    let res = m.message(Message {
        caller: tx.sender,
        target: tx.to,
        code_address: tx.to,
        value: tx.value,
        transfer: tx.value,
        data: tx.data.clone(),
        gas: tx.gas_limit,
        is_static: false,
        depth: 0,
    })?;
    Ok(m.finish(world, res, tx.gas_limit))
}

/// Executes a contract-creation transaction; returns the new address on success.
pub fn execute_create(
    world: &WorldState,
    block: &BlockEnv,
    sender: Address,
    init_code: &[u8],
    value: U256,
    gas_limit: u64,
) -> Result<(WorldState, Option<Address>, ExecutionTrace), EvmError> {
    check_tx(sender, gas_limit)?;
    let mut m = Machine::new(world.clone(), block, sender);
    let (res, addr) = m.create(sender, value, init_code.to_vec(), None, gas_limit, 0)?;
    let ok = res.success;
    let (post, trace) = m.finish(world, res, gas_limit);
    Ok((post, if ok { addr } else { None }, trace))
}

fn check_tx(sender: Address, gas_limit: u64) -> Result<(), EvmError> {
    if sender.is_zero() {
        return Err(EvmError::InvalidTransaction("sender is the zero address".into()));
    }
    if gas_limit == 0 {
        return Err(EvmError::InvalidTransaction("gas limit is zero".into()));
    }
    Ok(())
}

/// Address of a contract created by `sender` with `nonce`.
pub fn create_address(sender: Address, nonce: u64) -> Address {
    let mut payload = Vec::with_capacity(30);
    payload.push(0x94);
    payload.extend_from_slice(sender.as_bytes());
    if nonce == 0 {
        payload.push(0x80);
    } else if nonce < 0x80 {
        payload.push(nonce as u8);
    } else {
        let be = nonce.to_be_bytes();
        let skip = be.iter().take_while(|b| **b == 0).count();
        payload.push(0x80 + (8 - skip) as u8);
        payload.extend_from_slice(&be[skip..]);
    }
    let mut rlp = vec![0xc0 + payload.len() as u8];
    rlp.extend_from_slice(&payload);
    Address::from_slice(&keccak256(&rlp)[12..])
}

pub fn create2_address(sender: Address, salt: U256, init_code: &[u8]) -> Address {
    let mut buf = Vec::with_capacity(85);
    buf.push(0xff);
    buf.extend_from_slice(sender.as_bytes());
    buf.extend_from_slice(&salt.to_be_bytes::<32>());
    buf.extend_from_slice(&keccak256(init_code));
    Address::from_slice(&keccak256(&buf)[12..])
}

struct Message {
    caller: Address,
    /// Context (storage owner) address.
    target: Address,
    code_address: Address,
    /// Apparent CALLVALUE.
    value: U256,
    /// Wei actually moved from caller to target.
    transfer: U256,
    data: Vec<u8>,
    gas: u64,
    is_static: bool,
    depth: usize,
}

struct FrameResult {
    success: bool,
    halt: Option<Halt>,
    output: Vec<u8>,
    gas_left: u64,
}

impl FrameResult {
    fn fail(halt: Halt, gas_left: u64) -> Self {
        FrameResult { success: false, halt: Some(halt), output: Vec::new(), gas_left }
    }
}

struct Snapshot {
    state: WorldState,
    writes: usize,
    destructed: usize,
}

struct Machine<'a> {
    state: WorldState,
    block: &'a BlockEnv,
    origin: Address,
    steps: Vec<TraceStep>,
    internal_calls: Vec<InternalCall>,
    writes: Vec<StorageWrite>,
    destructed: Vec<Address>,
    stubbed: Vec<u8>,
}

struct Frame {
    code: Arc<Vec<u8>>,
    jumpdests: Vec<bool>,
    code_address: Address,
    address: Address,
    caller: Address,
    value: U256,
    calldata: Vec<u8>,
    gas: u64,
    is_static: bool,
    depth: usize,
    stack: Vec<U256>,
    memory: Vec<u8>,
    returndata: Vec<u8>,
    pc: usize,
}

enum Fault {
    Halt(Halt),
    Tool(EvmError),
}

impl From<Halt> for Fault {
    fn from(h: Halt) -> Self {
        Fault::Halt(h)
    }
}

enum Flow {
    Continue,
    Jump(usize),
    Stop(Vec<u8>),
    Revert(Vec<u8>),
}

fn jumpdest_map(code: &[u8]) -> Vec<bool> {
    let mut map = vec![false; code.len()];
    let mut i = 0;
    while i < code.len() {
        let op = code[i];
        if op == JUMPDEST {
            map[i] = true;
        }
        i += 1 + opcode::push_size(op);
    }
    map
}

fn words(len: usize) -> u64 {
    len.div_ceil(32) as u64
}

const SIGN: U256 = U256::from_limbs([0, 0, 0, 0x8000_0000_0000_0000]);

fn is_neg(x: U256) -> bool {
    x.bit(255)
}

fn neg(x: U256) -> U256 {
    (!x).wrapping_add(U256::from(1u8))
}

fn abs(x: U256) -> U256 {
    if is_neg(x) {
        neg(x)
    } else {
        x
    }
}

fn bool_word(b: bool) -> U256 {
    if b {
        U256::from(1u8)
    } else {
        U256::ZERO
    }
}

fn copy_padded(src: &[u8], offset: U256, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    let off = word_to_usize_saturating(offset);
    if off < src.len() {
        let n = (src.len() - off).min(len);
        out[..n].copy_from_slice(&src[off..off + n]);
    }
    out
}

impl Frame {
    fn charge(&mut self, cost: u64) -> Result<(), Halt> {
        if cost > self.gas {
            self.gas = 0;
            return Err(Halt::OutOfGas);
        }
        self.gas -= cost;
        Ok(())
    }

    /// Validates and expands memory for `[offset, offset+len)`; zero-length
    /// ranges never expand.
    fn expand(&mut self, offset: U256, len: U256) -> Result<(usize, usize), Halt> {
        if len.is_zero() {
            return Ok((0, 0));
        }
        let cap = U256::from(MEMORY_CAP);
        if offset > cap || len > cap {
            return Err(Halt::OutOfGas);
        }
        let (off, len) = (offset.to::<usize>(), len.to::<usize>());
        let end = off + len;
        if end > MEMORY_CAP {
            return Err(Halt::OutOfGas);
        }
        let new_words = words(end);
        let old_words = words(self.memory.len());
        if new_words > old_words {
            self.charge(new_words - old_words)?;
            self.memory.resize(new_words as usize * 32, 0);
        }
        Ok((off, len))
    }

    fn pop(&mut self) -> U256 {
        self.stack.pop().expect("arity checked before execution")
    }

    fn push(&mut self, v: U256) {
        self.stack.push(v);
    }
}

impl<'a> Machine<'a> {
    fn new(state: WorldState, block: &'a BlockEnv, origin: Address) -> Self {
        Machine {
            state,
            block,
            origin,
            steps: Vec::new(),
            internal_calls: Vec::new(),
            writes: Vec::new(),
            destructed: Vec::new(),
            stubbed: Vec::new(),
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot { state: self.state.clone(), writes: self.writes.len(), destructed: self.destructed.len() }
    }

    fn restore(&mut self, snap: Snapshot) {
        self.state = snap.state;
        self.writes.truncate(snap.writes);
        self.destructed.truncate(snap.destructed);
    }

    fn finish(mut self, world: &WorldState, res: FrameResult, gas_limit: u64) -> (WorldState, ExecutionTrace) {
        let mut receipt = Receipt {
            success: res.success,
            halt: res.halt,
            gas_used: gas_limit - res.gas_left,
            ..Default::default()
        };
        let post = if res.success {
            let destructed: BTreeSet<Address> = self.destructed.iter().copied().collect();
            for addr in destructed {
                self.state.accounts.remove(&addr);
            }
            receipt.output = res.output;
            receipt.storage_writes = std::mem::take(&mut self.writes);
            let addrs: BTreeSet<Address> =
                world.accounts.keys().chain(self.state.accounts.keys()).copied().collect();
            for address in addrs {
                let (before, after) = (world.balance(&address), self.state.balance(&address));
                if before != after {
                    receipt.balance_deltas.push(BalanceDelta { address, before, after });
                }
            }
            self.state
        } else {
            receipt.revert_data = res.output;
            world.clone()
        };
        let mut stubbed = self.stubbed;
        stubbed.sort_unstable();
        stubbed.dedup();
        let trace = ExecutionTrace {
            steps: self.steps,
            receipt,
            internal_calls: self.internal_calls,
            stubbed_precompiles: stubbed,
        };
        (post, trace)
    }

    /// Runs a CALL-family message with snapshot/restore around it.
    fn message(&mut self, msg: Message) -> Result<FrameResult, EvmError> {
        if msg.depth > MAX_CALL_DEPTH {
            return Ok(FrameResult::fail(Halt::CallDepth, msg.gas));
        }
        if !msg.transfer.is_zero() && self.state.balance(&msg.caller) < msg.transfer {
            return Ok(FrameResult::fail(Halt::InsufficientBalance, msg.gas));
        }
        let snap = self.snapshot();
        if !msg.transfer.is_zero() {
            self.state.account_mut(msg.caller).balance -= msg.transfer;
            self.state.account_mut(msg.target).balance += msg.transfer;
        }

        let res = if let Some(id) = precompile_id(&msg.code_address) {
            match run_precompile(id, &msg.data, msg.gas) {
                PrecompileOutcome::Success { output, gas } => {
                    FrameResult { success: true, halt: None, output, gas_left: msg.gas - gas }
                }
                PrecompileOutcome::OutOfGas => FrameResult::fail(Halt::OutOfGas, 0),
                PrecompileOutcome::Unsupported => {
                    self.stubbed.push(id);
                    FrameResult::fail(Halt::UnsupportedPrecompile, 0)
                }
            }
        } else {
            let code = self.state.code(&msg.code_address);
            if code.is_empty() {
                FrameResult { success: true, halt: None, output: Vec::new(), gas_left: msg.gas }
            } else {
                let frame = Frame {
                    jumpdests: jumpdest_map(&code),
                    code,
                    code_address: msg.code_address,
                    address: msg.target,
                    caller: msg.caller,
                    value: msg.value,
                    calldata: msg.data,
                    gas: msg.gas,
                    is_static: msg.is_static,
                    depth: msg.depth,
                    stack: Vec::new(),
                    memory: Vec::new(),
                    returndata: Vec::new(),
                    pc: 0,
                };
                self.run(frame)?
            }
        };
        if !res.success {
            self.restore(snap);
        }
        Ok(res)
    }

    /// CREATE/CREATE2 (or a creation transaction when `depth == 0`).
    fn create(
        &mut self,
        creator: Address,
        value: U256,
        init_code: Vec<u8>,
        salt: Option<U256>,
        gas: u64,
        depth: usize,
    ) -> Result<(FrameResult, Option<Address>), EvmError> {
        if depth > MAX_CALL_DEPTH {
            return Ok((FrameResult::fail(Halt::CallDepth, gas), None));
        }
        if self.state.balance(&creator) < value {
            return Ok((FrameResult::fail(Halt::InsufficientBalance, gas), None));
        }
        let nonce = self.state.get(&creator).map(|a| a.nonce).unwrap_or(0);
        let addr = match salt {
            Some(salt) => create2_address(creator, salt, &init_code),
            None => create_address(creator, nonce),
        };
        self.state.account_mut(creator).nonce = nonce + 1;
        if let Some(existing) = self.state.get(&addr) {
            if !existing.code.is_empty() || existing.nonce > 0 {
                return Ok((FrameResult::fail(Halt::CreateCollision, 0), None));
            }
        }
        let snap = self.snapshot();
        {
            self.state.account_mut(creator).balance -= value;
            let acct = self.state.account_mut(addr);
            acct.balance += value;
            acct.nonce = 1;
        }
        let code = Arc::new(init_code);
        let frame = Frame {
            jumpdests: jumpdest_map(&code),
            code,
            code_address: addr,
            address: addr,
            caller: creator,
            value,
            calldata: Vec::new(),
            gas,
            is_static: false,
            depth,
            stack: Vec::new(),
            memory: Vec::new(),
            returndata: Vec::new(),
            pc: 0,
        };
        let mut res = self.run(frame)?;
        if res.success {
            let deposit = 200 * res.output.len() as u64;
            if deposit > res.gas_left || res.output.first() == Some(&0xef) || res.output.len() > 0x6000 {
                res = FrameResult::fail(Halt::OutOfGas, 0);
            } else {
                res.gas_left -= deposit;
                self.state.account_mut(addr).code = Arc::new(std::mem::take(&mut res.output));
            }
        }
        if !res.success {
            self.restore(snap);
            return Ok((res, None));
        }
        Ok((res, Some(addr)))
    }

    fn run(&mut self, mut f: Frame) -> Result<FrameResult, EvmError> {
        loop {
            let op = f.code.get(f.pc).copied().unwrap_or(STOP);
            let Some((n_in, n_out)) = opcode::arity(op) else {
                return Err(EvmError::UnsupportedOpcode { opcode: op, pc: f.pc, address: f.code_address });
            };
            if f.stack.len() < n_in {
                return Ok(FrameResult::fail(Halt::StackUnderflow, 0));
            }
            if f.stack.len() - n_in + n_out > MAX_STACK {
                return Ok(FrameResult::fail(Halt::StackOverflow, 0));
            }
            if f.gas == 0 {
                return Ok(FrameResult::fail(Halt::OutOfGas, 0));
            }
            f.gas -= 1;
            let idx = self.steps.len();
            let depth_before = f.stack.len();
            self.steps.push(TraceStep {
                frame_depth: f.depth,
                code_address: f.code_address,
                context_address: f.address,
                pc: f.pc,
                opcode: op,
                stack_depth: depth_before,
                stack_inputs: f.stack.iter().rev().take(n_in).copied().collect(),
                stack_outputs: Vec::new(),
                memory_reads: Vec::new(),
                memory_writes: Vec::new(),
                call: None,
            });
            let flow = match self.exec(&mut f, op, idx) {
                Ok(flow) => flow,
                Err(Fault::Tool(e)) => return Err(e),
                Err(Fault::Halt(h)) => {
                    self.steps.truncate(idx);
                    let left = if h == Halt::Revert { f.gas } else { 0 };
                    return Ok(FrameResult::fail(h, left));
                }
            };
            debug_assert_eq!(f.stack.len(), depth_before - n_in + n_out);
            let outs = f.stack[f.stack.len() - n_out..].to_vec();
            self.steps[idx].stack_outputs = outs;
            match flow {
                Flow::Continue => f.pc += 1 + opcode::push_size(op),
                Flow::Jump(dest) => f.pc = dest,
                Flow::Stop(output) => {
                    return Ok(FrameResult { success: true, halt: None, output, gas_left: f.gas });
                }
                Flow::Revert(output) => {
                    return Ok(FrameResult { success: false, halt: Some(Halt::Revert), output, gas_left: f.gas });
                }
            }
        }
    }

    fn read_mem(&mut self, f: &Frame, idx: usize, off: usize, len: usize) -> Vec<u8> {
        if len == 0 {
            return Vec::new();
        }
        let data = f.memory[off..off + len].to_vec();
        self.steps[idx].memory_reads.push(MemAccess { offset: off, data: data.clone() });
        data
    }

    fn write_mem(&mut self, f: &mut Frame, idx: usize, off: usize, data: Vec<u8>) {
        if data.is_empty() {
            return;
        }
        f.memory[off..off + data.len()].copy_from_slice(&data);
        self.steps[idx].memory_writes.push(MemAccess { offset: off, data });
    }

    fn exec(&mut self, f: &mut Frame, op: u8, idx: usize) -> Result<Flow, Fault> {
        match op {
            STOP => return Ok(Flow::Stop(Vec::new())),
            ADD => {
                let (a, b) = (f.pop(), f.pop());
                f.push(a.wrapping_add(b));
            }
            MUL => {
                let (a, b) = (f.pop(), f.pop());
                f.push(a.wrapping_mul(b));
            }
            SUB => {
                let (a, b) = (f.pop(), f.pop());
                f.push(a.wrapping_sub(b));
            }
            DIV => {
                let (a, b) = (f.pop(), f.pop());
                f.push(a.checked_div(b).unwrap_or(U256::ZERO));
            }
            SDIV => {
                let (a, b) = (f.pop(), f.pop());
                let r = if b.is_zero() {
                    U256::ZERO
                } else {
                    let q = abs(a) / abs(b);
                    if is_neg(a) != is_neg(b) {
                        neg(q)
                    } else {
                        q
                    }
                };
                f.push(r);
            }
            MOD => {
                let (a, b) = (f.pop(), f.pop());
                f.push(a.checked_rem(b).unwrap_or(U256::ZERO));
            }
            SMOD => {
                let (a, b) = (f.pop(), f.pop());
                let r = if b.is_zero() {
                    U256::ZERO
                } else {
                    let m = abs(a) % abs(b);
                    if is_neg(a) {
                        neg(m)
                    } else {
                        m
                    }
                };
                f.push(r);
            }
            ADDMOD => {
                let (a, b, n) = (f.pop(), f.pop(), f.pop());
                f.push(a.add_mod(b, n));
            }
            MULMOD => {
                let (a, b, n) = (f.pop(), f.pop(), f.pop());
                f.push(a.mul_mod(b, n));
            }
            EXP => {
                let (a, e) = (f.pop(), f.pop());
                f.charge(10 + 10 * (e.bit_len() as u64).div_ceil(8))?;
                f.push(a.wrapping_pow(e));
            }
            SIGNEXTEND => {
                let (b, x) = (f.pop(), f.pop());
                let r = if b < U256::from(31u8) {
                    let bit = b.to::<usize>() * 8 + 7;
                    let mask = (U256::from(1u8) << (bit + 1)).wrapping_sub(U256::from(1u8));
                    if x.bit(bit) {
                        x | !mask
                    } else {
                        x & mask
                    }
                } else {
                    x
                };
                f.push(r);
            }
            LT => {
                let (a, b) = (f.pop(), f.pop());
                f.push(bool_word(a < b));
            }
            GT => {
                let (a, b) = (f.pop(), f.pop());
                f.push(bool_word(a > b));
            }
            SLT => {
                let (a, b) = (f.pop(), f.pop());
                f.push(bool_word((a ^ SIGN) < (b ^ SIGN)));
            }
            SGT => {
                let (a, b) = (f.pop(), f.pop());
                f.push(bool_word((a ^ SIGN) > (b ^ SIGN)));
            }
            EQ => {
                let (a, b) = (f.pop(), f.pop());
                f.push(bool_word(a == b));
            }
            ISZERO => {
                let a = f.pop();
                f.push(bool_word(a.is_zero()));
            }
            AND => {
                let (a, b) = (f.pop(), f.pop());
                f.push(a & b);
            }
            OR => {
                let (a, b) = (f.pop(), f.pop());
                f.push(a | b);
            }
            XOR => {
                let (a, b) = (f.pop(), f.pop());
                f.push(a ^ b);
            }
            NOT => {
                let a = f.pop();
                f.push(!a);
            }
            BYTE => {
                let (i, x) = (f.pop(), f.pop());
                let r = if i < U256::from(32u8) {
                    U256::from(x.to_be_bytes::<32>()[i.to::<usize>()])
                } else {
                    U256::ZERO
                };
                f.push(r);
            }
            SHL => {
                let (s, x) = (f.pop(), f.pop());
                f.push(if s < U256::from(256u16) { x << s.to::<usize>() } else { U256::ZERO });
            }
            SHR => {
                let (s, x) = (f.pop(), f.pop());
                f.push(if s < U256::from(256u16) { x >> s.to::<usize>() } else { U256::ZERO });
            }
            SAR => {
                let (s, x) = (f.pop(), f.pop());
                let r = if s < U256::from(256u16) {
                    x.arithmetic_shr(s.to::<usize>())
                } else if is_neg(x) {
                    U256::MAX
                } else {
                    U256::ZERO
                };
                f.push(r);
            }
            KECCAK256 => {
                let (off, len) = (f.pop(), f.pop());
                let (off, len) = f.expand(off, len)?;
                f.charge(30 + 6 * words(len))?;
                let data = self.read_mem(f, idx, off, len);
                f.push(U256::from_be_bytes(keccak256(&data)));
            }
            ADDRESS => f.push(f.address.to_word()),
            BALANCE => {
                let a = Address::from_word(f.pop());
                f.charge(100)?;
                f.push(self.state.balance(&a));
            }
            ORIGIN => f.push(self.origin.to_word()),
            CALLER => f.push(f.caller.to_word()),
            CALLVALUE => f.push(f.value),
            CALLDATALOAD => {
                let off = f.pop();
                let bytes = copy_padded(&f.calldata, off, 32);
                f.push(U256::from_be_slice(&bytes));
            }
            CALLDATASIZE => f.push(U256::from(f.calldata.len())),
            CALLDATACOPY | CODECOPY | RETURNDATACOPY => {
                let (dst, src, len) = (f.pop(), f.pop(), f.pop());
                if op == RETURNDATACOPY {
                    let end = src.checked_add(len);
                    if end.is_none_or(|e| e > U256::from(f.returndata.len())) {
                        return Err(Halt::ReturnDataOutOfBounds.into());
                    }
                }
                let (dst, len) = f.expand(dst, len)?;
                f.charge(words(len))?;
                let data = match op {
                    CALLDATACOPY => copy_padded(&f.calldata, src, len),
                    CODECOPY => copy_padded(&f.code, src, len),
                    _ => copy_padded(&f.returndata, src, len),
                };
                self.write_mem(f, idx, dst, data);
            }
            CODESIZE => f.push(U256::from(f.code.len())),
            GASPRICE => f.push(U256::ZERO),
            EXTCODESIZE => {
                let a = Address::from_word(f.pop());
                f.charge(100)?;
                f.push(U256::from(self.state.code(&a).len()));
            }
            EXTCODECOPY => {
                let (a, dst, src, len) = (Address::from_word(f.pop()), f.pop(), f.pop(), f.pop());
                let (dst, len) = f.expand(dst, len)?;
                f.charge(100 + words(len))?;
                let data = copy_padded(&self.state.code(&a), src, len);
                self.write_mem(f, idx, dst, data);
            }
            RETURNDATASIZE => f.push(U256::from(f.returndata.len())),
            EXTCODEHASH => {
                let a = Address::from_word(f.pop());
                f.charge(100)?;
                let h = match self.state.get(&a) {
                    Some(acct) if !acct.is_empty() => U256::from_be_bytes(keccak256(&acct.code)),
                    _ => U256::ZERO,
                };
                f.push(h);
            }
            BLOCKHASH => {
                let n = f.pop();
                f.charge(20)?;
                f.push(self.block.block_hash(n));
            }
            COINBASE => f.push(self.block.coinbase.to_word()),
            TIMESTAMP => f.push(U256::from(self.block.timestamp)),
            NUMBER => f.push(U256::from(self.block.number)),
            PREVRANDAO => f.push(U256::from_be_bytes(self.block.prevrandao)),
            GASLIMIT => f.push(U256::from(self.block.gaslimit)),
            CHAINID => f.push(U256::from(self.block.chainid)),
            SELFBALANCE => f.push(self.state.balance(&f.address)),
            BASEFEE => f.push(self.block.basefee),
            POP => {
                f.pop();
            }
            MLOAD => {
                let off = f.pop();
                let (off, _) = f.expand(off, U256::from(32u8))?;
                let data = self.read_mem(f, idx, off, 32);
                f.push(U256::from_be_slice(&data));
            }
            MSTORE => {
                let (off, v) = (f.pop(), f.pop());
                let (off, _) = f.expand(off, U256::from(32u8))?;
                self.write_mem(f, idx, off, v.to_be_bytes::<32>().to_vec());
            }
            MSTORE8 => {
                let (off, v) = (f.pop(), f.pop());
                let (off, _) = f.expand(off, U256::from(1u8))?;
                self.write_mem(f, idx, off, vec![v.to_be_bytes::<32>()[31]]);
            }
            SLOAD => {
                let key = f.pop();
                f.charge(100)?;
                f.push(self.state.storage_at(&f.address, key));
            }
            SSTORE => {
                if f.is_static {
                    return Err(Halt::StaticViolation.into());
                }
                // EIP-2200 sentry: no writes on a bare call stipend
                if f.gas <= 2300 {
                    return Err(Halt::OutOfGas.into());
                }
                let (key, new) = (f.pop(), f.pop());
                f.charge(100)?;
                let old = self.state.storage_at(&f.address, key);
                self.state.set_storage(f.address, key, new);
                self.writes.push(StorageWrite { address: f.address, key, old, new });
            }
            JUMP => {
                let dest = f.pop();
                return Ok(Flow::Jump(self.check_jump(f, dest)?));
            }
            JUMPI => {
                let (dest, cond) = (f.pop(), f.pop());
                if !cond.is_zero() {
                    return Ok(Flow::Jump(self.check_jump(f, dest)?));
                }
            }
            PC => f.push(U256::from(f.pc)),
            MSIZE => f.push(U256::from(f.memory.len())),
            GAS => f.push(U256::from(f.gas)),
            JUMPDEST => {}
            PUSH0..=PUSH32 => {
                let n = opcode::push_size(op);
                let start = (f.pc + 1).min(f.code.len());
                let end = (f.pc + 1 + n).min(f.code.len());
                let mut buf = [0u8; 32];
                let avail = &f.code[start..end];
                // immediates running past the code end are zero-filled on the right
                buf[32 - n..32 - n + avail.len()].copy_from_slice(avail);
                f.push(U256::from_be_bytes(buf));
            }
            DUP1..=DUP16 => {
                let n = (op - DUP1 + 1) as usize;
                let v = f.stack[f.stack.len() - n];
                f.push(v);
            }
            SWAP1..=SWAP16 => {
                let n = (op - SWAP1 + 1) as usize;
                let top = f.stack.len() - 1;
                f.stack.swap(top, top - n);
            }
            LOG0..=LOG4 => {
                if f.is_static {
                    return Err(Halt::StaticViolation.into());
                }
                let (off, len) = (f.pop(), f.pop());
                for _ in 0..(op - LOG0) {
                    f.pop();
                }
                let (off, len) = f.expand(off, len)?;
                f.charge(375 + 8 * len as u64)?;
                self.read_mem(f, idx, off, len);
            }
            CREATE | CREATE2 => return self.exec_create(f, op, idx),
            CALL | CALLCODE | DELEGATECALL | STATICCALL => return self.exec_call(f, op, idx),
            RETURN | REVERT => {
                let (off, len) = (f.pop(), f.pop());
                let (off, len) = f.expand(off, len)?;
                let data = self.read_mem(f, idx, off, len);
                return Ok(if op == RETURN { Flow::Stop(data) } else { Flow::Revert(data) });
            }
            INVALID => return Err(Halt::InvalidOpcode.into()),
            SELFDESTRUCT => {
                if f.is_static {
                    return Err(Halt::StaticViolation.into());
                }
                let beneficiary = Address::from_word(f.pop());
                f.charge(5000)?;
                let bal = self.state.balance(&f.address);
                self.state.account_mut(f.address).balance = U256::ZERO;
                self.state.account_mut(beneficiary).balance += bal;
                self.destructed.push(f.address);
                return Ok(Flow::Stop(Vec::new()));
            }
            _ => unreachable!("arity table and dispatch disagree on 0x{op:02x}"),
        }
        Ok(Flow::Continue)
    }

    fn check_jump(&self, f: &Frame, dest: U256) -> Result<usize, Halt> {
        let d = word_to_usize_saturating(dest);
        if d < f.jumpdests.len() && f.jumpdests[d] {
            Ok(d)
        } else {
            Err(Halt::InvalidJump)
        }
    }

    fn exec_create(&mut self, f: &mut Frame, op: u8, idx: usize) -> Result<Flow, Fault> {
        if f.is_static {
            return Err(Halt::StaticViolation.into());
        }
        let (value, off, len) = (f.pop(), f.pop(), f.pop());
        let salt = if op == CREATE2 { Some(f.pop()) } else { None };
        let (off, len) = f.expand(off, len)?;
        f.charge(32000 + if salt.is_some() { 6 * words(len) } else { 0 })?;
        let init = self.read_mem(f, idx, off, len);
        let gas = f.gas - f.gas / 64;
        f.gas -= gas;
        let before = self.steps.len();
        let (res, addr) =
            self.create(f.address, value, init.clone(), salt, gas, f.depth + 1).map_err(Fault::Tool)?;
        f.gas += res.gas_left;
        f.returndata = if res.success { Vec::new() } else { res.output.clone() };
        let target = addr.unwrap_or(Address::ZERO);
        self.steps[idx].call = Some(CallInfo {
            kind: CallKind::from_opcode(op).expect("create opcode"),
            target,
            value,
            args_offset: off,
            args_len: len,
            ret_offset: 0,
            ret_len: 0,
            precompile: None,
            entered: self.steps.len() > before,
            success: res.success,
            return_data: f.returndata.clone(),
        });
        self.internal_calls.push(InternalCall {
            step_index: idx,
            caller: f.address,
            callee: target,
            calldata: init,
            return_data: f.returndata.clone(),
            kind: CallKind::from_opcode(op).expect("create opcode"),
            success: res.success,
        });
        f.push(if res.success { target.to_word() } else { U256::ZERO });
        Ok(Flow::Continue)
    }

    fn exec_call(&mut self, f: &mut Frame, op: u8, idx: usize) -> Result<Flow, Fault> {
        let kind = CallKind::from_opcode(op).expect("call opcode");
        let gas_req = f.pop();
        let to = Address::from_word(f.pop());
        let value = if matches!(op, CALL | CALLCODE) { f.pop() } else { U256::ZERO };
        let (a_off, a_len, r_off, r_len) = (f.pop(), f.pop(), f.pop(), f.pop());
        if op == CALL && f.is_static && !value.is_zero() {
            return Err(Halt::StaticViolation.into());
        }
        let (a_off, a_len) = f.expand(a_off, a_len)?;
        let (r_off, r_len) = f.expand(r_off, r_len)?;
        f.charge(100 + if value.is_zero() { 0 } else { 6700 })?;
        let data = self.read_mem(f, idx, a_off, a_len);

        let cap = f.gas - f.gas / 64;
        let gas = if gas_req > U256::from(cap) { cap } else { gas_req.to::<u64>() };
        f.gas -= gas;
        let stipend = if value.is_zero() { 0 } else { 2300 };

        let (target, code_address, caller, apparent, transfer, is_static) = match op {
            CALL => (to, to, f.address, value, value, f.is_static),
            CALLCODE => (f.address, to, f.address, value, value, f.is_static),
            DELEGATECALL => (f.address, to, f.caller, f.value, U256::ZERO, f.is_static),
            _ => (to, to, f.address, U256::ZERO, U256::ZERO, true),
        };
        let before = self.steps.len();
        let res = self
            .message(Message {
                caller,
                target,
                code_address,
                value: apparent,
                transfer,
                data: data.clone(),
                gas: gas + stipend,
                is_static,
                depth: f.depth + 1,
            })
            .map_err(Fault::Tool)?;
        f.gas += res.gas_left;
        f.returndata = res.output;
        let n = r_len.min(f.returndata.len());
        let out = f.returndata[..n].to_vec();
        self.write_mem(f, idx, r_off, out);

        self.steps[idx].call = Some(CallInfo {
            kind,
            target: to,
            value,
            args_offset: a_off,
            args_len: a_len,
            ret_offset: r_off,
            ret_len: r_len,
            precompile: precompile_id(&to),
            entered: self.steps.len() > before,
            success: res.success,
            return_data: f.returndata.clone(),
        });
        self.internal_calls.push(InternalCall {
            step_index: idx,
            caller: f.address,
            callee: to,
            calldata: data,
            return_data: f.returndata.clone(),
            kind,
            success: res.success,
        });
        f.push(bool_word(res.success));
        Ok(Flow::Continue)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evm::state::Account;

    fn run(code: &str, data: Vec<u8>) -> (WorldState, ExecutionTrace) {
        let mut world = WorldState::new();
        let to = Address::from_low_u64(0x1000);
        world.insert(to, Account::with_code(hex::decode(code).unwrap()));
        let tx = TransactionEnv::call(Address::from_low_u64(0xaa), to, data);
        execute_transaction(&world, &BlockEnv::default(), &tx).unwrap()
    }

    #[test]
    fn sstore_42() {
        let (post, trace) = run("602a60005500", vec![]);
        assert!(trace.receipt.success);
        assert_eq!(post.storage_at(&Address::from_low_u64(0x1000), U256::ZERO), U256::from(42u8));
        assert_eq!(trace.receipt.storage_writes.len(), 1);
        assert_eq!(trace.steps.len(), 4);
    }

    #[test]
    fn top_level_callvalue() {
        let mut world = WorldState::new();
        let (from, to) = (Address::from_low_u64(0xaa), Address::from_low_u64(0x1000));
        world.insert(to, Account::with_code(hex::decode("3460005500").unwrap()));
        world.account_mut(from).balance = U256::from(10u8);
        let mut tx = TransactionEnv::call(from, to, vec![]);
        tx.value = U256::from(7u8);
        let (post, trace) = execute_transaction(&world, &BlockEnv::default(), &tx).unwrap();
        assert!(trace.receipt.success);
        assert_eq!(post.storage_at(&to, U256::ZERO), U256::from(7u8));
        assert_eq!(post.balance(&to), U256::from(7u8));
    }

    #[test]
    fn revert_leaves_state() {
        let (post, trace) = run("602a60005560006000fd", vec![]);
        assert!(!trace.receipt.success);
        assert_eq!(post.storage_at(&Address::from_low_u64(0x1000), U256::ZERO), U256::ZERO);
        assert!(trace.receipt.storage_writes.is_empty());
    }

    #[test]
    fn bad_jump_reverts_frame() {
        let (_, trace) = run("600356", vec![]);
        assert!(!trace.receipt.success);
        assert_eq!(trace.receipt.halt, Some(Halt::InvalidJump));
        // the faulting JUMP is not recorded
        assert_eq!(trace.steps.len(), 1);
    }

    #[test]
    fn unsupported_opcode_is_tool_error() {
        let mut world = WorldState::new();
        let to = Address::from_low_u64(0x1000);
        world.insert(to, Account::with_code(vec![0x60, 0x00, 0x5c]));
        let tx = TransactionEnv::call(Address::from_low_u64(0xaa), to, vec![]);
        let err = execute_transaction(&world, &BlockEnv::default(), &tx).unwrap_err();
        assert_eq!(err, EvmError::UnsupportedOpcode { opcode: 0x5c, pc: 2, address: to });
        assert!(err.to_string().contains("pc 2"));
    }

    #[test]
    fn signed_arithmetic() {
        // SDIV(-8, 2) == -4 ; SAR(-8, 1) == -4 ; SIGNEXTEND(0, 0xff) == -1
        let m8 = neg(U256::from(8u8));
        assert_eq!(abs(m8), U256::from(8u8));
        let m8 = format!("7f{}f8", "ff".repeat(31));
        let code = format!("6002{m8}05600055{m8}60011d60015560ff60000b60025500");
        let (post, _) = run(&code, vec![]);
        let a = Address::from_low_u64(0x1000);
        assert_eq!(post.storage_at(&a, U256::ZERO), neg(U256::from(4u8)));
        assert_eq!(post.storage_at(&a, U256::from(1u8)), neg(U256::from(4u8)));
        assert_eq!(post.storage_at(&a, U256::from(2u8)), U256::MAX);
    }

    #[test]
    fn create_address_vector() {
        // widely published vector: sender 0x6ac7ea33f8831ea9dcc53393aaa88b25a785dbf0
        let s: Address = "0x6ac7ea33f8831ea9dcc53393aaa88b25a785dbf0".parse().unwrap();
        assert_eq!(create_address(s, 0).to_string(), "0xcd234a471b72ba2f1ccf0a70fcaba648a5eecd8d");
        assert_eq!(create_address(s, 1).to_string(), "0x343c43a37d37dff08ae8c4a11544c718abb4fcf8");
    }

    #[test]
    fn inner_revert_isolated() {
        // callee: SSTORE(0, 1) then REVERT
        let mut world = WorldState::new();
        let outer = Address::from_low_u64(0x1000);
        let inner = Address::from_low_u64(0x2000);
        world.insert(inner, Account::with_code(hex::decode("600160005560006000fd").unwrap()));
        // CALL(gas, inner, 0, 0, 0, 0, 0); SSTORE(1, result)
        let code = "60006000600060006000612000 5a f1 600155 00".replace(' ', "");
        world.insert(outer, Account::with_code(hex::decode(code).unwrap()));
        let tx = TransactionEnv::call(Address::from_low_u64(0xaa), outer, vec![]);
        let (post, trace) = execute_transaction(&world, &BlockEnv::default(), &tx).unwrap();
        assert!(trace.receipt.success);
        assert_eq!(post.storage_at(&inner, U256::ZERO), U256::ZERO);
        assert_eq!(trace.receipt.storage_writes.len(), 1);
        assert_eq!(trace.receipt.storage_writes[0].address, outer);
        let call = trace.steps.iter().find(|s| s.opcode == CALL).unwrap().call.as_ref().unwrap();
        assert!(call.entered && !call.success);
    }
}
