//! Execution trace records emitted by the interpreter.

use super::primitives::{Address, U256};

/// A contiguous memory access performed by one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemAccess {
    pub offset: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Call,
    CallCode,
    DelegateCall,
    StaticCall,
    Create,
    Create2,
}

impl CallKind {
    pub fn from_opcode(op: u8) -> Option<Self> {
        use super::opcode::*;
        Some(match op {
            CALL => CallKind::Call,
            CALLCODE => CallKind::CallCode,
            DELEGATECALL => CallKind::DelegateCall,
            STATICCALL => CallKind::StaticCall,
            CREATE => CallKind::Create,
            CREATE2 => CallKind::Create2,
            _ => return None,
        })
    }
}

/// Why a frame stopped without success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Halt {
    Revert,
    OutOfGas,
    InvalidJump,
    InvalidOpcode,
    StackUnderflow,
    StackOverflow,
    StaticViolation,
    CallDepth,
    InsufficientBalance,
    ReturnDataOutOfBounds,
    CreateCollision,
    PrecompileFailure,
    UnsupportedPrecompile,
}

/// Details of a CALL-family or CREATE step, filled in once the callee returns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallInfo {
    pub kind: CallKind,
    /// Address whose code runs (the created address for CREATE).
    pub target: Address,
    pub value: U256,
    pub args_offset: usize,
    pub args_len: usize,
    pub ret_offset: usize,
    pub ret_len: usize,
    /// Precompile id (1..=9) when the target is a precompile.
    pub precompile: Option<u8>,
    /// True when the callee frame produced trace steps.
    pub entered: bool,
    pub success: bool,
    pub return_data: Vec<u8>,
}

/// One executed instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceStep {
    pub frame_depth: usize,
    /// Account whose code is executing.
    pub code_address: Address,
    /// Account whose storage and balance the frame acts on (ADDRESS).
    pub context_address: Address,
    pub pc: usize,
    pub opcode: u8,
    /// Machine stack depth before the instruction.
    pub stack_depth: usize,
    /// Popped operands, top of stack first.
    pub stack_inputs: Vec<U256>,
    /// Pushed results, in push order (last element ends on top).
    pub stack_outputs: Vec<U256>,
    pub memory_reads: Vec<MemAccess>,
    pub memory_writes: Vec<MemAccess>,
    pub call: Option<CallInfo>,
}

impl TraceStep {
    pub fn input(&self, i: usize) -> U256 {
        self.stack_inputs.get(i).copied().unwrap_or(U256::ZERO)
    }

    pub fn output(&self) -> Option<U256> {
        self.stack_outputs.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StorageWrite {
    pub address: Address,
    #[serde(with = "super::primitives::hex_u256")]
    pub key: U256,
    #[serde(with = "super::primitives::hex_u256")]
    pub old: U256,
    #[serde(with = "super::primitives::hex_u256")]
    pub new: U256,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceDelta {
    pub address: Address,
    pub before: U256,
    pub after: U256,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Receipt {
    pub success: bool,
    pub halt: Option<Halt>,
    /// RETURN data on success.
    pub output: Vec<u8>,
    pub revert_data: Vec<u8>,
    /// Committed writes in execution order.
    pub storage_writes: Vec<StorageWrite>,
    pub balance_deltas: Vec<BalanceDelta>,
    pub gas_used: u64,
}

impl Receipt {
    /// Writes that actually changed a slot of `address`.
    pub fn changed_slots(&self, address: &Address) -> impl Iterator<Item = &StorageWrite> {
        let address = *address;
        self.storage_writes.iter().filter(move |w| w.address == address && w.old != w.new)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InternalCall {
    pub step_index: usize,
    pub caller: Address,
    pub callee: Address,
    pub calldata: Vec<u8>,
    pub return_data: Vec<u8>,
    pub kind: CallKind,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExecutionTrace {
    pub steps: Vec<TraceStep>,
    pub receipt: Receipt,
    pub internal_calls: Vec<InternalCall>,
    /// Stubbed precompiles hit during execution (ids 5..=9).
    pub stubbed_precompiles: Vec<u8>,
}

impl TraceStep {
    /// The crypto API this step invokes: KECCAK256, or a CALL-family step
    /// into one of the crypto precompiles (IDENTITY excluded).
    pub fn crypto_api(&self) -> Option<super::CryptoApi> {
        if self.opcode == super::opcode::KECCAK256 {
            return Some(super::CryptoApi::Keccak256);
        }
        let call = self.call.as_ref()?;
        if !matches!(call.kind, CallKind::Call | CallKind::CallCode | CallKind::DelegateCall | CallKind::StaticCall) {
            return None;
        }
        super::CryptoApi::from_precompile(call.precompile?)
    }
}

impl ExecutionTrace {
    /// Indices of crypto-call steps in execution order; position in this list
    /// is the call's sequence number within the trace.
    pub fn crypto_step_indices(&self) -> Vec<usize> {
        self.steps.iter().enumerate().filter(|(_, s)| s.crypto_api().is_some()).map(|(i, _)| i).collect()
    }
}
