//! Instrumented EVM: state model, interpreter, precompiles, and traces.

pub mod interpreter;
pub mod opcode;
pub mod precompiles;
pub mod primitives;
pub mod state;
pub mod trace;

pub use interpreter::{create2_address, create_address, execute_create, execute_transaction, EvmError};
pub use precompiles::{
    ecrecover, keccak256, precompile_ecrecover, precompile_hash, precompile_id, sha256, CryptoApi, HashId,
};
pub use primitives::{Address, U256};
pub use state::{Account, BlockEnv, TransactionEnv, WorldState, DEFAULT_GAS_LIMIT};
pub use trace::*;
