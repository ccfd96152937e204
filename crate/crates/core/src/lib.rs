//! Crypto-defect analysis of EVM contracts: an instrumented interpreter,
//! a taint engine over its traces, crypto-semantics extraction, fixture
//! replay, attack-sequence fuzzing, and per-defect oracles.

pub mod evm;
pub mod taint;
pub mod semantics;
pub mod replay;
pub mod fuzz;
pub mod oracles;
pub mod analysis;
