//! World state, block environment, and transaction environment.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::primitives::{Address, U256};

/// One account. Storage is kept canonical: zero-valued slots are absent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Account {
    pub balance: U256,
    pub nonce: u64,
    pub code: Arc<Vec<u8>>,
    pub storage: BTreeMap<U256, U256>,
}

impl Account {
    pub fn with_code(code: Vec<u8>) -> Self {
        Account { code: Arc::new(code), ..Default::default() }
    }

    pub fn with_balance(balance: U256) -> Self {
        Account { balance, ..Default::default() }
    }

    pub fn storage_at(&self, key: U256) -> U256 {
        self.storage.get(&key).copied().unwrap_or(U256::ZERO)
    }

    pub fn set_storage(&mut self, key: U256, value: U256) {
        if value.is_zero() {
            self.storage.remove(&key);
        } else {
            self.storage.insert(key, value);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.balance.is_zero() && self.nonce == 0 && self.code.is_empty()
    }
}

/// Value-semantic snapshot of all accounts. Cloning is a snapshot; equality
/// is structural.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WorldState {
    pub accounts: BTreeMap<Address, Account>,
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, addr: &Address) -> Option<&Account> {
        self.accounts.get(addr)
    }

    pub fn account_mut(&mut self, addr: Address) -> &mut Account {
        self.accounts.entry(addr).or_default()
    }

    pub fn insert(&mut self, addr: Address, account: Account) {
        self.accounts.insert(addr, account);
    }

    pub fn contains(&self, addr: &Address) -> bool {
        self.accounts.contains_key(addr)
    }

    pub fn balance(&self, addr: &Address) -> U256 {
        self.accounts.get(addr).map(|a| a.balance).unwrap_or(U256::ZERO)
    }

    pub fn code(&self, addr: &Address) -> Arc<Vec<u8>> {
        self.accounts.get(addr).map(|a| a.code.clone()).unwrap_or_default()
    }

    pub fn storage_at(&self, addr: &Address, key: U256) -> U256 {
        self.accounts.get(addr).map(|a| a.storage_at(key)).unwrap_or(U256::ZERO)
    }

    pub fn set_storage(&mut self, addr: Address, key: U256, value: U256) {
        self.account_mut(addr).set_storage(key, value);
    }

    /// True when every account's storage is in canonical form.
    pub fn is_canonical(&self) -> bool {
        self.accounts.values().all(|a| a.storage.values().all(|v| !v.is_zero()))
    }
}

/// Block attributes visible to contracts through the block opcodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockEnv {
    pub number: u64,
    pub timestamp: u64,
    pub coinbase: Address,
    pub prevrandao: [u8; 32],
    pub gaslimit: u64,
    pub chainid: u64,
    pub basefee: U256,
    /// Explicit BLOCKHASH answers; other heights fall back to a deterministic
    /// pseudo-hash.
    pub block_hashes: BTreeMap<u64, [u8; 32]>,
}

impl Default for BlockEnv {
    fn default() -> Self {
        BlockEnv {
            number: 1,
            timestamp: 1,
            coinbase: Address::ZERO,
            prevrandao: [0u8; 32],
            gaslimit: DEFAULT_GAS_LIMIT,
            chainid: 1,
            basefee: U256::ZERO,
            block_hashes: BTreeMap::new(),
        }
    }
}

impl BlockEnv {
    pub fn block_hash(&self, height: U256) -> U256 {
        let current = U256::from(self.number);
        if height >= current || current - height > U256::from(256u64) {
            return U256::ZERO;
        }
        let h = height.to::<u64>();
        match self.block_hashes.get(&h) {
            Some(hash) => U256::from_be_bytes(*hash),
            None => U256::from_be_bytes(super::keccak256(&height.to_be_bytes::<32>())),
        }
    }
}

pub const DEFAULT_GAS_LIMIT: u64 = 30_000_000;

/// A message call sent by an externally owned account.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransactionEnv {
    pub sender: Address,
    pub to: Address,
    pub value: U256,
    pub data: Vec<u8>,
    pub gas_limit: u64,
}

impl TransactionEnv {
    pub fn call(sender: Address, to: Address, data: Vec<u8>) -> Self {
        TransactionEnv { sender, to, value: U256::ZERO, data, gas_limit: DEFAULT_GAS_LIMIT }
    }

    /// First four calldata bytes, zero-padded for short calldata.
    pub fn selector(&self) -> [u8; 4] {
        let mut sel = [0u8; 4];
        let n = self.data.len().min(4);
        sel[..n].copy_from_slice(&self.data[..n]);
        sel
    }
}
