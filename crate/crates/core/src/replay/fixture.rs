//! Fixture files: a base world state, a block, historical transactions, and
//! ABIs. Every error names the JSON path at fault.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::evm::primitives::{parse_quantity, to_hex};
use crate::evm::{Account, Address, BlockEnv, TransactionEnv, WorldState, DEFAULT_GAS_LIMIT, U256};
use crate::semantics::abi::Abi;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FixtureError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("validation error at {path}: {message}")]
    Validation { path: String, message: String },
}

impl FixtureError {
    pub fn path(&self) -> &str {
        match self {
            FixtureError::Io { path, .. } | FixtureError::Parse { path, .. } | FixtureError::Validation { path, .. } => path,
        }
    }
}

fn parse_err(path: &str, message: impl Into<String>) -> FixtureError {
    FixtureError::Parse { path: path.to_string(), message: message.into() }
}

fn invalid(path: &str, message: impl Into<String>) -> FixtureError {
    FixtureError::Validation { path: path.to_string(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureTx {
    pub tx: TransactionEnv,
    /// Base block with this transaction's overrides applied.
    pub block: BlockEnv,
    /// Raw override object, kept for serialization.
    pub block_override: Option<Map<String, Value>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub accounts: WorldState,
    pub block: BlockEnv,
    pub transactions: Vec<FixtureTx>,
    pub abis: BTreeMap<Address, Abi>,
    pub abis_json: BTreeMap<Address, Value>,
}

const TOP_KEYS: &[&str] = &["accounts", "block", "transactions", "abis"];
const ACCOUNT_KEYS: &[&str] = &["balance", "nonce", "code", "storage"];
const BLOCK_KEYS: &[&str] = &["number", "timestamp", "coinbase", "prevrandao", "gaslimit", "chainid", "basefee", "blockhashes"];
const TX_KEYS: &[&str] = &["from", "to", "value", "data", "gasLimit", "block"];

fn check_keys(obj: &Map<String, Value>, allowed: &[&str], path: &str) -> Result<(), FixtureError> {
    for k in obj.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(parse_err(&format!("{path}.{k}"), "unknown key"));
        }
    }
    Ok(())
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, FixtureError> {
    v.as_object().ok_or_else(|| parse_err(path, "expected an object"))
}

fn as_str<'a>(v: &'a Value, path: &str) -> Result<&'a str, FixtureError> {
    v.as_str().ok_or_else(|| parse_err(path, "expected a string"))
}

fn hex_bytes(v: &Value, path: &str) -> Result<Vec<u8>, FixtureError> {
    let s = as_str(v, path)?;
    let body = s.strip_prefix("0x").ok_or_else(|| parse_err(path, "hex must start with 0x"))?;
    if body.len() % 2 == 1 {
        return Err(invalid(path, "odd-length hex"));
    }
    hex::decode(body).map_err(|e| parse_err(path, format!("invalid hex: {e}")))
}

fn quantity(v: &Value, path: &str) -> Result<U256, FixtureError> {
    match v {
        Value::Number(n) => n.as_u64().map(U256::from).ok_or_else(|| parse_err(path, "expected a non-negative integer")),
        Value::String(s) => parse_quantity(s).map_err(|e| parse_err(path, e)),
        _ => Err(parse_err(path, "expected an integer or hex string")),
    }
}

fn u64_field(v: &Value, path: &str) -> Result<u64, FixtureError> {
    let q = quantity(v, path)?;
    if q > U256::from(u64::MAX) {
        return Err(invalid(path, "value exceeds 64 bits"));
    }
    Ok(q.to::<u64>())
}

fn address(v: &Value, path: &str) -> Result<Address, FixtureError> {
    as_str(v, path)?.parse().map_err(|e| parse_err(path, format!("{e}")))
}

fn word32(v: &Value, path: &str) -> Result<[u8; 32], FixtureError> {
    let q = quantity(v, path)?;
    Ok(q.to_be_bytes::<32>())
}

fn apply_block(block: &mut BlockEnv, obj: &Map<String, Value>, path: &str) -> Result<(), FixtureError> {
    check_keys(obj, BLOCK_KEYS, path)?;
    for (k, v) in obj {
        let p = format!("{path}.{k}");
        match k.as_str() {
            "number" => block.number = u64_field(v, &p)?,
            "timestamp" => block.timestamp = u64_field(v, &p)?,
            "coinbase" => block.coinbase = address(v, &p)?,
            "prevrandao" => block.prevrandao = word32(v, &p)?,
            "gaslimit" => block.gaslimit = u64_field(v, &p)?,
            "chainid" => block.chainid = u64_field(v, &p)?,
            "basefee" => block.basefee = quantity(v, &p)?,
            "blockhashes" => {
                for (h, hash) in as_object(v, &p)? {
                    let hp = format!("{p}.{h}");
                    let height = parse_quantity(h).map_err(|e| parse_err(&hp, e))?;
                    if height > U256::from(u64::MAX) {
                        return Err(invalid(&hp, "height exceeds 64 bits"));
                    }
                    block.block_hashes.insert(height.to::<u64>(), word32(hash, &hp)?);
                }
            }
            _ => unreachable!("keys checked"),
        }
    }
    Ok(())
}

impl Fixture {
    pub fn load(path: &Path) -> Result<Fixture, FixtureError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FixtureError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Fixture::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Fixture, FixtureError> {
        let v: Value = serde_json::from_str(text).map_err(|e| parse_err("$", e.to_string()))?;
        Fixture::from_json(&v)
    }

    pub fn from_json(v: &Value) -> Result<Fixture, FixtureError> {
        let top = as_object(v, "$")?;
        check_keys(top, TOP_KEYS, "$")?;

        let mut accounts = WorldState::new();
        if let Some(accts) = top.get("accounts") {
            for (addr_s, acct_v) in as_object(accts, "$.accounts")? {
                let p = format!("$.accounts.{addr_s}");
                let addr: Address = addr_s.parse().map_err(|e| parse_err(&p, format!("{e}")))?;
                let obj = as_object(acct_v, &p)?;
                check_keys(obj, ACCOUNT_KEYS, &p)?;
                let mut acct = Account::default();
                if let Some(b) = obj.get("balance") {
                    acct.balance = quantity(b, &format!("{p}.balance"))?;
                }
                if let Some(n) = obj.get("nonce") {
                    acct.nonce = u64_field(n, &format!("{p}.nonce"))?;
                }
                if let Some(c) = obj.get("code") {
                    acct.code = std::sync::Arc::new(hex_bytes(c, &format!("{p}.code"))?);
                }
                if let Some(st) = obj.get("storage") {
                    for (k, val) in as_object(st, &format!("{p}.storage"))? {
                        let sp = format!("{p}.storage.{k}");
                        let key = parse_quantity(k).map_err(|e| parse_err(&sp, e))?;
                        acct.set_storage(key, quantity(val, &sp)?);
                    }
                }
                if accounts.contains(&addr) {
                    return Err(invalid(&p, "duplicate account"));
                }
                accounts.insert(addr, acct);
            }
        }

        let mut block = BlockEnv::default();
        if let Some(b) = top.get("block") {
            apply_block(&mut block, as_object(b, "$.block")?, "$.block")?;
        }

        let mut transactions = Vec::new();
        if let Some(txs) = top.get("transactions") {
            let arr = txs.as_array().ok_or_else(|| parse_err("$.transactions", "expected an array"))?;
            for (i, t) in arr.iter().enumerate() {
                let p = format!("$.transactions[{i}]");
                let obj = as_object(t, &p)?;
                check_keys(obj, TX_KEYS, &p)?;
                let field = |k: &str| obj.get(k).ok_or_else(|| invalid(&format!("{p}.{k}"), "missing field"));
                let sender = address(field("from")?, &format!("{p}.from"))?;
                let to = address(field("to")?, &format!("{p}.to"))?;
                if sender.is_zero() {
                    return Err(invalid(&format!("{p}.from"), "sender is the zero address"));
                }
                if !accounts.contains(&to) {
                    return Err(invalid(&format!("{p}.to"), format!("target {to} has no account entry")));
                }
                let value = match obj.get("value") {
                    Some(v) => quantity(v, &format!("{p}.value"))?,
                    None => U256::ZERO,
                };
                let data = match obj.get("data") {
                    Some(v) => hex_bytes(v, &format!("{p}.data"))?,
                    None => Vec::new(),
                };
                let gas_limit = match obj.get("gasLimit") {
                    Some(v) => u64_field(v, &format!("{p}.gasLimit"))?,
                    None => DEFAULT_GAS_LIMIT,
                };
                if gas_limit == 0 {
                    return Err(invalid(&format!("{p}.gasLimit"), "gas limit must be positive"));
                }
                let mut tx_block = block.clone();
                let block_override = match obj.get("block") {
                    Some(b) => {
                        let bp = format!("{p}.block");
                        let o = as_object(b, &bp)?;
                        apply_block(&mut tx_block, o, &bp)?;
                        Some(o.clone())
                    }
                    None => None,
                };
                transactions.push(FixtureTx {
                    tx: TransactionEnv { sender, to, value, data, gas_limit },
                    block: tx_block,
                    block_override,
                });
            }
        }

        let mut abis = BTreeMap::new();
        let mut abis_json = BTreeMap::new();
        if let Some(a) = top.get("abis") {
            for (addr_s, abi_v) in as_object(a, "$.abis")? {
                let p = format!("$.abis.{addr_s}");
                let addr: Address = addr_s.parse().map_err(|e| parse_err(&p, format!("{e}")))?;
                let abi = Abi::from_json(abi_v).map_err(|e| invalid(&p, e.to_string()))?;
                abis.insert(addr, abi);
                abis_json.insert(addr, abi_v.clone());
            }
        }

        Ok(Fixture { accounts, block, transactions, abis, abis_json })
    }

    /// Merges extra ABIs (e.g. from `--abi`) over the fixture's own.
    pub fn merge_abis(&mut self, v: &Value) -> Result<(), FixtureError> {
        let obj = as_object(v, "$")?;
        for (addr_s, abi_v) in obj {
            let p = format!("$.{addr_s}");
            let addr: Address = addr_s.parse().map_err(|e| parse_err(&p, format!("{e}")))?;
            let abi = Abi::from_json(abi_v).map_err(|e| invalid(&p, e.to_string()))?;
            self.abis.insert(addr, abi);
            self.abis_json.insert(addr, abi_v.clone());
        }
        Ok(())
    }

    /// Canonical JSON form (lowercase addresses, minimal quantities).
    pub fn to_json(&self) -> Value {
        let mut accounts = Map::new();
        for (addr, a) in &self.accounts.accounts {
            let storage: Map<String, Value> =
                a.storage.iter().map(|(k, v)| (format!("{k:#x}"), Value::String(format!("{v:#x}")))).collect();
            accounts.insert(
                addr.to_string(),
                serde_json::json!({
                    "balance": format!("{:#x}", a.balance),
                    "nonce": a.nonce,
                    "code": to_hex(&a.code),
                    "storage": storage,
                }),
            );
        }
        let b = &self.block;
        let mut block = serde_json::json!({
            "number": b.number,
            "timestamp": b.timestamp,
            "coinbase": b.coinbase.to_string(),
            "prevrandao": to_hex(&b.prevrandao),
            "gaslimit": b.gaslimit,
            "chainid": b.chainid,
        });
        if !b.basefee.is_zero() {
            block["basefee"] = Value::String(format!("{:#x}", b.basefee));
        }
        if !b.block_hashes.is_empty() {
            let hashes: Map<String, Value> =
                b.block_hashes.iter().map(|(h, v)| (h.to_string(), Value::String(to_hex(v)))).collect();
            block["blockhashes"] = Value::Object(hashes);
        }
        let txs: Vec<Value> = self
            .transactions
            .iter()
            .map(|t| {
                let mut o = serde_json::json!({
                    "from": t.tx.sender.to_string(),
                    "to": t.tx.to.to_string(),
                    "value": format!("{:#x}", t.tx.value),
                    "data": to_hex(&t.tx.data),
                    "gasLimit": t.tx.gas_limit,
                });
                if let Some(ov) = &t.block_override {
                    o["block"] = Value::Object(ov.clone());
                }
                o
            })
            .collect();
        let abis: Map<String, Value> = self.abis_json.iter().map(|(a, v)| (a.to_string(), v.clone())).collect();
        serde_json::json!({
            "accounts": accounts,
            "block": block,
            "transactions": txs,
            "abis": abis,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"{
        "accounts": {"0x00000000000000000000000000000000000000aa": {"balance": "0x10", "nonce": 0, "code": "0x", "storage": {}}},
        "block": {"number": 5, "timestamp": 100, "coinbase": "0x0000000000000000000000000000000000000000",
                  "prevrandao": "0x00", "gaslimit": 30000000, "chainid": 1},
        "transactions": [],
        "abis": {}
    }"#;

    #[test]
    fn minimal_fixture() {
        let f = Fixture::from_str(MIN).unwrap();
        assert_eq!(f.accounts.accounts.len(), 1);
        assert!(f.transactions.is_empty());
        assert_eq!(f.block.number, 5);
        let again = Fixture::from_json(&f.to_json()).unwrap();
        assert_eq!(again, f);
    }

    #[test]
    fn unknown_key_names_path() {
        let text = MIN.replace("\"nonce\": 0,", "\"nonce\": 0, \"extra\": 1,");
        let err = Fixture::from_str(&text).unwrap_err();
        assert!(matches!(err, FixtureError::Parse { .. }));
        assert_eq!(err.path(), "$.accounts.0x00000000000000000000000000000000000000aa.extra");
    }

    #[test]
    fn missing_target_account() {
        let text = MIN.replace(
            "\"transactions\": []",
            r#""transactions": [{"from": "0x00000000000000000000000000000000000000aa", "to": "0x00000000000000000000000000000000000000bb", "value": "0x0", "data": "0x", "gasLimit": 100000}]"#,
        );
        let err = Fixture::from_str(&text).unwrap_err();
        assert!(matches!(err, FixtureError::Validation { .. }));
        assert_eq!(err.path(), "$.transactions[0].to");
    }

    #[test]
    fn odd_hex_is_validation_error() {
        let text = MIN.replace("\"code\": \"0x\"", "\"code\": \"0x123\"");
        let err = Fixture::from_str(&text).unwrap_err();
        assert!(matches!(err, FixtureError::Validation { .. }));
        assert!(err.path().ends_with(".code"));
    }

    #[test]
    fn zero_storage_dropped() {
        let text = MIN.replace("\"storage\": {}", "\"storage\": {\"0x01\": \"0x00\", \"0x02\": \"0x05\"}");
        let f = Fixture::from_str(&text).unwrap();
        assert!(f.accounts.is_canonical());
        assert_eq!(f.accounts.accounts.values().next().unwrap().storage.len(), 1);
    }
}
