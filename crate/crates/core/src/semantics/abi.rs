//! Contract ABI descriptions and the standard/packed encodings.

use std::fmt;
use std::ops::Range;

use serde_json::Value;

use crate::evm::{keccak256, Address, U256};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AbiType {
    Uint(usize),
    Int(usize),
    Address,
    Bool,
    FixedBytes(usize),
    Bytes,
    String,
    Array(Box<AbiType>),
    FixedArray(Box<AbiType>, usize),
    Tuple(Vec<AbiType>),
}

impl AbiType {
    pub fn is_dynamic(&self) -> bool {
        match self {
            AbiType::Bytes | AbiType::String | AbiType::Array(_) => true,
            AbiType::FixedArray(inner, _) => inner.is_dynamic(),
            AbiType::Tuple(ts) => ts.iter().any(|t| t.is_dynamic()),
            _ => false,
        }
    }

    /// Bytes occupied in the head of an enclosing tuple.
    pub fn head_size(&self) -> usize {
        if self.is_dynamic() {
            return 32;
        }
        match self {
            AbiType::FixedArray(inner, n) => inner.head_size() * n,
            AbiType::Tuple(ts) => ts.iter().map(|t| t.head_size()).sum(),
            _ => 32,
        }
    }

    /// Nesting depth of tuples (0 for non-tuple types).
    pub fn tuple_depth(&self) -> usize {
        match self {
            AbiType::Tuple(ts) => 1 + ts.iter().map(|t| t.tuple_depth()).max().unwrap_or(0),
            AbiType::Array(inner) | AbiType::FixedArray(inner, _) => inner.tuple_depth(),
            _ => 0,
        }
    }

    pub fn parse(ty: &str, components: Option<&[AbiType]>) -> Result<AbiType, AbiError> {
        if let Some(stripped) = ty.strip_suffix(']') {
            let open = stripped.rfind('[').ok_or_else(|| AbiError::Type(ty.to_string()))?;
            let inner = AbiType::parse(&stripped[..open], components)?;
            let dim = &stripped[open + 1..];
            return if dim.is_empty() {
                Ok(AbiType::Array(Box::new(inner)))
            } else {
                let n: usize = dim.parse().map_err(|_| AbiError::Type(ty.to_string()))?;
                Ok(AbiType::FixedArray(Box::new(inner), n))
            };
        }
        let bits = |prefix: &str| -> Result<usize, AbiError> {
            let rest = &ty[prefix.len()..];
            if rest.is_empty() {
                return Ok(256);
            }
            match rest.parse::<usize>() {
                Ok(n) if n % 8 == 0 && (8..=256).contains(&n) => Ok(n),
                _ => Err(AbiError::Type(ty.to_string())),
            }
        };
        Ok(match ty {
            "address" => AbiType::Address,
            "bool" => AbiType::Bool,
            "bytes" => AbiType::Bytes,
            "string" => AbiType::String,
            "tuple" => AbiType::Tuple(components.ok_or_else(|| AbiError::Type(ty.to_string()))?.to_vec()),
            _ if ty.starts_with("uint") => AbiType::Uint(bits("uint")?),
            _ if ty.starts_with("int") => AbiType::Int(bits("int")?),
            _ if ty.starts_with("bytes") => match ty[5..].parse::<usize>() {
                Ok(n) if (1..=32).contains(&n) => AbiType::FixedBytes(n),
                _ => return Err(AbiError::Type(ty.to_string())),
            },
            _ => return Err(AbiError::Type(ty.to_string())),
        })
    }
}

impl fmt::Display for AbiType {
    /// Canonical form used in function signatures.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbiType::Uint(n) => write!(f, "uint{n}"),
            AbiType::Int(n) => write!(f, "int{n}"),
            AbiType::Address => f.write_str("address"),
            AbiType::Bool => f.write_str("bool"),
            AbiType::FixedBytes(n) => write!(f, "bytes{n}"),
            AbiType::Bytes => f.write_str("bytes"),
            AbiType::String => f.write_str("string"),
            AbiType::Array(inner) => write!(f, "{inner}[]"),
            AbiType::FixedArray(inner, n) => write!(f, "{inner}[{n}]"),
            AbiType::Tuple(ts) => {
                f.write_str("(")?;
                for (i, t) in ts.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{t}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AbiError {
    #[error("unsupported ABI type {0:?}")]
    Type(String),
    #[error("malformed ABI entry: {0}")]
    Entry(String),
    #[error("calldata does not decode under the ABI: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbiParam {
    pub name: String,
    pub ty: AbiType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbiFunction {
    pub name: String,
    pub inputs: Vec<AbiParam>,
    pub state_mutability: String,
    pub selector: [u8; 4],
}

impl AbiFunction {
    pub fn signature(&self) -> String {
        let types: Vec<String> = self.inputs.iter().map(|p| p.ty.to_string()).collect();
        format!("{}({})", self.name, types.join(","))
    }

    pub fn is_view(&self) -> bool {
        matches!(self.state_mutability.as_str(), "view" | "pure")
    }

    pub fn input_types(&self) -> Vec<AbiType> {
        self.inputs.iter().map(|p| p.ty.clone()).collect()
    }

    /// Decodes the arguments of `calldata` (selector included).
    pub fn decode_input(&self, calldata: &[u8]) -> Result<Vec<Decoded>, AbiError> {
        if calldata.len() < 4 || calldata[..4] != self.selector {
            return Err(AbiError::Mismatch("selector".into()));
        }
        let mut out = decode_tuple(&self.input_types(), &calldata[4..], 0)?;
        for d in &mut out {
            d.shift(4);
        }
        Ok(out)
    }

    pub fn encode_input(&self, values: &[AbiValue]) -> Vec<u8> {
        let mut out = self.selector.to_vec();
        out.extend(encode_tuple(values));
        out
    }
}

pub fn selector_of(signature: &str) -> [u8; 4] {
    let h = keccak256(signature.as_bytes());
    [h[0], h[1], h[2], h[3]]
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Abi {
    pub functions: Vec<AbiFunction>,
}

impl Abi {
    /// Parses the canonical JSON array form. Non-function entries are skipped.
    pub fn from_json(value: &Value) -> Result<Abi, AbiError> {
        let entries = value.as_array().ok_or_else(|| AbiError::Entry("ABI must be a JSON array".into()))?;
        let mut functions = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            let kind = e.get("type").and_then(Value::as_str).unwrap_or("function");
            if kind != "function" {
                continue;
            }
            let name = e
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| AbiError::Entry(format!("[{i}].name missing")))?
                .to_string();
            let inputs = match e.get("inputs") {
                Some(v) => parse_params(v).map_err(|err| AbiError::Entry(format!("[{i}].inputs: {err}")))?,
                None => Vec::new(),
            };
            let state_mutability =
                e.get("stateMutability").and_then(Value::as_str).unwrap_or("nonpayable").to_string();
            let mut f = AbiFunction { name, inputs, state_mutability, selector: [0; 4] };
            f.selector = selector_of(&f.signature());
            functions.push(f);
        }
        Ok(Abi { functions })
    }

    pub fn function(&self, selector: [u8; 4]) -> Option<&AbiFunction> {
        self.functions.iter().find(|f| f.selector == selector)
    }
}

fn parse_params(v: &Value) -> Result<Vec<AbiParam>, AbiError> {
    let arr = v.as_array().ok_or_else(|| AbiError::Entry("params must be an array".into()))?;
    arr.iter()
        .map(|p| {
            let ty = p.get("type").and_then(Value::as_str).ok_or_else(|| AbiError::Entry("param type".into()))?;
            let components = match p.get("components") {
                Some(c) => Some(parse_params(c)?.into_iter().map(|p| p.ty).collect::<Vec<_>>()),
                None => None,
            };
            let name = p.get("name").and_then(Value::as_str).unwrap_or("").to_string();
            Ok(AbiParam { name, ty: AbiType::parse(ty, components.as_deref())? })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AbiValue {
    Uint(U256),
    /// Two's-complement 256-bit representation.
    Int(U256),
    Address(Address),
    Bool(bool),
    FixedBytes(Vec<u8>),
    Bytes(Vec<u8>),
    String(Vec<u8>),
    Array(Vec<AbiValue>),
    FixedArray(Vec<AbiValue>),
    Tuple(Vec<AbiValue>),
}

impl AbiValue {
    pub fn is_dynamic(&self) -> bool {
        match self {
            AbiValue::Bytes(_) | AbiValue::String(_) | AbiValue::Array(_) => true,
            AbiValue::FixedArray(vs) | AbiValue::Tuple(vs) => vs.iter().any(|v| v.is_dynamic()),
            _ => false,
        }
    }

    /// Standard encoding of this value as a single word (static scalars only).
    pub fn word(&self) -> Option<[u8; 32]> {
        Some(match self {
            AbiValue::Uint(v) | AbiValue::Int(v) => v.to_be_bytes::<32>(),
            AbiValue::Address(a) => a.to_padded(),
            AbiValue::Bool(b) => U256::from(*b as u8).to_be_bytes::<32>(),
            AbiValue::FixedBytes(b) => {
                let mut w = [0u8; 32];
                w[..b.len()].copy_from_slice(b);
                w
            }
            _ => return None,
        })
    }
}

/// A decoded argument with the calldata byte ranges that encode it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub value: AbiValue,
    /// Every byte range belonging to this value: head word(s), offset
    /// pointer, length word and tail data.
    pub ranges: Vec<Range<usize>>,
    /// Element/component decodings for arrays and tuples.
    pub children: Vec<Decoded>,
}

impl Decoded {
    fn shift(&mut self, by: usize) {
        for r in &mut self.ranges {
            *r = r.start + by..r.end + by;
        }
        for c in &mut self.children {
            c.shift(by);
        }
    }

    pub fn contains(&self, offset: usize) -> bool {
        self.ranges.iter().any(|r| r.contains(&offset))
    }
}

fn read_word(data: &[u8], pos: usize) -> Result<U256, AbiError> {
    let end = pos.checked_add(32).ok_or_else(|| AbiError::Mismatch("offset overflow".into()))?;
    if end > data.len() {
        return Err(AbiError::Mismatch(format!("read past end at {pos}")));
    }
    Ok(U256::from_be_slice(&data[pos..end]))
}

fn read_len(data: &[u8], pos: usize) -> Result<usize, AbiError> {
    let w = read_word(data, pos)?;
    if w > U256::from(data.len()) {
        return Err(AbiError::Mismatch(format!("length or offset {w} out of bounds at {pos}")));
    }
    Ok(w.to::<usize>())
}

fn decode_tuple(types: &[AbiType], data: &[u8], start: usize) -> Result<Vec<Decoded>, AbiError> {
    let mut head = start;
    let mut out = Vec::with_capacity(types.len());
    for t in types {
        if t.is_dynamic() {
            let off = read_len(data, head)?;
            let mut d = decode_at(t, data, start + off)?;
            d.ranges.insert(0, head..head + 32);
            out.push(d);
            head += 32;
        } else {
            out.push(decode_at(t, data, head)?);
            head += t.head_size();
        }
    }
    Ok(out)
}

#[allow(clippy::single_range_in_vec_init)]
fn decode_at(t: &AbiType, data: &[u8], pos: usize) -> Result<Decoded, AbiError> {
    let scalar = |value: AbiValue| Decoded { value, ranges: vec![pos..pos + 32], children: Vec::new() };
    Ok(match t {
        AbiType::Uint(_) => scalar(AbiValue::Uint(read_word(data, pos)?)),
        AbiType::Int(_) => scalar(AbiValue::Int(read_word(data, pos)?)),
        AbiType::Address => scalar(AbiValue::Address(Address::from_word(read_word(data, pos)?))),
        AbiType::Bool => scalar(AbiValue::Bool(!read_word(data, pos)?.is_zero())),
        AbiType::FixedBytes(n) => {
            read_word(data, pos)?;
            scalar(AbiValue::FixedBytes(data[pos..pos + n].to_vec()))
        }
        AbiType::Bytes | AbiType::String => {
            let len = read_len(data, pos)?;
            let body = pos + 32;
            if body + len > data.len() {
                return Err(AbiError::Mismatch(format!("byte string past end at {pos}")));
            }
            let bytes = data[body..body + len].to_vec();
            let end = (body + len.div_ceil(32) * 32).min(data.len());
            let value = if matches!(t, AbiType::Bytes) { AbiValue::Bytes(bytes) } else { AbiValue::String(bytes) };
            Decoded { value, ranges: vec![pos..end], children: Vec::new() }
        }
        AbiType::Array(inner) => {
            let n = read_len(data, pos)?;
            if n.saturating_mul(inner.head_size()) > data.len() {
                return Err(AbiError::Mismatch(format!("array length {n} out of bounds")));
            }
            let children = decode_tuple(&vec![(**inner).clone(); n], data, pos + 32)?;
            let value = AbiValue::Array(children.iter().map(|c| c.value.clone()).collect());
            let mut ranges = vec![pos..pos + 32];
            ranges.extend(children.iter().flat_map(|c| c.ranges.iter().cloned()));
            Decoded { value, ranges, children }
        }
        AbiType::FixedArray(inner, n) => {
            let children = decode_tuple(&vec![(**inner).clone(); *n], data, pos)?;
            let value = AbiValue::FixedArray(children.iter().map(|c| c.value.clone()).collect());
            let ranges = children.iter().flat_map(|c| c.ranges.iter().cloned()).collect();
            Decoded { value, ranges, children }
        }
        AbiType::Tuple(ts) => {
            let children = decode_tuple(ts, data, pos)?;
            let value = AbiValue::Tuple(children.iter().map(|c| c.value.clone()).collect());
            let ranges = children.iter().flat_map(|c| c.ranges.iter().cloned()).collect();
            Decoded { value, ranges, children }
        }
    })
}

fn pad32(bytes: &[u8]) -> Vec<u8> {
    let mut out = bytes.to_vec();
    out.resize(bytes.len().div_ceil(32) * 32, 0);
    out
}

/// Standard ABI encoding of a tuple of values.
pub fn encode_tuple(values: &[AbiValue]) -> Vec<u8> {
    let head_len: usize = values.iter().map(head_size_of).sum();
    let mut head = Vec::with_capacity(head_len);
    let mut tail = Vec::new();
    for v in values {
        if v.is_dynamic() {
            head.extend(U256::from(head_len + tail.len()).to_be_bytes::<32>());
            tail.extend(encode_value(v));
        } else {
            head.extend(encode_value(v));
        }
    }
    head.extend(tail);
    head
}

fn head_size_of(v: &AbiValue) -> usize {
    if v.is_dynamic() {
        return 32;
    }
    match v {
        AbiValue::FixedArray(vs) | AbiValue::Tuple(vs) => vs.iter().map(head_size_of).sum(),
        _ => 32,
    }
}

fn encode_value(v: &AbiValue) -> Vec<u8> {
    match v {
        AbiValue::Bytes(b) | AbiValue::String(b) => {
            let mut out = U256::from(b.len()).to_be_bytes::<32>().to_vec();
            out.extend(pad32(b));
            out
        }
        AbiValue::Array(vs) => {
            let mut out = U256::from(vs.len()).to_be_bytes::<32>().to_vec();
            out.extend(encode_tuple(vs));
            out
        }
        AbiValue::FixedArray(vs) | AbiValue::Tuple(vs) => encode_tuple(vs),
        scalar => scalar.word().expect("scalar").to_vec(),
    }
}

/// Non-standard packed encoding (`abi.encodePacked`) of one value.
pub fn encode_packed(ty: &AbiType, v: &AbiValue) -> Vec<u8> {
    match (ty, v) {
        (AbiType::Uint(bits), AbiValue::Uint(x)) | (AbiType::Int(bits), AbiValue::Int(x)) => {
            x.to_be_bytes::<32>()[32 - bits / 8..].to_vec()
        }
        (AbiType::Address, AbiValue::Address(a)) => a.as_bytes().to_vec(),
        (AbiType::Bool, AbiValue::Bool(b)) => vec![*b as u8],
        (AbiType::FixedBytes(_), AbiValue::FixedBytes(b)) => b.clone(),
        (AbiType::Bytes, AbiValue::Bytes(b)) | (AbiType::String, AbiValue::String(b)) => b.clone(),
        // array elements are padded to full words
        (AbiType::Array(_) | AbiType::FixedArray(..), AbiValue::Array(vs) | AbiValue::FixedArray(vs)) => {
            vs.iter().flat_map(|e| e.word().map(|w| w.to_vec()).unwrap_or_else(|| encode_value(e))).collect()
        }
        (AbiType::Tuple(ts), AbiValue::Tuple(vs)) => {
            ts.iter().zip(vs).flat_map(|(t, v)| encode_packed(t, v)).collect()
        }
        (_, v) => encode_value(v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn permit_selector() {
        let abi = Abi::from_json(&json!([{
            "type": "function", "name": "permit", "stateMutability": "nonpayable",
            "inputs": [
                {"name": "owner", "type": "address"}, {"name": "spender", "type": "address"},
                {"name": "value", "type": "uint256"}, {"name": "deadline", "type": "uint256"},
                {"name": "v", "type": "uint8"}, {"name": "r", "type": "bytes32"}, {"name": "s", "type": "bytes32"}
            ]
        }]))
        .unwrap();
        assert_eq!(hex::encode(abi.functions[0].selector), "d505accf");
    }

    #[test]
    fn transfer_selector() {
        assert_eq!(hex::encode(selector_of("transfer(address,uint256)")), "a9059cbb");
    }

    #[test]
    fn roundtrip_dynamic() {
        let f = AbiFunction {
            name: "mint".into(),
            inputs: vec![
                AbiParam { name: "leaf".into(), ty: AbiType::String },
                AbiParam { name: "proof".into(), ty: AbiType::Array(Box::new(AbiType::FixedBytes(32))) },
            ],
            state_mutability: "nonpayable".into(),
            selector: selector_of("mint(string,bytes32[])"),
        };
        let vals = vec![
            AbiValue::String(b"alice".to_vec()),
            AbiValue::Array(vec![AbiValue::FixedBytes(vec![1; 32]), AbiValue::FixedBytes(vec![2; 32])]),
        ];
        let cd = f.encode_input(&vals);
        let dec = f.decode_input(&cd).unwrap();
        assert_eq!(dec.iter().map(|d| d.value.clone()).collect::<Vec<_>>(), vals);
        // second proof element occupies the last word
        assert_eq!(dec[1].children[1].ranges, vec![cd.len() - 32..cd.len()]);
        assert!(dec[0].contains(4));
    }

    #[test]
    fn truncated_calldata_is_mismatch() {
        let f = AbiFunction {
            name: "f".into(),
            inputs: vec![AbiParam { name: "x".into(), ty: AbiType::Bytes }],
            state_mutability: "nonpayable".into(),
            selector: selector_of("f(bytes)"),
        };
        let mut cd = f.selector.to_vec();
        cd.extend(U256::from(0x1000u32).to_be_bytes::<32>());
        assert!(matches!(f.decode_input(&cd), Err(AbiError::Mismatch(_))));
    }

    #[test]
    fn type_parsing() {
        assert_eq!(AbiType::parse("uint", None).unwrap(), AbiType::Uint(256));
        assert_eq!(AbiType::parse("bytes32[3][]", None).unwrap().to_string(), "bytes32[3][]");
        assert!(AbiType::parse("uint7", None).is_err());
        let t = AbiType::parse("tuple[]", Some(&[AbiType::Address, AbiType::Uint(8)])).unwrap();
        assert_eq!(t.to_string(), "(address,uint8)[]");
    }

    #[test]
    fn packed_addresses() {
        let a = AbiValue::Array(vec![AbiValue::Address(Address::from_low_u64(1))]);
        let t = AbiType::Array(Box::new(AbiType::Address));
        assert_eq!(encode_packed(&t, &a).len(), 32);
        assert_eq!(encode_packed(&AbiType::Uint(8), &AbiValue::Uint(U256::from(5u8))), vec![5]);
    }
}
