//! Word and address types shared by every layer of the analyzer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use ruint::aliases::U256;

/// A 20-byte account address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(pub [u8; 20]);

impl Address {
    pub const ZERO: Address = Address([0u8; 20]);

    pub fn from_slice(bytes: &[u8]) -> Self {
        let mut out = [0u8; 20];
        out.copy_from_slice(&bytes[..20]);
        Address(out)
    }

    /// Builds the address whose last byte is `n` (precompiles, test fixtures).
    pub const fn from_low_u64(n: u64) -> Self {
        let b = n.to_be_bytes();
        let mut out = [0u8; 20];
        let mut i = 0;
        while i < 8 {
            out[12 + i] = b[i];
            i += 1;
        }
        Address(out)
    }

    pub fn as_bytes(&self) -> &[u8; 20] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; 20]
    }

    /// Low 160 bits of a stack word.
    pub fn from_word(word: U256) -> Self {
        let bytes = word.to_be_bytes::<32>();
        Address::from_slice(&bytes[12..])
    }

    pub fn to_word(self) -> U256 {
        let mut bytes = [0u8; 32];
        bytes[12..].copy_from_slice(&self.0);
        U256::from_be_bytes(bytes)
    }

    /// The 32-byte left-padded form used in ABI words.
    pub fn to_padded(self) -> [u8; 32] {
        let mut bytes = [0u8; 32];
        bytes[12..].copy_from_slice(&self.0);
        bytes
    }

    /// EIP-55 mixed-case rendering.
    pub fn to_checksum(&self) -> String {
        let lower = hex::encode(self.0);
        let digest = crate::evm::keccak256(lower.as_bytes());
        let mut out = String::with_capacity(42);
        out.push_str("0x");
        for (i, c) in lower.chars().enumerate() {
            let nibble = (digest[i / 2] >> (if i % 2 == 0 { 4 } else { 0 })) & 0x0f;
            if c.is_ascii_alphabetic() && nibble >= 8 {
                out.push(c.to_ascii_uppercase());
            } else {
                out.push(c);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AddressParseError {
    #[error("address must be 0x followed by 40 hex digits")]
    Shape,
    #[error("invalid hex in address")]
    Hex,
    #[error("mixed-case address fails its EIP-55 checksum")]
    Checksum,
}

impl FromStr for Address {
    type Err = AddressParseError;

    /// Accepts lowercase, uppercase, or correctly checksummed input.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let body = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).ok_or(AddressParseError::Shape)?;
        if body.len() != 40 {
            return Err(AddressParseError::Shape);
        }
        let raw = hex::decode(body).map_err(|_| AddressParseError::Hex)?;
        let addr = Address::from_slice(&raw);
        let has_upper = body.chars().any(|c| c.is_ascii_uppercase());
        let has_lower = body.chars().any(|c| c.is_ascii_lowercase());
        if has_upper && has_lower && addr.to_checksum()[2..] != *body {
            return Err(AddressParseError::Checksum);
        }
        Ok(addr)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Big-endian 32-byte encoding of a word.
pub fn word_to_bytes(word: U256) -> [u8; 32] {
    word.to_be_bytes::<32>()
}

/// Interprets up to 32 bytes as a big-endian word, right-padding short input
/// with zeros (calldata/memory load semantics).
pub fn word_from_slice_padded(bytes: &[u8]) -> U256 {
    let mut buf = [0u8; 32];
    let n = bytes.len().min(32);
    buf[..n].copy_from_slice(&bytes[..n]);
    U256::from_be_bytes(buf)
}

/// Left-pads (numeric semantics) up to 32 bytes.
pub fn word_from_be_slice(bytes: &[u8]) -> U256 {
    let mut buf = [0u8; 32];
    let n = bytes.len().min(32);
    buf[32 - n..].copy_from_slice(&bytes[bytes.len() - n..]);
    U256::from_be_bytes(buf)
}

pub fn word_hex(word: U256) -> String {
    format!("0x{}", hex::encode(word_to_bytes(word)))
}

/// Saturating conversion used for memory offsets and lengths.
pub fn word_to_usize_saturating(word: U256) -> usize {
    if word > U256::from(usize::MAX) {
        usize::MAX
    } else {
        word.to::<usize>()
    }
}

/// Parses `0x`-prefixed (or bare) hex into bytes.
pub fn parse_hex_bytes(s: &str) -> Result<Vec<u8>, hex::FromHexError> {
    let body = s.strip_prefix("0x").unwrap_or(s);
    hex::decode(body)
}

pub fn to_hex(bytes: &[u8]) -> String {
    format!("0x{}", hex::encode(bytes))
}

/// Serde adapter rendering byte vectors as `0x` hex.
pub mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::to_hex(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_hex_bytes(&s).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter rendering 256-bit words as minimal `0x` hex quantities.
pub mod hex_u256 {
    use super::U256;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &U256, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<U256, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_quantity(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses a `0x` hex quantity (any length up to 64 digits) or a decimal string.
pub fn parse_quantity(s: &str) -> Result<U256, String> {
    if let Some(body) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        if body.is_empty() {
            return Ok(U256::ZERO);
        }
        U256::from_str_radix(body, 16).map_err(|e| format!("invalid hex quantity {s:?}: {e}"))
    } else {
        U256::from_str_radix(s, 10).map_err(|e| format!("invalid decimal quantity {s:?}: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_roundtrip() {
        // EIP-55 reference vector
        let s = "0x5aAeb6053F3E94C9b9A09f33669435E7Ef1BeAed";
        let a: Address = s.parse().unwrap();
        assert_eq!(a.to_checksum(), s);
        assert_eq!(a.to_string(), s.to_lowercase());
    }

    #[test]
    fn bad_checksum_rejected() {
        let s = "0x5AAeb6053F3E94C9b9A09f33669435E7Ef1BeAed";
        assert_eq!(s.parse::<Address>(), Err(AddressParseError::Checksum));
        assert!("0x5aaeb6053f3e94c9b9a09f33669435e7ef1beaed".parse::<Address>().is_ok());
    }

    #[test]
    fn word_padding() {
        assert_eq!(word_from_slice_padded(&[1]), U256::from(1u8) << 248);
        assert_eq!(word_from_be_slice(&[1]), U256::from(1u8));
        let a = Address::from_low_u64(7);
        assert_eq!(Address::from_word(a.to_word()), a);
    }
}
