//! Hash primitives and the precompiled contracts at 0x01..=0x09.
//!
//! ECRECOVER, SHA256, RIPEMD160 and IDENTITY are implemented. MODEXP, the
//! bn128 operations and BLAKE2F are deliberately stubs: a call fails and the
//! trace is flagged, so no crypto result is ever fabricated.

use k256::elliptic_curve::group::Group;
use k256::elliptic_curve::ops::Reduce;
use k256::elliptic_curve::point::DecompressPoint;
use k256::elliptic_curve::sec1::ToEncodedPoint;
use k256::elliptic_curve::subtle::Choice;
use k256::elliptic_curve::PrimeField;
use k256::{AffinePoint, FieldBytes, ProjectivePoint, Scalar};
use ripemd::Ripemd160;
use sha2::{Digest, Sha256};
use sha3::Keccak256;

use super::primitives::Address;

pub fn keccak256(input: &[u8]) -> [u8; 32] {
    Keccak256::digest(input).into()
}

pub fn sha256(input: &[u8]) -> [u8; 32] {
    Sha256::digest(input).into()
}

/// RIPEMD-160 digest left-padded to a 32-byte word.
pub fn ripemd160_padded(input: &[u8]) -> [u8; 32] {
    let digest = Ripemd160::digest(input);
    let mut out = [0u8; 32];
    out[12..].copy_from_slice(&digest);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HashId {
    Sha256,
    Ripemd160,
}

/// SHA256 / RIPEMD160 precompile output (always 32 bytes).
pub fn precompile_hash(id: HashId, input: &[u8]) -> [u8; 32] {
    match id {
        HashId::Sha256 => sha256(input),
        HashId::Ripemd160 => ripemd160_padded(input),
    }
}

/// Recovers the signer for a `hash‖v‖r‖s` input. Input shorter than 128
/// bytes is zero-padded; longer input is truncated.
pub fn ecrecover(input: &[u8]) -> Option<Address> {
    let mut buf = [0u8; 128];
    let n = input.len().min(128);
    buf[..n].copy_from_slice(&input[..n]);

    let v_word = &buf[32..64];
    if v_word[..31].iter().any(|b| *b != 0) {
        return None;
    }
    let recid = match v_word[31] {
        27 => 0u8,
        28 => 1u8,
        _ => return None,
    };

    let r_bytes = FieldBytes::from(<[u8; 32]>::try_from(&buf[64..96]).expect("32 bytes"));
    let s_bytes = FieldBytes::from(<[u8; 32]>::try_from(&buf[96..128]).expect("32 bytes"));
    // from_repr rejects values >= n
    let r: Option<Scalar> = Scalar::from_repr(r_bytes).into();
    let s: Option<Scalar> = Scalar::from_repr(s_bytes).into();
    let (r, s) = match (r, s) {
        (Some(r), Some(s)) if !bool::from(r.is_zero()) && !bool::from(s.is_zero()) => (r, s),
        _ => return None,
    };

    let big_r: Option<AffinePoint> = AffinePoint::decompress(&r_bytes, Choice::from(recid)).into();
    let big_r = ProjectivePoint::from(big_r?);
    let e = <Scalar as Reduce<k256::U256>>::reduce_bytes(&FieldBytes::from(<[u8; 32]>::try_from(&buf[..32]).expect("32 bytes")));
    let r_inv: Scalar = Option::from(r.invert())?;

    let q = (big_r * s - ProjectivePoint::GENERATOR * e) * r_inv;
    if bool::from(q.is_identity()) {
        return None;
    }
    let encoded = q.to_affine().to_encoded_point(false);
    let digest = keccak256(&encoded.as_bytes()[1..]);
    Some(Address::from_slice(&digest[12..]))
}

/// ECRECOVER as a 32-byte word: the left-padded signer, or all zeros.
pub fn precompile_ecrecover(input: &[u8]) -> [u8; 32] {
    ecrecover(input).map(|a| a.to_padded()).unwrap_or([0u8; 32])
}

/// Crypto API identifiers, including the KECCAK256 opcode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CryptoApi {
    Keccak256,
    Ecrecover,
    Sha256,
    Ripemd160,
    Modexp,
    Ecadd,
    Ecmul,
    Ecpairing,
    Blake2f,
}

impl CryptoApi {
    pub fn from_precompile(id: u8) -> Option<Self> {
        Some(match id {
            1 => CryptoApi::Ecrecover,
            2 => CryptoApi::Sha256,
            3 => CryptoApi::Ripemd160,
            5 => CryptoApi::Modexp,
            6 => CryptoApi::Ecadd,
            7 => CryptoApi::Ecmul,
            8 => CryptoApi::Ecpairing,
            9 => CryptoApi::Blake2f,
            _ => return None,
        })
    }

    pub fn is_hash(self) -> bool {
        matches!(self, CryptoApi::Keccak256 | CryptoApi::Sha256 | CryptoApi::Ripemd160)
    }

    pub fn is_stub(self) -> bool {
        matches!(
            self,
            CryptoApi::Modexp | CryptoApi::Ecadd | CryptoApi::Ecmul | CryptoApi::Ecpairing | CryptoApi::Blake2f
        )
    }
}

/// Returns the precompile id when `addr` is one of 0x01..=0x09.
pub fn precompile_id(addr: &Address) -> Option<u8> {
    let b = addr.as_bytes();
    if b[..19].iter().all(|x| *x == 0) && (1..=9).contains(&b[19]) {
        Some(b[19])
    } else {
        None
    }
}

pub(crate) enum PrecompileOutcome {
    Success { output: Vec<u8>, gas: u64 },
    OutOfGas,
    Unsupported,
}

fn words(len: usize) -> u64 {
    len.div_ceil(32) as u64
}

pub(crate) fn run_precompile(id: u8, input: &[u8], gas: u64) -> PrecompileOutcome {
    let cost = match id {
        1 => 3000,
        2 => 60 + 12 * words(input.len()),
        3 => 600 + 120 * words(input.len()),
        4 => 15 + 3 * words(input.len()),
        _ => return PrecompileOutcome::Unsupported,
    };
    if cost > gas {
        return PrecompileOutcome::OutOfGas;
    }
    let output = match id {
        // failed recovery returns empty output, as on mainnet
        1 => ecrecover(input).map(|a| a.to_padded().to_vec()).unwrap_or_default(),
        2 => sha256(input).to_vec(),
        3 => ripemd160_padded(input).to_vec(),
        _ => input.to_vec(),
    };
    PrecompileOutcome::Success { output, gas: cost }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keccak_empty() {
        assert_eq!(
            hex::encode(keccak256(b"")),
            "c5d2460186f7233c927e7db2dcc703c0e500b653ca82273b7bfad8045d85a470"
        );
    }

    #[test]
    fn sha256_empty() {
        assert_eq!(
            hex::encode(precompile_hash(HashId::Sha256, b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn ripemd_is_left_padded() {
        let out = precompile_hash(HashId::Ripemd160, b"abc");
        assert_eq!(&out[..12], &[0u8; 12]);
        assert_eq!(hex::encode(&out[12..]), "8eb208f7e05d987a9b044a8e98c6b087f15a0bfc");
    }

    #[test]
    fn ecrecover_rejects_bad_v() {
        let mut input = [0u8; 128];
        input[63] = 29;
        input[64 + 31] = 1;
        input[96 + 31] = 1;
        assert_eq!(precompile_ecrecover(&input), [0u8; 32]);
    }

    #[test]
    fn ecrecover_rejects_zero_r() {
        let mut input = [0u8; 128];
        input[63] = 27;
        input[96 + 31] = 1;
        assert_eq!(precompile_ecrecover(&input), [0u8; 32]);
    }

    #[test]
    fn precompile_ids() {
        assert_eq!(precompile_id(&Address::from_low_u64(1)), Some(1));
        assert_eq!(precompile_id(&Address::from_low_u64(9)), Some(9));
        assert_eq!(precompile_id(&Address::from_low_u64(10)), None);
        assert_eq!(precompile_id(&Address::ZERO), None);
    }
}
