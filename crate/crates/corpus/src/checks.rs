//! Reference checks shared by the integration tests and the acceptance
//! runner. Each returns a one-line summary on success.

use std::cell::Cell;

use cdfuzz_core::evm::{
    ecrecover, execute_transaction, keccak256, precompile_ecrecover, precompile_hash, Account, Address, BlockEnv,
    HashId, TransactionEnv, WorldState, U256,
};
use cdfuzz_core::semantics::abi::AbiValue;
use cdfuzz_core::semantics::TxSemantics;
use cdfuzz_core::taint::{analyze_trace, StorageTaint, TaintSet};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secp256k1::{Message, PublicKey, Secp256k1, SecretKey};
use tiny_keccak::{Hasher, Keccak};

use crate::{actor, merkle, word, Builder};

pub type Check = Result<String, String>;

const N: &str = "fffffffffffffffffffffffffffffffebaaedce6af48a03bbfd25e8cd0364141";

fn n() -> U256 {
    U256::from_str_radix(N, 16).expect("hex")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn reference_keccak(data: &[u8]) -> [u8; 32] {
    let mut k = Keccak::v256();
    k.update(data);
    let mut out = [0u8; 32];
    k.finalize(&mut out);
    out
}

/// Keccak-256 against tiny-keccak on `count` inputs, block-boundary lengths first.
pub fn keccak_vectors(count: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let edges = [0usize, 1, 55, 56, 135, 136, 137, 271, 272, 273];
    for i in 0..count {
        let len = edges.get(i).copied().unwrap_or_else(|| rng.gen_range(0..600));
        let mut data = vec![0u8; len];
        rng.fill_bytes(&mut data);
        ensure(keccak256(&data) == reference_keccak(&data), || format!("keccak mismatch at len {len}"))?;
    }
    Ok(format!("{count} inputs match tiny-keccak"))
}

fn frozen(text: &str) -> Vec<(Vec<u8>, Vec<u8>)> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| {
            let (input, digest) = l.split_once(' ').expect("two columns");
            let input = if input == "-" { vec![] } else { hex::decode(input).expect("hex") };
            (input, hex::decode(digest).expect("hex"))
        })
        .collect()
}

/// SHA-256 precompile against digests frozen from Python hashlib.
pub fn sha256_vectors() -> Check {
    let v = frozen(include_str!("../vectors/sha256.txt"));
    for (i, (input, digest)) in v.iter().enumerate() {
        ensure(precompile_hash(HashId::Sha256, input).as_slice() == digest.as_slice(), || format!("vector {i}"))?;
    }
    Ok(format!("{} frozen vectors", v.len()))
}

/// RIPEMD-160 precompile against digests frozen from Node crypto.
pub fn ripemd160_vectors() -> Check {
    let v = frozen(include_str!("../vectors/ripemd160.txt"));
    for (i, (input, digest)) in v.iter().enumerate() {
        let w = precompile_hash(HashId::Ripemd160, input);
        ensure(w[..12] == [0u8; 12] && w[12..] == digest[..], || format!("vector {i}"))?;
    }
    Ok(format!("{} frozen vectors", v.len()))
}

/// `hash‖v‖r‖s` inputs signed by libsecp256k1, with the signer address.
pub fn signed_inputs(count: usize) -> Vec<([u8; 128], Address)> {
    let secp = Secp256k1::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..count)
        .map(|_| {
            let mut sk = [0u8; 32];
            rng.fill_bytes(&mut sk);
            let sk = SecretKey::from_slice(&sk).expect("valid scalar");
            let mut hash = [0u8; 32];
            rng.fill_bytes(&mut hash);
            let (recid, rs) = secp.sign_ecdsa_recoverable(&Message::from_digest(hash), &sk).serialize_compact();
            let mut buf = [0u8; 128];
            buf[..32].copy_from_slice(&hash);
            buf[63] = 27 + recid.to_i32() as u8;
            buf[64..].copy_from_slice(&rs);
            let pk = PublicKey::from_secret_key(&secp, &sk).serialize_uncompressed();
            (buf, Address::from_slice(&reference_keccak(&pk[1..])[12..]))
        })
        .collect()
}

pub fn ecrecover_signers(count: usize) -> Check {
    for (i, (input, signer)) in signed_inputs(count).iter().enumerate() {
        ensure(ecrecover(input) == Some(*signer), || format!("signature {i} recovered wrong signer"))?;
        ensure(precompile_ecrecover(input)[12..] == signer.0, || format!("signature {i} precompile word"))?;
    }
    Ok(format!("{count} libsecp256k1 signatures recover their signer"))
}

/// Picks an r below n that is not the x coordinate of a curve point.
fn off_curve_r(rng: &mut ChaCha8Rng) -> [u8; 32] {
    loop {
        let mut r = [0u8; 32];
        rng.fill_bytes(&mut r);
        r[0] &= 0x7f;
        let mut c = [2u8; 33];
        c[1..].copy_from_slice(&r);
        if PublicKey::from_slice(&c).is_err() {
            return r;
        }
    }
}

/// Malformed inputs, eight classes in rotation, all recovering nothing.
pub fn ecrecover_malformed(count: usize) -> Check {
    let valid = signed_inputs(50);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..count {
        let mut input = valid[i % valid.len()].0;
        match i % 8 {
            0 => {
                input[63] = loop {
                    let v: u8 = rng.gen();
                    if v != 27 && v != 28 {
                        break v;
                    }
                }
            }
            1 => input[32 + rng.gen_range(0..31)] = rng.gen_range(1..=255),
            2 => input[64..96].fill(0),
            3 => input[96..128].fill(0),
            4 => input[64..96].copy_from_slice(&n().saturating_add(U256::from(rng.gen::<u64>())).to_be_bytes::<32>()),
            5 => input[96..128].copy_from_slice(&n().saturating_add(U256::from(rng.gen::<u64>())).to_be_bytes::<32>()),
            6 => input[64..96].copy_from_slice(&off_curve_r(&mut rng)),
            _ => {
                // truncated before v: zero padding makes v invalid
                let short = &input[..rng.gen_range(0..64)];
                ensure(precompile_ecrecover(short) == [0u8; 32], || format!("malformed input {i}"))?;
                continue;
            }
        }
        ensure(ecrecover(&input).is_none() && precompile_ecrecover(&input) == [0u8; 32], || format!("malformed input {i}"))?;
    }
    Ok(format!("{count} malformed inputs return zero"))
}

/// (v, r, s) and (v', r, n - s) recover the same signer.
pub fn malleability(count: usize) -> Check {
    for (i, (input, signer)) in signed_inputs(count).iter().enumerate() {
        let mut twin = *input;
        twin[63] = 55 - twin[63];
        let s = n() - U256::from_be_slice(&input[96..]);
        twin[96..].copy_from_slice(&s.to_be_bytes::<32>());
        ensure(ecrecover(&twin) == Some(*signer), || format!("twin {i} recovered a different signer"))?;
    }
    Ok(format!("{count} malleable twins recover the same signer"))
}

struct Draw([u8; 32], u64);

impl Draw {
    fn next(&mut self, bound: usize) -> usize {
        let h = keccak256(&[self.0.as_slice(), &self.1.to_be_bytes()].concat());
        self.1 += 1;
        (u64::from_be_bytes(h[..8].try_into().expect("8 bytes")) % bound as u64) as usize
    }
}

/// Random trees of 2..=16 string leaves: the compiled verifier accepts the
/// proof and rejects a one-bit corruption, and the proof recovered from the
/// trace equals the tree's.
pub fn merkle_trees(count: usize) -> Check {
    let mut draw = Draw(keccak256(b"merkle trees"), 0);
    let block = crate::corpus_block();
    for t in 0..count {
        let n = 2 + draw.next(15);
        let names: Vec<String> = (0..n).map(|i| format!("leaf-{t}-{i}-{}", draw.next(1 << 20))).collect();
        let leaves: Vec<[u8; 32]> = names.iter().map(|s| keccak256(s.as_bytes())).collect();
        let tree = merkle::Tree::new(&leaves);
        let idx = draw.next(n);
        let proof = tree.proof(idx);

        let mut b = Builder::new();
        let c = b.deploy("Fig3MerkleMint", &[word(tree.root())]);
        let who = actor(&names[idx]);
        let call = |b: &Builder, p: &[[u8; 32]]| {
            let args = [AbiValue::String(names[idx].clone().into_bytes()), AbiValue::Array(p.iter().copied().map(word).collect())];
            TransactionEnv::call(who, c, b.encode(c, "mint", &args))
        };
        let world = b.state().clone();
        let tx = call(&b, &proof);
        let (post, trace) = execute_transaction(&world, &block, &tx).map_err(|e| e.to_string())?;
        // totalSupply is slot 2
        ensure(post.storage_at(&c, U256::from(2u8)) == U256::from(1u8), || format!("tree {t}: valid proof rejected"))?;

        let mut st = StorageTaint::default();
        let taint = analyze_trace(&trace, 0, who, tx.data.len(), &mut st).map_err(|e| e.to_string())?;
        let sem = TxSemantics::analyze(&trace, &tx, 0, Some(&taint), b.abi(c).function(tx.selector()));
        ensure(sem.merkle.len() == 1, || format!("tree {t} (n={n}): {} verifications recognised", sem.merkle.len()))?;
        let m = &sem.merkle[0];
        ensure(m.root == tree.root() && m.proof_elements == proof && m.leaf == names[idx].as_bytes(), || {
            format!("tree {t}: recovered proof differs")
        })?;
        ensure(m.reconstructs_root(keccak256), || format!("tree {t}: root not reconstructed"))?;

        let mut bad = proof.clone();
        let k = draw.next(bad.len());
        bad[k][31] ^= 1;
        let (post, _) = execute_transaction(&world, &block, &call(&b, &bad)).map_err(|e| e.to_string())?;
        ensure(post.storage_at(&c, U256::from(2u8)) == U256::ZERO, || format!("tree {t}: corrupted proof accepted"))?;
    }
    Ok(format!("{count} trees verified and recovered"))
}

const CALLER: u64 = 0xaa;
const TARGET: u64 = 0x1000;
const CALLEE: u64 = 0x2000;

#[derive(Debug, Clone)]
enum Op {
    Raw(u8),
    Push(u8),
    /// Memory or storage opcode preceded by small operand pushes.
    Sized(u8, Vec<u8>),
    CallCallee(u8),
}

const RAW_OPS: [u8; 42] = [
    0x01, 0x02, 0x03, 0x04, 0x06, 0x0a, 0x10, 0x11, 0x14, 0x15, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x1b, 0x1c, 0x30, 0x32,
    0x33, 0x34, 0x35, 0x36, 0x3d, 0x42, 0x43, 0x47, 0x50, 0x54, 0x55, 0x58, 0x59, 0x5a, 0x5b, 0x5f, 0x80, 0x81, 0x82,
    0x83, 0x90, 0x91, 0x92,
];

fn op(calls: bool) -> BoxedStrategy<Op> {
    let base = prop_oneof![
        4 => prop::sample::select(RAW_OPS.to_vec()).prop_map(Op::Raw),
        4 => any::<u8>().prop_map(Op::Push),
        3 => (prop::sample::select(vec![0x52u8, 0x51, 0x53, 0x54, 0x55, 0x20, 0x37]), prop::collection::vec(0u8..96, 3))
            .prop_map(|(o, a)| Op::Sized(o, a)),
    ];
    if calls {
        prop_oneof![11 => base, 1 => (0u8..4).prop_map(Op::CallCallee)].boxed()
    } else {
        base.boxed()
    }
}

fn assemble(ops: &[Op], end: u8) -> Vec<u8> {
    let mut code = Vec::new();
    for op in ops {
        match op {
            Op::Raw(b) => code.push(*b),
            Op::Push(v) => code.extend([0x60, *v]),
            Op::Sized(o, args) => {
                let n = match o {
                    0x52 | 0x53 | 0x55 | 0x20 => 2,
                    0x51 | 0x54 => 1,
                    _ => 3,
                };
                for a in args.iter().take(n).rev() {
                    code.extend([0x60, *a]);
                }
                code.push(*o);
            }
            Op::CallCallee(value) => {
                // CALL(gas, callee, value, 0, 32, 0, 32)
                code.extend([0x60, 0x20, 0x60, 0x00, 0x60, 0x20, 0x60, 0x00, 0x60, *value]);
                code.extend([0x61, (CALLEE >> 8) as u8, CALLEE as u8, 0x5a, 0xf1]);
            }
        }
    }
    if end == 0xf3 || end == 0xfd {
        code.extend([0x60, 0x20, 0x60, 0x00]);
    }
    code.push(end);
    code
}

fn micro_world(target: Vec<u8>, callee: Vec<u8>) -> WorldState {
    let mut w = WorldState::new();
    let mut t = Account::with_code(target);
    t.balance = U256::from(1000u32);
    t.set_storage(U256::from(1u8), U256::from(5u8));
    w.insert(Address::from_low_u64(TARGET), t);
    let mut c = Account::with_code(callee);
    c.set_storage(U256::from(2u8), U256::from(9u8));
    w.insert(Address::from_low_u64(CALLEE), c);
    w.insert(Address::from_low_u64(CALLER), Account::with_balance(U256::from(10u8).pow(U256::from(18u8))));
    w
}

fn micro_program() -> impl Strategy<Value = (Vec<u8>, Vec<u8>, Vec<u8>, u8)> {
    let end = || prop::sample::select(vec![0x00u8, 0xf3, 0xfd, 0xfe]);
    (
        prop::collection::vec(op(true), 0..40),
        end(),
        prop::collection::vec(op(false), 0..20),
        end(),
        prop::collection::vec(any::<u8>(), 0..100),
        0u8..3,
    )
        .prop_map(|(t, te, c, ce, data, value)| (assemble(&t, te), assemble(&c, ce), data, value))
}

/// Random micro-programs calling a random callee: a failed transaction or
/// frame leaves state and storage taint untouched, and the shadow stack
/// matches the machine stack at every step.
pub fn micro_programs(cases: u32) -> Check {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let reverted = Cell::new(0u32);
    let failed_frames = Cell::new(0u32);
    runner
        .run(&micro_program(), |(target, callee, data, value)| {
            let pre = micro_world(target, callee);
            let mut tx = TransactionEnv::call(Address::from_low_u64(CALLER), Address::from_low_u64(TARGET), data.clone());
            tx.value = U256::from(value);
            let (post, trace) = execute_transaction(&pre, &BlockEnv::default(), &tx)
                .map_err(|e| TestCaseError::fail(format!("execution error: {e}")))?;

            let mut storage = StorageTaint::default();
            let analysis = analyze_trace(&trace, 0, tx.sender, data.len(), &mut storage)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(analysis.steps.len(), trace.steps.len());
            for (i, (s, t)) in trace.steps.iter().zip(&analysis.steps).enumerate() {
                prop_assert_eq!(s.stack_inputs.len(), t.inputs.len(), "step {} opcode {:#x}", i, s.opcode);
            }

            if !trace.receipt.success {
                reverted.set(reverted.get() + 1);
                prop_assert_eq!(&post, &pre);
                prop_assert!(storage.is_empty());
                prop_assert!(trace.receipt.storage_writes.is_empty());
            }

            let callee = Address::from_low_u64(CALLEE);
            let calls: Vec<_> = trace.steps.iter().filter_map(|s| s.call.as_ref()).filter(|c| c.target == callee).collect();
            if !calls.is_empty() && calls.iter().all(|c| !c.success) {
                failed_frames.set(failed_frames.get() + 1);
                prop_assert_eq!(post.get(&callee).map(|a| &a.storage), pre.get(&callee).map(|a| &a.storage));
                for k in 0u32..128 {
                    prop_assert_eq!(storage.get(&callee, U256::from(k)), TaintSet::empty());
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "{cases} programs ({} reverted, {} with only failed callee frames)",
        reverted.get(),
        failed_frames.get()
    ))
}
