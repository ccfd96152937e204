//! The bundled fixture corpus: compiled contracts deployed through the
//! interpreter, histories signed with deterministic keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cdfuzz_core::evm::{execute_create, execute_transaction, keccak256, Address, BlockEnv, WorldState, U256};
use cdfuzz_core::replay::{Fixture, FixtureTx};
use cdfuzz_core::semantics::abi::{encode_tuple, Abi, AbiValue};
use k256::ecdsa::SigningKey;
use serde_json::Value;

pub mod checks;
pub mod merkle;

/// Expected active defect labels per fixture.
pub const EXPECTED: &[(&str, &[&str])] = &[
    ("fig2_permit", &["SSR", "CSR", "SF", "SM"]),
    ("fig3_mint", &["MR", "MF"]),
    ("fig4_transfer_with_sig", &["SM"]),
    ("fig5_permit_operation", &["ISV", "SM", "CSR"]),
    ("fig7_add_users", &["HC"]),
    ("fig8_gamble", &["WR"]),
    ("fig9_fixed_permit", &[]),
    ("nonce_guard_permit", &["CSR", "SF", "SM"]),
    ("bound_address_permit", &["SSR", "SF", "SM"]),
    ("used_proof_mint", &["MF"]),
    ("bound_recipient_claim", &["MR"]),
    ("guarded_transfer_with_sig", &[]),
    ("encoded_add_users", &[]),
    ("signer_log", &["CSR", "SM"]),
    ("capped_sig_mint", &[]),
    ("cached_domain_permit", &[]),
    ("empty", &[]),
];

/// Mitigated variants and the defect classes their fix removes.
pub const MITIGATED: &[(&str, &[&str])] = &[
    ("fig9_fixed_permit", &["SSR", "CSR", "SF", "SM"]),
    ("cached_domain_permit", &["SSR", "CSR", "SF", "SM"]),
    ("nonce_guard_permit", &["SSR"]),
    ("bound_address_permit", &["CSR"]),
    ("capped_sig_mint", &["SSR"]),
    ("used_proof_mint", &["MR"]),
    ("bound_recipient_claim", &["MF"]),
    ("guarded_transfer_with_sig", &["SM"]),
    ("encoded_add_users", &["HC"]),
    ("signer_log", &["ISV"]),
];

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixtures_dir() -> PathBuf {
    workspace_root().join("fixtures")
}

fn artifacts_dir() -> PathBuf {
    workspace_root().join("corpus/artifacts")
}

pub struct Artifact {
    pub abi: Value,
    pub bytecode: Vec<u8>,
}

pub fn load_artifact(name: &str) -> Artifact {
    let path = artifacts_dir().join(format!("{name}.json"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let v: Value = serde_json::from_str(&text).expect("artifact JSON");
    let code = v["bytecode"].as_str().expect("bytecode").trim_start_matches("0x");
    Artifact { abi: v["abi"].clone(), bytecode: hex_decode(code) }
}

fn hex_decode(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).expect("hex")).collect()
}

/// Deterministic key for a named actor.
pub fn key(name: &str) -> SigningKey {
    let secret = keccak256(format!("cdfuzz corpus key {name}").as_bytes());
    SigningKey::from_bytes(&secret.into()).expect("valid scalar")
}

pub fn address_of(key: &SigningKey) -> Address {
    let point = key.verifying_key().to_encoded_point(false);
    Address::from_slice(&keccak256(&point.as_bytes()[1..])[12..])
}

pub fn actor(name: &str) -> Address {
    address_of(&key(name))
}

/// (v, r, s) over a 32-byte digest, low-s normalized.
pub fn sign(key: &SigningKey, digest: [u8; 32]) -> (u8, [u8; 32], [u8; 32]) {
    let (sig, recid) = key.sign_prehash_recoverable(&digest).expect("signing");
    let bytes = sig.to_bytes();
    let mut r = [0u8; 32];
    let mut s = [0u8; 32];
    r.copy_from_slice(&bytes[..32]);
    s.copy_from_slice(&bytes[32..]);
    (27 + recid.is_y_odd() as u8, r, s)
}

pub fn sig_values(key: &SigningKey, digest: [u8; 32]) -> [AbiValue; 3] {
    let (v, r, s) = sign(key, digest);
    [AbiValue::Uint(U256::from(v)), AbiValue::FixedBytes(r.to_vec()), AbiValue::FixedBytes(s.to_vec())]
}

/// 65-byte r‖s‖v signature.
pub fn sig_bytes(key: &SigningKey, digest: [u8; 32]) -> Vec<u8> {
    let (v, r, s) = sign(key, digest);
    [r.as_slice(), s.as_slice(), &[v]].concat()
}

pub fn ether(n: u64) -> U256 {
    U256::from(n) * U256::from(10u64).pow(U256::from(18u64))
}

pub fn uint(n: u64) -> AbiValue {
    AbiValue::Uint(U256::from(n))
}

pub fn addr(a: Address) -> AbiValue {
    AbiValue::Address(a)
}

pub fn word(w: [u8; 32]) -> AbiValue {
    AbiValue::FixedBytes(w.to_vec())
}

pub fn corpus_block() -> BlockEnv {
    BlockEnv {
        number: 18_500_000,
        timestamp: 1_700_000_000,
        coinbase: actor("coinbase"),
        prevrandao: keccak256(b"prevrandao"),
        ..BlockEnv::default()
    }
}

/// Records deployments and a transaction history as a fixture.
pub struct Builder {
    initial: WorldState,
    world: WorldState,
    block: BlockEnv,
    deployer: Address,
    txs: Vec<FixtureTx>,
    abis_json: BTreeMap<Address, Value>,
    abis: BTreeMap<Address, Abi>,
}

impl Default for Builder {
    fn default() -> Self {
        Builder::new()
    }
}

impl Builder {
    pub fn new() -> Self {
        let deployer = actor("deployer");
        let mut b = Builder {
            initial: WorldState::new(),
            world: WorldState::new(),
            block: corpus_block(),
            deployer,
            txs: Vec::new(),
            abis_json: BTreeMap::new(),
            abis: BTreeMap::new(),
        };
        b.fund(deployer, ether(100));
        b
    }

    fn setup(&mut self) -> &mut WorldState {
        assert!(self.txs.is_empty(), "setup after history started");
        &mut self.world
    }

    pub fn fund(&mut self, who: Address, wei: U256) {
        self.setup().account_mut(who).balance = wei;
        self.initial = self.world.clone();
    }

    pub fn deploy(&mut self, name: &str, args: &[AbiValue]) -> Address {
        let art = load_artifact(name);
        let mut init = art.bytecode.clone();
        init.extend(encode_tuple(args));
        let deployer = self.deployer;
        let block = self.block.clone();
        let world = self.setup();
        let (post, created, trace) =
            execute_create(world, &block, deployer, &init, U256::ZERO, 30_000_000).expect("deploy executes");
        let address = created.unwrap_or_else(|| panic!("{name} deployment failed: {:?}", trace.receipt.halt));
        self.world = post;
        self.initial = self.world.clone();
        self.abis.insert(address, Abi::from_json(&art.abi).expect("artifact ABI"));
        self.abis_json.insert(address, art.abi);
        address
    }

    pub fn encode(&self, to: Address, function: &str, args: &[AbiValue]) -> Vec<u8> {
        let f = self.abis[&to]
            .functions
            .iter()
            .find(|f| f.name == function)
            .unwrap_or_else(|| panic!("no function {function}"));
        f.encode_input(args)
    }

    /// Appends a call to the history; returns whether it succeeded.
    pub fn call(&mut self, from: Address, to: Address, function: &str, args: &[AbiValue], value: U256) -> bool {
        if !self.world.contains(&from) {
            // Untouched by history so far, so the initial snapshot may hold it too.
            self.world.account_mut(from).balance = ether(10);
            self.initial.account_mut(from).balance = ether(10);
        }
        let data = self.encode(to, function, args);
        let tx = cdfuzz_core::evm::TransactionEnv { value, ..cdfuzz_core::evm::TransactionEnv::call(from, to, data) };
        let (post, trace) = execute_transaction(&self.world, &self.block, &tx).expect("history executes");
        self.world = post;
        self.txs.push(FixtureTx { tx, block: self.block.clone(), block_override: None });
        trace.receipt.success
    }

    /// Like [`Builder::call`] but panics when the call reverts.
    pub fn must_call(&mut self, from: Address, to: Address, function: &str, args: &[AbiValue], value: U256) {
        assert!(self.call(from, to, function, args, value), "{function} reverted during corpus build");
    }

    pub fn set_balance(&mut self, who: Address, wei: U256) {
        self.fund(who, wei);
    }

    pub fn finish(self) -> Fixture {
        Fixture {
            accounts: self.initial,
            block: self.block,
            transactions: self.txs,
            abis: self.abis,
            abis_json: self.abis_json,
        }
    }

    pub fn state(&self) -> &WorldState {
        &self.world
    }

    pub fn abi(&self, contract: Address) -> &Abi {
        &self.abis[&contract]
    }
}

fn deadline() -> u64 {
    corpus_block().timestamp + 3600
}

fn abi_encode_hash(values: &[AbiValue]) -> [u8; 32] {
    keccak256(&encode_tuple(values))
}

fn packed(parts: &[&[u8]]) -> [u8; 32] {
    keccak256(&parts.concat())
}

fn u256_word(n: u64) -> [u8; 32] {
    U256::from(n).to_be_bytes::<32>()
}

/// Permits signed by three owners, each submitted by the spender it approves.
fn simple_permits(name: &str, digest: impl Fn(Address, Address, u64, u64, u64) -> [u8; 32]) -> Fixture {
    let mut b = Builder::new();
    let c = b.deploy(name, &[]);
    for (i, (owner, spender)) in [("alice", "dave"), ("bob", "erin"), ("carol", "frank")].into_iter().enumerate() {
        let k = key(owner);
        let value = 1_000 * (i as u64 + 1);
        let d = digest(address_of(&k), c, value, 0, deadline());
        let [v, r, s] = sig_values(&k, d);
        b.must_call(actor(spender), c, "permit", &[addr(address_of(&k)), uint(value), uint(deadline()), v, r, s], U256::ZERO);
    }
    b.finish()
}

pub fn fig2_permit() -> Fixture {
    simple_permits("Fig2Permit", |owner, _, value, _, dl| {
        abi_encode_hash(&[addr(owner), uint(value), uint(dl)])
    })
}

pub fn nonce_guard_permit() -> Fixture {
    simple_permits("NonceGuardPermit", |owner, _, value, nonce, dl| {
        abi_encode_hash(&[addr(owner), uint(value), uint(nonce), uint(dl)])
    })
}

pub fn bound_address_permit() -> Fixture {
    simple_permits("BoundAddressPermit", |owner, c, value, _, dl| {
        abi_encode_hash(&[addr(owner), uint(value), uint(dl), addr(c)])
    })
}

fn permit_typehash() -> [u8; 32] {
    keccak256(b"Permit(address owner,address spender,uint256 value,uint256 nonce,uint256 deadline)")
}

fn domain_separator(name: &str, contract: Address) -> [u8; 32] {
    let type_hash = keccak256(b"EIP712Domain(string name,string version,uint256 chainId,address verifyingContract)");
    abi_encode_hash(&[
        word(type_hash),
        word(keccak256(name.as_bytes())),
        word(keccak256(b"1")),
        uint(corpus_block().chainid),
        addr(contract),
    ])
}

fn typed_permit_digest(domain: [u8; 32], owner: Address, spender: Address, value: u64, nonce: u64) -> [u8; 32] {
    let st = abi_encode_hash(&[word(permit_typehash()), addr(owner), addr(spender), uint(value), uint(nonce), uint(deadline())]);
    packed(&[b"\x19\x01", &domain, &st])
}

fn typed_permits(b: &mut Builder, c: Address, domain: [u8; 32]) {
    for (i, (owner, spender, submitter)) in
        [("alice", "dave", "dave"), ("bob", "erin", "frank"), ("alice", "erin", "erin")].into_iter().enumerate()
    {
        let k = key(owner);
        let o = address_of(&k);
        let nonce = if i == 2 { 1 } else { 0 };
        let value = 500 * (i as u64 + 1);
        let [v, r, s] = sig_values(&k, typed_permit_digest(domain, o, actor(spender), value, nonce));
        b.must_call(actor(submitter), c, "permit", &[addr(o), addr(actor(spender)), uint(value), uint(deadline()), v, r, s], U256::ZERO);
    }
}

pub fn fig9_fixed_permit() -> Fixture {
    let mut b = Builder::new();
    let c = b.deploy("Fig9FixedPermit", &[]);
    typed_permits(&mut b, c, domain_separator("FixedPermitToken", c));
    b.finish()
}

pub fn cached_domain_permit() -> Fixture {
    let mut b = Builder::new();
    let c = b.deploy("CachedDomainPermit", &[]);
    b.must_call(b.deployer, c, "initialize", &[], U256::ZERO);
    typed_permits(&mut b, c, domain_separator("CachedDomainToken", c));
    b.finish()
}

fn merkle_strings() -> Vec<&'static str> {
    vec!["alice", "bob", "carol", "dave", "erin"]
}

fn string_mint(name: &str) -> Fixture {
    let leaves: Vec<[u8; 32]> = merkle_strings().iter().map(|s| keccak256(s.as_bytes())).collect();
    let tree = merkle::Tree::new(&leaves);
    let mut b = Builder::new();
    let c = b.deploy(name, &[word(tree.root())]);
    for i in [0usize, 2] {
        let who = merkle_strings()[i];
        let proof = AbiValue::Array(tree.proof(i).into_iter().map(word).collect());
        b.must_call(actor(who), c, "mint", &[AbiValue::String(who.as_bytes().to_vec()), proof], U256::ZERO);
    }
    b.finish()
}

pub fn fig3_mint() -> Fixture {
    string_mint("Fig3MerkleMint")
}

pub fn used_proof_mint() -> Fixture {
    string_mint("UsedProofMint")
}

pub fn bound_recipient_claim() -> Fixture {
    let claims: Vec<(Address, u64)> = ["alice", "bob", "carol", "dave"].iter().zip(1..).map(|(n, i)| (actor(n), 100 * i)).collect();
    let leaves: Vec<[u8; 32]> = claims.iter().map(|(a, n)| packed(&[a.as_bytes(), &u256_word(*n)])).collect();
    let tree = merkle::Tree::new(&leaves);
    let mut b = Builder::new();
    let c = b.deploy("BoundRecipientClaim", &[word(tree.root())]);
    for i in [1usize, 3] {
        let (account, amount) = claims[i];
        let proof = AbiValue::Array(tree.proof(i).into_iter().map(word).collect());
        b.must_call(actor("relayer"), c, "claim", &[addr(account), uint(amount), proof], U256::ZERO);
    }
    b.finish()
}

fn transfer_with_sig(name: &str) -> Fixture {
    let mut b = Builder::new();
    let owner = key("owner");
    let c = b.deploy(name, &[addr(address_of(&owner)), uint(1_000_000)]);
    for (to, value) in [("bob", 250u64), ("carol", 75)] {
        let d = packed(&[actor(to).as_bytes(), &u256_word(value), c.as_bytes()]);
        let [v, r, s] = sig_values(&owner, d);
        b.must_call(actor(to), c, "transferWithSig", &[addr(actor(to)), uint(value), v, r, s], U256::ZERO);
    }
    b.finish()
}

pub fn fig4_transfer_with_sig() -> Fixture {
    transfer_with_sig("Fig4TransferWithSig")
}

pub fn guarded_transfer_with_sig() -> Fixture {
    transfer_with_sig("GuardedTransferWithSig")
}

pub fn fig5_permit_operation() -> Fixture {
    let mut b = Builder::new();
    let manager = key("manager");
    let op_type = actor("op-type-transfer");
    let c = b.deploy("Fig5PermitOperation", &[addr(op_type), addr(address_of(&manager))]);
    for op_id in [1u64, 2] {
        let d = packed(&[op_type.as_bytes(), &u256_word(op_id)]);
        let [v, r, s] = sig_values(&manager, d);
        b.must_call(actor("operator"), c, "permitOperation", &[addr(op_type), uint(op_id), v, r, s], U256::ZERO);
    }
    b.finish()
}

fn add_users(name: &str, hash: impl Fn(&[AbiValue; 2]) -> [u8; 32]) -> Fixture {
    let mut b = Builder::new();
    let owner = key("owner");
    let c = b.deploy(name, &[addr(address_of(&owner))]);
    let lists = [
        AbiValue::Array(vec![addr(actor("admin-1")), addr(actor("admin-2"))]),
        AbiValue::Array(vec![addr(actor("user-1"))]),
    ];
    let digest = packed(&[&[0x19, 0x00], c.as_bytes(), &hash(&lists)]);
    let sig = AbiValue::Bytes(sig_bytes(&owner, digest));
    let [admins, users] = lists;
    b.must_call(actor("operator"), c, "addUsers", &[admins, users, sig], U256::ZERO);
    b.finish()
}

pub fn fig7_add_users() -> Fixture {
    use cdfuzz_core::semantics::abi::{encode_packed, AbiType};
    let ty = AbiType::Array(Box::new(AbiType::Address));
    add_users("Fig7AddUsers", |[a, u]| packed(&[&encode_packed(&ty, a), &encode_packed(&ty, u)]))
}

pub fn encoded_add_users() -> Fixture {
    add_users("EncodedAddUsers", |lists| abi_encode_hash(lists))
}

pub fn fig8_gamble() -> Fixture {
    let mut b = Builder::new();
    let c = b.deploy("Fig8Gamble", &[]);
    b.set_balance(c, ether(10));
    for who in ["alice", "bob"] {
        b.fund(actor(who), ether(5));
    }
    for who in ["alice", "bob"] {
        b.must_call(actor(who), c, "gamble", &[], ether(1));
    }
    b.finish()
}

pub fn signer_log() -> Fixture {
    let mut b = Builder::new();
    let c = b.deploy("SignerLog", &[]);
    for (who, msg) in [("alice", "order #1"), ("bob", "order #2")] {
        let digest = keccak256(msg.as_bytes());
        let [v, r, s] = sig_values(&key(who), digest);
        b.must_call(actor(who), c, "record", &[word(digest), v, r, s], U256::ZERO);
    }
    b.finish()
}

pub fn capped_sig_mint() -> Fixture {
    let mut b = Builder::new();
    let minter = key("minter");
    let c = b.deploy("CappedSigMint", &[addr(address_of(&minter))]);
    for (to, amount) in [("bob", 100u64), ("carol", 40)] {
        let d = packed(&[actor(to).as_bytes(), &u256_word(amount), c.as_bytes()]);
        let [v, r, s] = sig_values(&minter, d);
        b.must_call(actor(to), c, "mint", &[addr(actor(to)), uint(amount), v, r, s], U256::ZERO);
    }
    b.finish()
}

pub fn empty() -> Fixture {
    Fixture {
        accounts: WorldState::new(),
        block: corpus_block(),
        transactions: Vec::new(),
        abis: BTreeMap::new(),
        abis_json: BTreeMap::new(),
    }
}

/// Every fixture with its file stem.
pub fn all() -> Vec<(&'static str, Fixture)> {
    vec![
        ("fig2_permit", fig2_permit()),
        ("fig3_mint", fig3_mint()),
        ("fig4_transfer_with_sig", fig4_transfer_with_sig()),
        ("fig5_permit_operation", fig5_permit_operation()),
        ("fig7_add_users", fig7_add_users()),
        ("fig8_gamble", fig8_gamble()),
        ("fig9_fixed_permit", fig9_fixed_permit()),
        ("nonce_guard_permit", nonce_guard_permit()),
        ("bound_address_permit", bound_address_permit()),
        ("used_proof_mint", used_proof_mint()),
        ("bound_recipient_claim", bound_recipient_claim()),
        ("guarded_transfer_with_sig", guarded_transfer_with_sig()),
        ("encoded_add_users", encoded_add_users()),
        ("signer_log", signer_log()),
        ("capped_sig_mint", capped_sig_mint()),
        ("cached_domain_permit", cached_domain_permit()),
        ("empty", empty()),
    ]
}

/// Canonical on-disk text of a fixture.
pub fn render(fixture: &Fixture) -> String {
    let mut s = serde_json::to_string_pretty(&fixture.to_json()).expect("serializable");
    s.push('\n');
    s
}
