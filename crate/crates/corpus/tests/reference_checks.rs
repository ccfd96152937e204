use cdfuzz_core::evm::{execute_transaction, Account, Address, BlockEnv, TransactionEnv, WorldState, U256};
use cdfuzz_corpus::checks;

fn pass(check: checks::Check) {
    if let Err(e) = check {
        panic!("{e}");
    }
}

#[test]
fn keccak_matches_reference() {
    pass(checks::keccak_vectors(100));
}

#[test]
fn sha256_frozen_vectors() {
    pass(checks::sha256_vectors());
}

#[test]
fn ripemd160_frozen_vectors() {
    pass(checks::ripemd160_vectors());
}

#[test]
fn ecrecover_reference_signers() {
    pass(checks::ecrecover_signers(100));
}

#[test]
fn ecrecover_malformed_inputs() {
    pass(checks::ecrecover_malformed(10_000));
}

#[test]
fn ecrecover_malleable_twins() {
    pass(checks::malleability(100));
}

#[test]
fn merkle_random_trees() {
    pass(checks::merkle_trees(50));
}

#[test]
fn micro_programs_atomic_and_lockstep() {
    pass(checks::micro_programs(1000));
}

#[test]
fn ecrecover_precompile_through_staticcall() {
    let (input, signer) = checks::signed_inputs(1)[0];
    // CALLDATACOPY(0,0,128); STATICCALL(gas,1,0,128,0,32); SSTORE(0, MLOAD(0)); SSTORE(1, RETURNDATASIZE)
    let code = hex::decode("60806000600037602060006080600060015afa50600051600055 3d600155 00".replace(' ', "")).unwrap();
    let to = Address::from_low_u64(0x1000);
    let mut world = WorldState::new();
    world.insert(to, Account::with_code(code));
    let tx = TransactionEnv::call(Address::from_low_u64(0xaa), to, input.to_vec());
    let (post, trace) = execute_transaction(&world, &BlockEnv::default(), &tx).unwrap();
    assert!(trace.receipt.success);
    assert_eq!(post.storage_at(&to, U256::ZERO).to_be_bytes::<32>()[12..], signer.0);
    assert_eq!(post.storage_at(&to, U256::from(1u8)), U256::from(32u8));

    let mut bad = input;
    bad[63] = 29;
    let tx = TransactionEnv::call(Address::from_low_u64(0xaa), to, bad.to_vec());
    let (post, _) = execute_transaction(&world, &BlockEnv::default(), &tx).unwrap();
    // failure writes nothing, so the output area still holds the hash
    assert_eq!(post.storage_at(&to, U256::ZERO), U256::from_be_slice(&bad[..32]));
    assert_eq!(post.storage_at(&to, U256::from(1u8)), U256::ZERO);
}
