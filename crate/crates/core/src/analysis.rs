//! End-to-end driver: replay a fixture, fuzz every seed, judge every case.

use std::collections::{BTreeMap, BTreeSet};

use crate::evm::{Address, CryptoApi};
use crate::fuzz::{execute_case, generate_sequences, CaseStep, FuzzConfig, FuzzError, TestCase};
use crate::oracles::{judge_case, merge_findings, CaseRun, Defect, Finding};
use crate::replay::{build_seed_pool, Fixture, PreimageRegistry, ReplayError, ReplayOutcome, Seed};
use crate::semantics::FunctionProfile;

#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub fuzz: FuzzConfig,
    pub max_seeds: usize,
    /// Restricts the detectors that run; `None` runs all of them.
    pub only: Option<BTreeSet<Defect>>,
}

impl AnalysisConfig {
    pub fn for_fixture(fixture: &Fixture) -> Self {
        AnalysisConfig {
            fuzz: FuzzConfig::for_fixture(fixture),
            max_seeds: crate::replay::DEFAULT_POOL_CAPACITY,
            only: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("replay failed at {0}")]
    Replay(#[from] ReplayError),
    #[error("case execution failed: {0}")]
    Fuzz(#[from] FuzzError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractAnalysis {
    pub address: Address,
    /// Active and suppressed findings, ordered by (selector, defect).
    pub findings: Vec<Finding>,
    pub seeds: usize,
    pub selectors: BTreeSet<[u8; 4]>,
    pub crypto_apis: BTreeSet<CryptoApi>,
    pub cases_executed: usize,
    /// Stubbed precompile ids reached anywhere in history or cases.
    pub stubbed_precompiles: BTreeSet<u8>,
    /// Transactions whose shadow stack fell out of step with the machine.
    pub taint_desyncs: usize,
}

impl ContractAnalysis {
    pub fn active_defects(&self) -> BTreeSet<Defect> {
        self.findings.iter().filter(|f| f.is_active()).map(|f| f.defect).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Analysis {
    pub contracts: Vec<ContractAnalysis>,
}

impl Analysis {
    pub fn active_findings(&self) -> impl Iterator<Item = &Finding> {
        self.contracts.iter().flat_map(|c| c.findings.iter()).filter(|f| f.is_active())
    }

    pub fn contract(&self, address: &Address) -> Option<&ContractAnalysis> {
        self.contracts.iter().find(|c| c.address == *address)
    }
}

/// Seeds of one contract in pool order.
fn seeds_by_contract(outcome: &ReplayOutcome) -> BTreeMap<Address, Vec<&Seed>> {
    let mut map: BTreeMap<Address, Vec<&Seed>> = BTreeMap::new();
    for s in &outcome.pool.seeds {
        map.entry(s.contract()).or_default().push(s);
    }
    map
}

/// All test cases of a contract with their final `case-N` ids.
pub fn contract_cases(outcome: &ReplayOutcome, contract: &Address, cfg: &FuzzConfig) -> Vec<TestCase> {
    let seeds = seeds_by_contract(outcome);
    let mut cases = Vec::new();
    for (i, seed) in seeds.get(contract).into_iter().flatten().enumerate() {
        let Some(profile) = outcome.profiles.get(&(seed.contract(), seed.selector)) else { continue };
        cases.extend(generate_sequences(seed, i, profile, cfg));
    }
    for (n, c) in cases.iter_mut().enumerate() {
        c.id = format!("case-{n}");
    }
    cases
}

fn judge_all(
    executed: &[(TestCase, Vec<CaseStep>)],
    profiles: &BTreeMap<(Address, [u8; 4]), FunctionProfile>,
    preimages: &PreimageRegistry,
    only: Option<&BTreeSet<Defect>>,
) -> Vec<Finding> {
    let mut out = Vec::new();
    for (case, steps) in executed {
        let Some(profile) = profiles.get(&(case.contract, case.selector)) else { continue };
        let run = CaseRun { case, steps, profile, preimages };
        out.extend(judge_case(&run, only));
    }
    out
}

/// Runs the whole pipeline on a fixture.
pub fn analyze(fixture: &Fixture, cfg: &AnalysisConfig) -> Result<Analysis, AnalysisError> {
    let outcome = build_seed_pool(fixture, cfg.max_seeds)?;
    let targets: BTreeSet<Address> = fixture.transactions.iter().map(|t| t.tx.to).collect();
    let seeds = seeds_by_contract(&outcome);
    let mut contracts = Vec::new();

    for address in targets {
        let cases = contract_cases(&outcome, &address, &cfg.fuzz);
        let mut executed = Vec::with_capacity(cases.len());
        for case in cases {
            let steps = execute_case(&case)?;
            executed.push((case, steps));
        }

        let mut preimages = outcome.preimages.clone();
        let mut stubbed: BTreeSet<u8> = BTreeSet::new();
        let mut desyncs = 0usize;
        for h in outcome.history.iter().filter(|h| h.tx.to == address) {
            stubbed.extend(h.stubbed_precompiles.iter().copied());
            desyncs += h.taint_error.is_some() as usize;
        }
        for (_, steps) in &executed {
            for s in steps {
                preimages.record(&s.semantics);
                stubbed.extend(s.trace.stubbed_precompiles.iter().copied());
                desyncs += s.taint_error.is_some() as usize;
            }
        }

        let lengths: BTreeMap<String, usize> = executed.iter().map(|(c, _)| (c.id.clone(), c.sequence.len())).collect();
        let raw = judge_all(&executed, &outcome.profiles, &preimages, cfg.only.as_ref());
        let mut findings = merge_findings(raw, &lengths);
        findings.sort_by_key(|f| (f.selector, f.defect));

        let contract_seeds = seeds.get(&address).map(Vec::as_slice).unwrap_or(&[]);
        let crypto_apis = outcome
            .profiles
            .iter()
            .filter(|((a, _), _)| *a == address)
            .flat_map(|(_, p)| p.crypto_apis_used.iter().copied())
            .collect();
        contracts.push(ContractAnalysis {
            address,
            findings,
            seeds: contract_seeds.len(),
            selectors: contract_seeds.iter().map(|s| s.selector).collect(),
            crypto_apis,
            cases_executed: executed.len(),
            stubbed_precompiles: stubbed,
            taint_desyncs: desyncs,
        });
    }
    Ok(Analysis { contracts })
}

/// Regenerates and re-executes the evidence case of `finding` and runs its
/// detector again.
pub fn reconfirm(fixture: &Fixture, cfg: &AnalysisConfig, finding: &Finding) -> Result<Option<Finding>, AnalysisError> {
    let outcome = build_seed_pool(fixture, cfg.max_seeds)?;
    let cases = contract_cases(&outcome, &finding.contract, &cfg.fuzz);
    let Some(case) = cases.into_iter().find(|c| c.id == finding.evidence.case_id) else { return Ok(None) };
    let steps = execute_case(&case)?;
    let mut preimages = outcome.preimages.clone();
    for s in &steps {
        preimages.record(&s.semantics);
    }
    let Some(profile) = outcome.profiles.get(&(case.contract, case.selector)) else { return Ok(None) };
    let run = CaseRun { case: &case, steps: &steps, profile, preimages: &preimages };
    Ok(crate::oracles::detector(finding.defect)(&run))
}
