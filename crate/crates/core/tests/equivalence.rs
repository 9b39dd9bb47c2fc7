use atlas_msa::block::CommunicationMode;
use atlas_msa::oracle::{check_equivalence, fixture_family};

#[test]
fn block_matches_naive_oracle_on_the_family() {
    for f in fixture_family() {
        for mode in CommunicationMode::ALL {
            let case = check_equivalence(&f, mode, false).unwrap();
            assert!(case.oracle_equal, "{} {mode}: first mismatch at scale {:?}", case.fixture, case.first_mismatch);
        }
    }
}

#[test]
fn mean_pooling_variant_matches_too() {
    let mode: CommunicationMode = "msa+meanpool".parse().unwrap();
    for f in fixture_family().iter().step_by(3) {
        assert!(check_equivalence(f, mode, false).unwrap().passed(), "{}", f.name());
    }
}

#[test]
fn a_tiny_weight_fault_is_detected() {
    for f in fixture_family().iter().step_by(5) {
        let case = check_equivalence(f, CommunicationMode::MSA, true).unwrap();
        assert!(!case.oracle_equal, "{}", f.name());
    }
}
