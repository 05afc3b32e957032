use gain_core::gradsuite::{full_suite, network_check, operator_suite, NETWORK_SAMPLES, NETWORK_TOLERANCE};

#[test]
fn every_operator_passes_at_default_tolerance() {
    let suite = operator_suite(7);
    let failed: Vec<_> = suite.iter().filter(|e| !e.passed()).map(|e| format!("{}: {}", e.name, e.report)).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(suite.iter().all(|e| e.report.tolerance <= 1e-4));
}

#[test]
fn network_spot_check_passes() {
    for seed in [0, 7] {
        let e = network_check(seed);
        assert!(e.passed(), "seed {seed}: {}", e.report);
        assert_eq!(e.report.tolerance, NETWORK_TOLERANCE);
        let checked: usize = e.report.inputs.iter().map(|r| r.checks.len()).sum();
        assert_eq!(checked, NETWORK_SAMPLES);
    }
}

#[test]
fn suite_names_are_unique_and_cover_attention() {
    let suite = full_suite(1);
    let mut names: Vec<_> = suite.iter().map(|e| e.name).collect();
    for must in ["matmul", "conv3x3", "cross_entropy", "criss_cross_attention", "full_attention", "gai_forward_criss_cross", "network_spot_check"] {
        assert!(names.contains(&must), "{must} missing");
    }
    names.sort();
    names.dedup();
    assert_eq!(names.len(), suite.len());
}

