//! End-to-end verification: the quick check suite must be green, and the
//! closed-form performance model must reproduce instrumented counters at
//! BERT-base scale.

use cobra_core::verify::{self, Scale};
use cobra_core::ModelConfig;

#[test]
fn quick_suite_is_green() {
    let results = verify::run(Scale::Quick, 0xc0b7a, None);
    for r in &results {
        assert!(
            r.passed,
            "{} failed: {:?}",
            r.name,
            r.counterexample.as_deref().unwrap_or("no counterexample")
        );
    }
    assert!(results.len() >= 15);
}

#[test]
fn perf_counters_match_at_bert_base_scale() {
    let r = verify::check_perf_consistency(&ModelConfig::bert_base(32), 11);
    assert!(r.passed, "{:?}", r.counterexample);
}

#[test]
fn injected_fault_fails_the_suite() {
    let results = verify::run(Scale::Quick, 7, Some(verify::Fault::FlipRbvmBit));
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    assert_eq!(failed.len(), 1, "exactly the faulted check fails");
    assert!(failed[0].counterexample.is_some());
}
