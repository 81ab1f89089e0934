use std::time::Instant;

use gmmjepa::gradsuite::{run_suite, Fault, SuiteOptions, BLOCKS};

#[test]
fn every_block_passes_within_budget() {
    let start = Instant::now();
    let res = run_suite(None, None, SuiteOptions::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(res.len(), BLOCKS.len());
    for r in &res {
        eprintln!("{:<20} {:.3e} ({} entries, {:.0} ms)", r.name, r.max_rel_err, r.checked, r.elapsed_ms);
        assert!(r.checked > 0, "{}", r.name);
        assert!(r.passed && r.max_rel_err < 1e-4, "{}: {:.3e} at {:?}", r.name, r.max_rel_err, r.worst);
    }
    assert!(secs < 60.0, "suite took {secs:.1} s");
}

#[test]
fn detached_sine_is_caught() {
    let res = run_suite(Some("snake_beta"), Some(Fault::DetachSnakeSine), SuiteOptions::default()).unwrap();
    assert_eq!(res.len(), 1);
    assert!(!res[0].passed, "fault slipped through: {:.3e}", res[0].max_rel_err);
    assert!(res[0].max_rel_err > 1e-2);
}

#[test]
fn prefix_filter_selects_both_encoders() {
    let res = run_suite(Some("encoder"), None, SuiteOptions::default()).unwrap();
    let names: Vec<_> = res.iter().map(|r| r.name).collect();
    assert_eq!(names, ["encoder_mel", "encoder_wave"]);
}
