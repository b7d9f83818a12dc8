mod common;

use common::{pipeline_check, primitive_check, PIPELINE_CASES, PRIMITIVES};

#[test]
fn every_primitive_matches_central_differences() {
    for (i, name) in PRIMITIVES.iter().enumerate() {
        let report = primitive_check(name, 100 + i as u64).unwrap();
        assert!(report.passed(), "{name}: {report:?}");
    }
}

#[test]
fn full_pipeline_matches_central_differences() {
    for case in &PIPELINE_CASES {
        let r = pipeline_check(case).unwrap();
        assert_eq!(r.seq_len, 12);
        assert!(r.zero_coords > 0 && r.checked > 1000);
        assert!(
            r.passed(),
            "{case:?}: rel {:.3e} at {:?}, zero grads {:.1e} / {:.1e}",
            r.max_rel_error,
            r.worst,
            r.zero_grad_analytic,
            r.zero_grad_numeric
        );
    }
}
