use denssiam_core::conformance::{full_width_shapes, property_suite};
use denssiam_core::verify::{check_all, GradOp, Precision};

#[test]
fn full_width_stage_shapes() {
    for row in full_width_shapes(0).unwrap() {
        assert!(row.passed(), "{row:?}");
    }
}

#[test]
fn property_suite_passes() {
    for c in property_suite(11).unwrap() {
        assert!(c.passed, "{c:?}");
    }
}

#[test]
fn finite_differences_agree_for_every_op() {
    let reports = check_all(&[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(reports.len(), GradOp::ALL.len() * 5 * 2);
    for r in &reports {
        assert!(r.passed(), "{r:?}");
        let tol = match r.precision {
            Precision::F64 => 1e-5,
            Precision::F32 => 1e-3,
        };
        assert!(r.max_rel_err < tol);
    }
}
