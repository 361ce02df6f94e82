//! Finite-difference verification of every primitive and of the full
//! segmentation graph, all in 64-bit mode.

use cpa_core::fdsuite::{model_report, primitive_reports};
use cpa_core::model::Variant;

const TOL: f64 = 1e-4;

#[test]
fn every_primitive_matches_finite_differences() {
    let rows = primitive_reports(20260822).expect("suite runs");
    let mut worst = (String::new(), 0.0f64);
    for row in &rows {
        let e = row.report.max_rel_err();
        assert!(
            e < TOL,
            "{}: max rel err {e:.3e} over {} checked elements, worst pair {:?}",
            row.name,
            row.report.checked(),
            row.report.rows.iter().max_by(|a, b| {
                a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap()
            })
        );
        if e > worst.1 {
            worst = (row.name.clone(), e);
        }
    }
    println!("primitives: {} checks, worst {} at {:.3e}", rows.len(), worst.0, worst.1);
}

#[test]
fn end_to_end_model_matches_finite_differences() {
    let report = model_report(Variant::Cpa, 2, 20260822).expect("model check runs");
    let worst = report
        .rows
        .iter()
        .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
        .expect("nonempty");
    assert!(
        report.max_rel_err() < TOL,
        "worst group {} at {:.3e}, pair {:?}",
        worst.name,
        worst.max_rel_err,
        worst.worst_pair
    );
    println!(
        "model: {} parameter groups, {} elements, worst {} at {:.3e}",
        report.rows.len(),
        report.checked(),
        worst.name,
        worst.max_rel_err
    );
}
