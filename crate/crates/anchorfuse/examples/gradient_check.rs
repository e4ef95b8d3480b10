//! Verify the analytic modulation gradients against central finite
//! differences on random instances.
//!
//! The backward pass is hand-derived (through the scale/shift, the
//! normalized Gaussian spatial weights, and the two-layer SiLU network), so
//! the crate treats numeric agreement as a hard invariant: the same harness
//! runs here, in `anchorfuse gradcheck`, and in the acceptance tests.

use anchorfuse::tlm::finite_difference_check;

fn main() {
    const TOLERANCE: f64 = 1e-4;
    let report = finite_difference_check(42, 10);

    println!("checked {} random instances", report.instances);
    println!("worst guarded relative error per tensor:");
    for (name, err) in &report.per_tensor {
        println!("  {name:8} {err:.3e}");
    }
    println!(
        "overall: {:.3e} (tolerance {TOLERANCE:.0e}) -> {}",
        report.max_rel_err,
        if report.passes(TOLERANCE) { "PASS" } else { "FAIL" }
    );
    assert!(report.passes(TOLERANCE));
}
