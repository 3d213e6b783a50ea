mod common;

use common::gradsuite::run_all;

#[test]
fn every_layer_and_the_joint_loss_pass_finite_differences() {
    let results = run_all();
    for r in &results {
        println!("{:<30} {:.3e} (tol {:.0e}) worst {}", r.name, r.error, r.tolerance, r.worst);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
