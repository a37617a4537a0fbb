use xpdnet_core::gradcheck::standard_suite;

#[test]
fn every_check_passes() {
    let reports = standard_suite().unwrap();
    for r in &reports {
        println!("{:<28} max_rel_err {:.3e} (tol {:.0e}, {} entries)", r.name, r.max_rel_err, r.tolerance, r.entries);
    }
    assert!(reports.len() >= 6);
    assert!(reports.iter().all(|r| r.passed));
}
