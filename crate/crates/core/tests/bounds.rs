use qgs_core::oracles::suites::bounds_suite;

#[test]
fn supported_rays_stay_inside_tight_box() {
    let rep = bounds_suite(40, 500, 5);
    assert!(rep.supported > 1_000, "{rep:?}");
    assert_eq!(rep.escaped, 0, "{rep:?}");
    assert_eq!(rep.tight_not_in_loose, 0, "{rep:?}");
}
