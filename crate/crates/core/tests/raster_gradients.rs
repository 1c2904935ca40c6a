use qgs_core::oracles::gradcheck_from_seed;

#[test]
fn backward_matches_finite_differences() {
    for seed in 0..20 {
        let r = gradcheck_from_seed(seed, 3, 4, 1e-4);
        println!("seed {seed}: scene {} max rel {:.3e} worst {:?} ({} params)", r.seed, r.max_rel, r.worst, r.checked);
        assert!(r.max_rel <= 1e-4, "{r:?}");
    }
}
