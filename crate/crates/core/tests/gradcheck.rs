use atlas_msa::gradcheck::{gradcheck_op, SuiteOptions, SUITE_OPS};

#[test]
fn every_backward_matches_finite_differences() {
    let opts = SuiteOptions::default();
    let mut failed = Vec::new();
    for op in SUITE_OPS {
        let r = gradcheck_op(op, &opts).unwrap();
        print!("{}", r.to_table());
        assert!(r.instances >= 20);
        if !r.passed() {
            failed.push(op);
        }
    }
    assert!(failed.is_empty(), "failing ops: {failed:?}");
}

#[test]
fn suite_is_deterministic() {
    let opts = SuiteOptions { instances: 3, ..SuiteOptions::default() };
    let a = gradcheck_op("top_down_attention", &opts).unwrap().to_csv();
    let b = gradcheck_op("top_down_attention", &opts).unwrap().to_csv();
    assert_eq!(a, b);
}
