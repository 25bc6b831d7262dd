mod common;

#[test]
fn every_primitive_and_network_matches_central_differences() {
    let results = common::gradient_suite();
    assert!(results.len() >= 25);
    for (name, err) in results {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}
