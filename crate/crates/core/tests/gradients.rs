mod common;

#[test]
fn every_loss_component_matches_central_differences() {
    for case in common::gradient_suite(100, 7).unwrap() {
        eprintln!("{}: {:.2e}", case.name, case.worst);
        assert!(
            case.worst <= common::FD_TOL,
            "{}: worst relative error {:.3e}",
            case.name,
            case.worst
        );
    }
}

#[test]
fn harness_agrees_on_a_closed_form_derivative() {
    use eve_core::numeric::{Params, Tensor};
    let mut p = Params::new();
    p.insert("x".into(), Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap());
    let coords: Vec<(String, usize)> = (0..3).map(|i| ("x".to_string(), i)).collect();
    let ok = common::fd_relative_error(
        &p,
        |g, p| {
            let x = g.param("x", &p["x"]);
            let t = g.tanh(x);
            g.sum(t)
        },
        &coords,
    )
    .unwrap();
    assert!(ok < 1e-8);
}
