//! A deliberately broken sort adjoint must be caught by the gradient
//! checks. Lives in its own test binary because the fault switch is global.

use popinv::autodiff::set_sort_adjoint_fault;
use popinv::verify;

#[test]
fn broken_sort_adjoint_fails_the_gradient_checks() {
    let clean = verify::run(Some("gradient"));
    assert!(clean.iter().all(|o| o.passed), "{clean:?}");

    set_sort_adjoint_fault(true);
    let broken = verify::run(Some("gradient"));
    set_sort_adjoint_fault(false);

    for o in &broken {
        let sorts = ["sliced-w2-gradient", "loss-gradient-cut", "loss-gradient-standard"].contains(&o.name);
        assert_eq!(!o.passed, sorts, "{}: {}", o.name, o.detail);
    }
    assert_eq!(broken.iter().filter(|o| !o.passed).count(), 3);
}
