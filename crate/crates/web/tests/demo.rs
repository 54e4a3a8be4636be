use lsctl_web::{probe, sos_test, synthesize, DemoError};

#[test]
fn probe_reports_value_and_gradient() {
    let p = probe("x^2*y - 3*y + 1", "x, y", "2, -1").unwrap();
    assert_eq!(p.degree, 3);
    assert!((p.value - 0.0).abs() < 1e-12);
    // d/dx = 2xy, d/dy = x^2 - 3
    assert!((p.gradient[0] + 4.0).abs() < 1e-12);
    assert!((p.gradient[1] - 1.0).abs() < 1e-12);
}

#[test]
fn probe_rejects_bad_points() {
    assert!(matches!(
        probe("x + y", "x, y", "1"),
        Err(DemoError::Input(_))
    ));
    assert!(matches!(probe("x", "x", "abc"), Err(DemoError::Input(_))));
    assert!(matches!(
        probe("x + z", "x, y", "1, 2"),
        Err(DemoError::Poly(_))
    ));
}

#[test]
fn sos_test_factors_a_square_and_rejects_motzkin() {
    let r = sos_test("x^2 + 2*x*y + y^2 + 1", "x, y").unwrap();
    assert!(r.sos);
    assert!(r.residual.unwrap() < 1e-6);
    assert!(!r.factors.is_empty());

    let m = sos_test("x^4*y^2 + x^2*y^4 - 3*x^2*y^2 + 1", "x, y").unwrap();
    assert!(!m.sos);
    assert!(m.factors.is_empty());
}

#[test]
fn sos_test_limits_problem_size() {
    let big = sos_test("x^10 + y^10 + z^10", "x, y, z");
    assert!(matches!(big, Err(DemoError::Input(_))));
}

#[test]
fn synthesis_brackets_and_steers_toward_the_origin() {
    let s = synthesize("-x^3 + 5*x^2 + 3*x", 10, 41).unwrap();
    assert_eq!(s.regions.len(), 2);
    assert_eq!(s.x.len(), 41);
    for i in 0..s.x.len() {
        assert!(s.psi_l[i] <= s.psi_u[i] + 1e-6, "x = {}", s.x[i]);
    }
    let mid = s.x.iter().position(|x| x.abs() < 1e-12).unwrap();
    assert!((s.psi_l[mid] - 1.0).abs() < 1e-5);
    // The feedback opposes the unstable drift on either side.
    let left = s.x.iter().position(|x| (x + 0.5).abs() < 1e-12).unwrap();
    let right = s.x.iter().position(|x| (x - 0.5).abs() < 1e-12).unwrap();
    assert!(s.control[left].unwrap() > 0.0);
    assert!(s.control[right].unwrap() < 0.0);
    let json = serde_json::to_string(&s).unwrap();
    assert!(json.contains("\"psi_l\""));
}

#[test]
fn synthesis_validates_inputs() {
    assert!(matches!(synthesize("x", 7, 10), Err(DemoError::Input(_))));
    assert!(matches!(synthesize("x", 8, 1), Err(DemoError::Input(_))));
    assert!(matches!(
        synthesize("x + y", 8, 10),
        Err(DemoError::Config(_))
    ));
}
