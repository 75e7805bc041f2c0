use diprl_core::gradcheck::{check_all, check_critic, check_log_prob, check_surrogate, relative_error};

#[test]
fn analytic_gradients_match_finite_differences() {
    let checks = check_all(11, 100).unwrap();
    assert_eq!(checks.len(), 3);
    for c in &checks {
        assert_eq!(c.cases, 100);
        assert!(c.coordinates > 0);
        assert!(c.max_rel_error < 1e-4, "{}: {:e}", c.name, c.max_rel_error);
    }
}

#[test]
fn checks_are_reproducible_per_seed() {
    assert_eq!(check_log_prob(3, 5).unwrap(), check_log_prob(3, 5).unwrap());
    assert_eq!(check_surrogate(3, 5).unwrap(), check_surrogate(3, 5).unwrap());
    assert_eq!(check_critic(3, 5).unwrap(), check_critic(3, 5).unwrap());
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(2.0, 1.0), 0.5);
    assert!(relative_error(0.0, 1e-9) <= 1e-3);
}
