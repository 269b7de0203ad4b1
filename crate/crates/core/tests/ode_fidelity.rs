mod support;

use support::checks::{ode_configs, ode_fidelity};

#[test]
fn early_phase_follows_scalar_odes() {
    let out = ode_fidelity(&ode_configs());
    assert!(out.passed, "{}", out.detail);
}
