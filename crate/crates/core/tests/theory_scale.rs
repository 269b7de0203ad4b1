mod support;

use support::checks::theory_at_scale;

#[test]
fn sam_raises_entropy_on_every_spectrum() {
    let out = theory_at_scale(1000, 5);
    assert!(out.passed, "{}", out.detail);
}
