//! The three training losses against closed-form oracle values.
//!
//! Each instance fixes every weight and input to a deterministic value
//! sequence; the expected numbers were computed independently in plain
//! Python (`tools/oracles/losses.py`) following the documented formulas.
//! Agreement is required to 1e-10, far below any legitimate
//! implementation difference on these few-term sums.

mod common;

#[test]
fn losses_match_closed_forms() {
    for (name, got, want) in common::loss_oracle_cases() {
        assert!(
            (got - want).abs() < 1e-10,
            "{name}: computed {got} vs oracle {want}"
        );
        println!("{name}: {got} (oracle {want})");
    }
}
