//! Agent-ordering properties of the aggregation encoder: the pooled
//! integrations are permutation invariant, the recurrent one permutes its
//! per-agent blocks along with the agents.

mod common;

#[test]
fn aggregation_respects_agent_permutations() {
    let worst = common::run_permutation_checks(100);
    println!("permutation sweep: max abs deviation {worst:.3e}");
    assert!(worst < 1e-6, "deviation {worst} exceeds 1e-6");
}
