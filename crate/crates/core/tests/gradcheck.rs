//! Central finite-difference checks: every tape op against its analytic
//! gradient, then the full combined objective on a tiny two-agent batch.
//! The machinery lives in `common` so the acceptance suite can rerun it.

mod common;

use masia_core::diffcore::{ParamGroup, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ops_match_finite_differences() {
    let worst = common::run_op_checks(1e-4);
    println!("per-op gradient check: worst normalized deviation {worst:.3e}");
}

#[test]
fn detach_blocks_gradients_but_keeps_values() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut group = ParamGroup::new("gc");
    let p = group.add("x", Tensor::new(vec![2, 2], common::vals(&mut r, 4)).unwrap());

    let tape = Tape::new();
    let x = tape.param(&p);
    let d = x.detach();
    assert_eq!(x.value_vec(), d.value_vec());
    // Loss = x * detach(x): gradient must be detach(x), not 2x.
    let y = x.mul(&d).unwrap().sum_all();
    group.zero_grads();
    y.backward().unwrap();
    let g = p.borrow().grad().unwrap().to_vec();
    let x_data = p.borrow().data().to_vec();
    for (gi, xi) in g.iter().zip(&x_data) {
        assert!((gi - xi).abs() < 1e-12, "detach leaked: grad {gi} vs value {xi}");
    }
}

#[test]
fn combined_loss_matches_finite_differences_end_to_end() {
    let (worst, checked) = common::run_e2e_check(1e-3);
    println!("end-to-end gradient check: {checked} parameters, worst deviation {worst:.3e}");
    // The check only means something if it actually swept the full bundle.
    assert!(checked > 1000, "only {checked} parameters checked");
}
