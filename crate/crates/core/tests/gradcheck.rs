mod common;

use common::{phase1_gradcheck, phase2_gradcheck, primitive_gradchecks};

#[test]
fn primitives_match_central_differences() {
    for seed in 0..20 {
        primitive_gradchecks(seed).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn phase1_loss_gradients() {
    for seed in 0..20 {
        phase1_gradcheck(seed).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn phase2_loss_gradients() {
    for seed in 0..20 {
        phase2_gradcheck(seed).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}
