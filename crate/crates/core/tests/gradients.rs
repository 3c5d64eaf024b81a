mod common;

use common::gradcheck::{check_op, ggt_model_errors, op_cases, relation_model_errors, TOLERANCE};

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..5 {
        for case in op_cases(seed) {
            let err = check_op(&case);
            assert!(err <= TOLERANCE, "{} (seed {seed}): relative error {err:e}", case.name);
        }
    }
}

#[test]
fn decoder_loss_gradients_match_central_differences() {
    for (seed, err) in ggt_model_errors(&[1, 2, 3]).into_iter().enumerate() {
        assert!(err <= TOLERANCE, "instance {seed}: relative error {err:e}");
    }
}

#[test]
fn relation_loss_gradients_match_central_differences() {
    for (seed, err) in relation_model_errors(&[1, 2, 3]).into_iter().enumerate() {
        assert!(err <= TOLERANCE, "instance {seed}: relative error {err:e}");
    }
}
