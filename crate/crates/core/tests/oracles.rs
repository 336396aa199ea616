mod common;

use common::oracles;

#[test]
fn prototypes_match_class_means() {
    oracles::prototypes_match_class_means();
}

#[test]
fn i2fv_matches_pairwise_cosines() {
    oracles::i2fv_matches_pairwise_cosines();
}

#[test]
fn proto_loss_matches_masked_mean_square() {
    oracles::proto_loss_matches_masked_mean_square();
}

#[test]
fn dice_loss_matches_loop() {
    oracles::dice_loss_matches_loop();
}

#[test]
fn kd_loss_matches_loop_in_both_directions() {
    oracles::kd_loss_matches_loop_in_both_directions();
}

#[test]
fn conv2d_matches_loop() {
    oracles::conv2d_matches_loop();
}

#[test]
fn network_forward_matches_loop() {
    oracles::network_forward_matches_loop();
}
