mod support;

use steganalysis_core::nn::ops::Window;
use support::gradcheck::{self, TOLERANCE};

fn assert_ok(name: &str, err: f64) {
    assert!(err <= TOLERANCE, "{name}: relative error {err:.3e}");
}

#[test]
fn conv_gradients() {
    assert_ok("3x3/1", gradcheck::conv(21, Window::same(3, 1)));
    assert_ok("3x3/2", gradcheck::conv(22, Window::same(3, 2)));
    assert_ok("1x1/2", gradcheck::conv(23, Window::same(1, 2)));
}

#[test]
fn batch_norm_gradients() {
    assert_ok("bn", gradcheck::batch_norm(24));
}

#[test]
fn elementwise_and_pooling_gradients() {
    assert_ok("relu", gradcheck::relu(25));
    assert_ok("pool", gradcheck::avg_pool(26));
    assert_ok("gap", gradcheck::global_pool(27));
}

#[test]
fn dense_and_loss_gradients() {
    assert_ok("linear", gradcheck::linear(28));
    assert_ok("xent", gradcheck::softmax_cross_entropy(29));
}

#[test]
fn residual_unit_gradients() {
    assert_ok("identity unit", gradcheck::residual_unit(30, false));
    assert_ok("projection unit", gradcheck::residual_unit(31, true));
}

#[test]
fn tiny_network_gradients() {
    let (err, checked) = gradcheck::tiny_network(32, 8);
    assert!(checked > 300);
    assert_ok("network", err);
}
