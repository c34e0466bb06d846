#!/usr/bin/env python3
"""
Tests for the layer kernels, losses and the finite-difference gradient checker
"""
import os
import sys
import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from numerics import (
    EVAL, TRAIN, Affine, Conv2D, Dropout, KernelUsageError, LabelError, MaxPool2D, ReLU, ShapeError,
    Sigmoid, Softmax, backward, binary_cross_entropy, check_gradients, first_non_finite, forward, grad_check,
    nll_loss,
)

logger = logging.getLogger(__name__)


def test_relu_forward_definition():
    out = forward(ReLU(), np.array([[-1.0, 0.0, 2.0]]))
    assert out.tolist() == [[0.0, 0.0, 2.0]]


def test_softmax_uniform_on_equal_logits():
    out = forward(Softmax(), np.zeros((1, 4)))
    np.testing.assert_allclose(out, [[0.25, 0.25, 0.25, 0.25]])


def test_conv_all_ones_sums_each_window():
    conv = Conv2D(1, 1, kernel_size=3)
    conv.params[0][...] = 1.0
    out = forward(conv, np.ones((1, 1, 5, 5)))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out[0, 0], np.full((3, 3), 9.0))


def test_relu_backward_zeroes_negative_inputs():
    x = np.array([[-1.0, 2.0]])
    relu = ReLU()
    relu.forward(x)
    grad_x, params = relu.backward(np.ones_like(x))
    assert grad_x.tolist() == [[0.0, 1.0]]
    assert params == []


def test_relu_gradient_at_zero_is_zero():
    grad_x, _ = backward(ReLU(), np.array([[0.0]]), np.array([[1.0]]))
    assert grad_x[0, 0] == 0.0


def test_backward_uses_the_given_input():
    relu = ReLU()
    relu.forward(np.array([[-1.0, 2.0]]))
    grad_x, _ = backward(relu, np.array([[2.0, -1.0]]), np.ones((1, 2)))
    assert grad_x.tolist() == [[1.0, 0.0]]


def test_maxpool_backward_needs_forward_on_the_same_input():
    pool = MaxPool2D(2)
    x = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
    pool.forward(x)
    grad_x, _ = backward(pool, x.copy(), np.ones((1, 1, 2, 2)))
    assert grad_x.sum() == 4.0
    with pytest.raises(KernelUsageError):
        backward(pool, -x, np.ones((1, 1, 2, 2)))


def test_grad_check_accepts_subgradient_on_relu_kink():
    x = np.array([[0.0, 0.5, -0.5]])
    report = grad_check(ReLU(), x, tolerance=1e-5)
    assert report.passed, report.failures
    assert report.kinks == 1


def test_grad_check_kink_tolerance_still_rejects_wrong_subgradient():
    x = np.array([[0.0, 0.5]])
    relu = ReLU()

    def objective():
        return float(relu.forward(x).sum())

    report = check_gradients(objective, {'input': x}, {'input': np.array([[0.25, 1.0]])})
    assert not report.passed
    assert report.kinks == 0


def test_affine_weight_gradient_is_outer_product():
    affine = Affine(3, 2, rng=np.random.default_rng(1))
    x = np.array([[0.5, -1.0, 2.0]])
    grad_y = np.array([[1.5, -0.25]])
    affine.forward(x)
    _, (grad_w, grad_b) = affine.backward(grad_y)
    np.testing.assert_allclose(grad_w, np.outer(grad_y[0], x[0]))
    np.testing.assert_allclose(grad_b, grad_y[0])


@pytest.mark.parametrize('kernel, shape', [
    (ReLU(), (2, 6)),
    (Sigmoid(), (2, 6)),
    (Softmax(), (2, 6)),
    (Dropout(0.6), (2, 8)),
    (Affine(5, 4, rng=np.random.default_rng(3)), (2, 5)),
    (Conv2D(2, 3, kernel_size=3, rng=np.random.default_rng(4)), (2, 2, 5, 5)),
    (Conv2D(2, 2, kernel_size=3, padding=1, rng=np.random.default_rng(5)), (1, 2, 4, 4)),
    (MaxPool2D(2), (2, 2, 4, 4)),
])
def test_kernel_gradients_match_finite_differences(kernel, shape):
    for trial in range(20):
        x = np.random.default_rng(100 + trial).uniform(-1.0, 1.0, size=shape)
        kernel.clear()
        report = grad_check(kernel, x, tolerance=1e-5, seed=trial)
        assert report.passed, f"{kernel.kind} trial {trial}: {report.failures}"
        assert report.max_rel_err <= 1e-5


class SignFlippedAffine(Affine):
    def backward(self, grad_out):
        grad_x, (grad_w, grad_b) = super().backward(grad_out)
        return -grad_x, [-grad_w, -grad_b]


def test_grad_check_rejects_corrupted_backward():
    kernel = SignFlippedAffine(4, 3, rng=np.random.default_rng(0))
    report = grad_check(kernel, np.random.default_rng(1).uniform(-1, 1, size=(2, 4)))
    assert not report.passed
    assert report.failures


def test_grad_check_refuses_single_precision():
    report = grad_check(ReLU(), np.random.default_rng(0).uniform(-1, 1, size=(2, 4)).astype(np.float32))
    assert not report.passed
    assert 'float64' in report.failures[0]


@given(st.lists(st.floats(min_value=-10.0, max_value=10.0), min_size=2, max_size=8))
def test_softmax_is_a_distribution(values):
    out = forward(Softmax(), np.array([values]))
    assert abs(out.sum() - 1.0) <= 1e-9
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_dropout_eval_is_exact_identity():
    x = np.random.default_rng(0).standard_normal((3, 7))
    out = forward(Dropout(0.6), x, mode=EVAL)
    assert out is x


def test_dropout_train_scales_survivors():
    x = np.ones((1, 1000))
    out = forward(Dropout(0.6), x, mode=TRAIN, rng=np.random.default_rng(0))
    survivors = out[out != 0]
    np.testing.assert_allclose(survivors, 1.0 / 0.4)
    assert 0.5 < np.mean(out == 0) < 0.7


def test_dropout_train_needs_random_stream():
    with pytest.raises(KernelUsageError):
        forward(Dropout(0.6), np.ones((1, 3)), mode=TRAIN)


@pytest.mark.parametrize('size, k, stride', [(5, 3, 1), (32, 3, 1), (7, 2, 2), (10, 3, 2)])
def test_conv_output_shape_rule(size, k, stride):
    conv = Conv2D(1, 2, kernel_size=k, stride=stride)
    out = forward(conv, np.zeros((1, 1, size, size)))
    expected = (size - k) // stride + 1
    assert out.shape == (1, 2, expected, expected)


def test_maxpool_output_shape_rule():
    out = forward(MaxPool2D(2), np.zeros((1, 3, 7, 9)))
    assert out.shape == (1, 3, 3, 4)


@pytest.mark.parametrize('kernel', [Dropout(0.5), MaxPool2D(2)])
def test_stateful_backward_without_forward_is_usage_error(kernel):
    x = np.ones((1, 1, 4, 4))
    with pytest.raises(KernelUsageError):
        backward(kernel, x, np.ones((1, 1, 2, 2)))


def test_shape_mismatch_names_expected_and_actual():
    with pytest.raises(ShapeError) as excinfo:
        forward(Affine(4, 2), np.zeros((1, 5)))
    assert excinfo.value.actual == (1, 5)
    assert '4' in str(excinfo.value)


def test_backward_rejects_wrong_gradient_shape():
    relu = ReLU()
    relu.forward(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        relu.backward(np.zeros((2, 4)))


def test_forward_is_deterministic_for_fixed_stream():
    x = np.random.default_rng(0).standard_normal((4, 10))
    a = forward(Dropout(0.3), x, TRAIN, np.random.default_rng(9))
    b = forward(Dropout(0.3), x, TRAIN, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_binary_cross_entropy_values():
    loss, grad = binary_cross_entropy(np.array([0.5, 0.5]), np.array([1, 0]))
    np.testing.assert_allclose(loss, [np.log(2.0), np.log(2.0)])
    np.testing.assert_allclose(grad, [-2.0, 2.0])


def test_binary_cross_entropy_clamps_saturated_outputs():
    loss, grad = binary_cross_entropy(np.array([0.0, 1.0]), np.array([1, 0]))
    assert np.all(np.isfinite(loss))
    np.testing.assert_allclose(loss, -np.log(1e-12), rtol=1e-4)
    assert np.all(grad == 0.0)


def test_binary_cross_entropy_rejects_non_binary_labels():
    with pytest.raises(LabelError):
        binary_cross_entropy(np.array([0.3]), np.array([2]))


def test_nll_loss_picks_true_class():
    probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    loss, grad = nll_loss(probs, np.array([0, 2]))
    np.testing.assert_allclose(loss, [-np.log(0.7), -np.log(0.8)])
    assert grad[0, 0] == pytest.approx(-1.0 / 0.7)
    assert grad[0, 1] == 0.0


def test_nll_loss_rejects_out_of_range_label():
    with pytest.raises(LabelError):
        nll_loss(np.full((1, 3), 1.0 / 3.0), np.array([3]))


def test_first_non_finite_names_the_tensor():
    named = [('a', np.zeros(3)), ('b', np.array([1.0, np.nan])), ('c', np.array([np.inf]))]
    assert first_non_finite(named) == 'b'
    assert first_non_finite(named[:1]) is None
