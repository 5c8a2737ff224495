import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kedit_lab.tensor_core import (Adam, DimensionError, NumericError, cross_entropy, grad_check,
                                   layer_norm, log_softmax, matmul, optimizer_step, softmax,
                                   tensor)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_are_distributions(x):
    p = softmax(tensor(x), -1).numpy()
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


def test_softmax_matches_numpy_oracle(rng):
    x = rng.normal(size=(4, 9)) * 3
    ref = np.exp(x) / np.exp(x).sum(-1, keepdims=True)
    np.testing.assert_allclose(softmax(tensor(x)).numpy(), ref, rtol=1e-12)


def test_softmax_is_stable_for_huge_logits():
    p = softmax(tensor([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(p.numpy(), [[0.5, 0.5, 0.0]])


def test_softmax_empty_axis_raises():
    with pytest.raises(DimensionError):
        softmax(torch.zeros(3, 0))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(torch.zeros(2, 3), torch.zeros(4, 2))


def test_layer_norm_matches_hand_formula(rng):
    x = rng.normal(size=(3, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    ref = (x - mu) / np.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(layer_norm(tensor(x), tensor(g), tensor(b)).numpy(), ref, rtol=1e-12)


def test_layer_norm_size_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(torch.zeros(2, 4), torch.ones(3), torch.zeros(4))


def test_cross_entropy_matches_log_sum_exp(rng):
    x = rng.normal(size=(5, 8))
    t = rng.integers(8, size=5)
    ref = np.mean([math.log(np.exp(r).sum()) - r[k] for r, k in zip(x, t)])
    assert abs(float(cross_entropy(tensor(x), t)) - ref) < 1e-12


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        cross_entropy(torch.zeros(2, 4), [1, 4])


def test_log_softmax_consistent_with_softmax(rng):
    x = tensor(rng.normal(size=(3, 5)))
    np.testing.assert_allclose(torch.exp(log_softmax(x)).numpy(), softmax(x).numpy(), rtol=1e-12)


def test_grad_check_accepts_autograd(rng):
    w = tensor(rng.normal(size=(4, 3)))
    x = tensor(rng.normal(size=(2, 4)))
    err = grad_check(lambda: cross_entropy(matmul(x, w), [0, 2]), [w])
    assert err < 1e-6


class _WrongSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 3 * x  # true derivative is 2x


def test_grad_check_catches_a_wrong_backward():
    x = tensor([0.7, -1.3, 2.1])
    assert grad_check(lambda: _WrongSquare.apply(x).sum(), [x]) > 0.1


def test_adam_first_step_matches_closed_form():
    # first bias-corrected step is lr * g / (|g| + eps) elementwise
    p = tensor([1.0, -2.0, 0.5])
    g = tensor([0.3, -0.1, 0.0])
    opt = Adam([p], lr=0.1)
    opt.step([g])
    expected = np.array([1.0, -2.0, 0.5]) - 0.1 * g.numpy() / (np.abs(g.numpy()) + 1e-8)
    np.testing.assert_allclose(p.numpy(), expected, rtol=1e-12)


def test_adam_rejects_nonfinite_gradient():
    p = tensor([1.0])
    with pytest.raises(NumericError):
        Adam([p], lr=0.1).step([tensor([float("nan")])])


def test_optimizer_step_touches_only_its_params():
    a, b = tensor([1.0, 2.0]), tensor([3.0])
    a.requires_grad_(True)
    b.requires_grad_(True)
    before = b.detach().clone()
    optimizer_step(Adam([a], lr=0.1), (a * a).sum() + (b * b).sum())
    assert torch.equal(b.detach(), before)
    assert not torch.equal(a.detach(), tensor([1.0, 2.0]))
