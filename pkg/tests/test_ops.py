import math

import pytest
import torch
from torch.autograd import gradcheck

from ops import (DTYPE, NonFiniteError, Rng, ShapeError, cross_entropy, gelu, layer_norm, matmul, softmax,
                 tensor)


def _leaf(rng, *shape):
    return rng.normal(shape).requires_grad_(True)


def test_matmul_rejects_mismatched_inner_dims():
    with pytest.raises(ShapeError):
        matmul(torch.zeros(2, 3, dtype=DTYPE), torch.zeros(4, 2, dtype=DTYPE))
    with pytest.raises(ShapeError):
        matmul(torch.zeros(3, dtype=DTYPE), torch.zeros(3, 2, dtype=DTYPE))


def test_softmax_rows_sum_to_one_with_masked_entries():
    x = tensor([[1.0, 2.0, float("-inf")], [0.0, 0.0, 0.0]])
    y = softmax(x)
    assert torch.allclose(y.sum(dim=-1), torch.ones(2, dtype=DTYPE))
    assert y[0, 2] == 0.0
    assert torch.allclose(y[1], torch.full((3,), 1 / 3, dtype=DTYPE))


def test_softmax_is_shift_invariant_for_large_inputs():
    x = tensor([[1000.0, 1001.0]])
    assert torch.allclose(softmax(x), softmax(x - 1000.0))


def test_softmax_axis_out_of_range():
    with pytest.raises(ShapeError):
        softmax(torch.zeros(2, 2, dtype=DTYPE), axis=2)


def test_layer_norm_checks():
    x = torch.zeros(2, 4, dtype=DTYPE)
    with pytest.raises(ValueError):
        layer_norm(x, torch.ones(4, dtype=DTYPE), torch.zeros(4, dtype=DTYPE), eps=0.0)
    with pytest.raises(ShapeError):
        layer_norm(x, torch.ones(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))


def test_cross_entropy_of_uniform_logits_is_log_vocab():
    logits = torch.zeros(5, 7, dtype=DTYPE)
    targets = torch.tensor([0, 1, 2, 3, 6])
    assert math.isclose(float(cross_entropy(logits, targets)), math.log(7), rel_tol=1e-12)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(torch.zeros(2, 3, dtype=DTYPE), torch.tensor([0, 3]))


def test_non_finite_detection():
    a = tensor([[float("inf"), 1.0]])
    with pytest.raises(NonFiniteError):
        matmul(a, tensor([[1.0], [1.0]]))


@pytest.mark.parametrize("op", ["matmul", "softmax", "layer_norm", "gelu", "cross_entropy"])
def test_gradients_match_finite_differences(op):
    rng = Rng(11, op)
    if op == "matmul":
        inputs = (_leaf(rng, 3, 4), _leaf(rng, 4, 2))
        fn = matmul
    elif op == "softmax":
        inputs = (_leaf(rng, 3, 5),)
        fn = softmax
    elif op == "layer_norm":
        inputs = (_leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6))
        fn = layer_norm
    elif op == "gelu":
        inputs = (_leaf(rng, 4, 3),)
        fn = gelu
    else:
        targets = torch.tensor([0, 2, 1, 4])
        inputs = (_leaf(rng, 4, 5),)

        def fn(logits):
            return cross_entropy(logits, targets)
    assert gradcheck(fn, inputs, eps=1e-6, atol=1e-8, rtol=1e-6)


def test_rng_streams_are_reproducible_and_independent():
    a = Rng(7).stream("init").normal((4,))
    parent = Rng(7)
    parent.normal((100,))
    sibling = parent.stream("other")
    sibling.normal((10,))
    b = parent.stream("init").normal((4,))
    assert torch.equal(a, b)
    assert not torch.equal(a, Rng(7).stream("data").normal((4,)))
    assert not torch.equal(a, Rng(8).stream("init").normal((4,)))


def test_rng_draw_helpers():
    rng = Rng(5)
    draws = rng.randint(4, (1000,))
    assert int(draws.min()) >= 0 and int(draws.max()) < 4
    assert torch.isfinite(rng.gumbel((50,))).all()
    assert sorted(rng.permutation(6).tolist()) == list(range(6))
    assert "seed=5" in repr(rng)
