import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nablanet import ops
from nablanet.gradcheck import grad_check
from nablanet.tensor import Tape, Tensor, backward, no_grad, record, zero_grad


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_sum_gives_ones(rng):
    x = leaf(rng.standard_normal((2, 3, 4, 4)))
    with Tape() as tape:
        loss = ops.sum_all(x)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_square_gives_two_x(rng):
    x = leaf(rng.standard_normal((1, 2, 3, 3)))
    with Tape() as tape:
        loss = ops.sum_all(x * x)
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_non_scalar_loss_rejected():
    x = leaf(np.ones((1, 1, 2, 2)))
    with Tape() as tape:
        y = ops.relu(x)
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, y)


def test_value_used_twice_accumulates(rng):
    # y = relu(x) + sigmoid(x): x's gradient is the sum of both branches
    x = leaf(rng.standard_normal((1, 2, 3, 3)))
    with Tape() as tape:
        loss = ops.sum_all(ops.add_elementwise(ops.relu(x), ops.sigmoid(x)))
    backward(tape, loss)
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, (x.data > 0) + s * (1 - s))
    rep = grad_check(lambda: ops.sum_all(ops.add_elementwise(ops.relu(x), ops.sigmoid(x))), {"x": x}, step=1e-6)
    assert rep.passed, rep.summary()


def test_grads_accumulate_across_backward_calls(rng):
    x = leaf(rng.standard_normal((1, 1, 2, 2)))
    for _ in range(2):
        with Tape() as tape:
            loss = ops.sum_all(x)
        backward(tape, loss)
    np.testing.assert_array_equal(x.grad, 2.0)
    zero_grad([x])
    assert x.grad is None


def test_tape_is_topological_and_replayed_once(rng):
    x = leaf(rng.standard_normal((1, 1, 2, 2)))
    seen = []
    with Tape() as tape:
        a = ops.relu(x)
        b = record("probe", (a,), Tensor(a.data * 3), lambda g: (seen.append(1) or g * 3,))
        loss = ops.sum_all(b)
    produced = set()
    for rec in tape.records:
        for t in rec.inputs:
            assert id(t) in produced or t is x
        produced.add(id(rec.output))
    backward(tape, loss)
    assert seen == [1]
    assert tape.kinds() == ["relu", "probe", "sum"]


def test_no_grad_and_untracked_inputs_do_not_record(rng):
    x = leaf(rng.standard_normal((1, 1, 2, 2)))
    with Tape() as tape:
        with no_grad():
            ops.relu(x)
        ops.relu(Tensor(np.ones((1, 1, 2, 2))))
    assert len(tape) == 0


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    k = ops.ConvKernel(Tensor(w))
    a = ops.conv2d(Tensor(x), k, 1, 1).data
    b = ops.conv2d(Tensor(x.copy()), k, 1, 1).data
    assert a.tobytes() == b.tobytes()


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=16))
def test_forward_stays_finite(values):
    x = Tensor(np.array(values).reshape(1, 1, 1, -1))
    for fn in (ops.relu, ops.sigmoid, ops.softmax, ops.global_avg_pool):
        assert np.all(np.isfinite(fn(x).data))


def test_tensor_metadata():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32 and t.shape == (3,) and t.size == 3
    assert "requires_grad=False" in repr(t)
