import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volseg.tensor import (
    GraphError, ShapeError, Tape, Tensor, add, backward, grad_check, mean, mul, no_grad,
    randn_tensor, scale, splitmix64, sum, use_tape,
)
from volseg import nn

from oracles import central_diff


def test_splitmix64_reference_values():
    # Published first outputs of splitmix64 seeded with 1234567.
    out = splitmix64(1234567, 3)
    assert [int(v) for v in out] == [6457827717110365317, 3203168211198807973, 9817491932198370423]


def test_randn_zero_scale_gives_zeros():
    t = randn_tensor([4], seed=7, scale=0.0)
    assert np.all(t.data == 0)


def test_randn_is_bitwise_deterministic():
    a = randn_tensor([2, 3], seed=99)
    b = randn_tensor([2, 3], seed=99)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.tobytes() != randn_tensor([2, 3], seed=100).data.tobytes()


def test_randn_moments():
    t = randn_tensor([10000], seed=1, scale=1.0, dtype=np.float64)
    assert -0.05 < t.data.mean() < 0.05
    assert 0.95 < t.data.std() < 1.05


@pytest.mark.parametrize("shape", [[0], [3, 0], [-1, 2]])
def test_randn_rejects_bad_extents(shape):
    with pytest.raises(ShapeError):
        randn_tensor(shape, seed=0)


def test_elementwise_identities(rng):
    x = Tensor(rng.normal(size=(2, 3)))
    assert np.array_equal(add(x, Tensor(np.zeros((2, 3)))).data, x.data)
    assert np.array_equal(mul(x, Tensor(np.ones((2, 3)))).data, x.data)
    assert scale(Tensor([1.0, 2.0, 3.0]), 2.0).data.tolist() == [2.0, 4.0, 6.0]


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        mul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


def test_reductions():
    assert sum(Tensor(np.ones((2, 2, 2)))).item() == 8
    assert mean(Tensor(np.full((3, 4), 2.5))).item() == 2.5
    assert abs(sum(Tensor(np.full(10, 0.1, dtype=np.float64))).item() - 1.0) < 1e-9
    with pytest.raises(ShapeError):
        sum(Tensor(np.ones(0)))


def test_backward_of_sum_is_exactly_one():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with use_tape(Tape()):
        backward(sum(x))
    assert np.all(x.grad == 1.0)


def test_backward_scale_and_square():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with use_tape(Tape()):
        backward(sum(scale(x, 3.0)))
    assert x.grad.tolist() == [3.0, 3.0]

    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with use_tape(Tape()):
        backward(sum(mul(x, x)))
    fd = central_diff(lambda v: float(np.sum(v * v)), x.data.copy())
    assert x.grad.tolist() == [2.0, 4.0]
    np.testing.assert_allclose(x.grad, fd, atol=1e-6)


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.zeros((3, 3)), requires_grad=True)
    with use_tape(Tape()):
        backward(add(sum(x), sum(x)))
    assert np.all(x.grad == 2.0)


def test_loss_gets_unit_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    with use_tape(Tape()):
        loss = sum(x)
        backward(loss)
    assert loss.grad == 1.0


def test_backward_errors():
    tape = Tape()
    x = Tensor(np.ones(3), requires_grad=True)
    with use_tape(tape):
        y = scale(x, 2.0)
        with pytest.raises(ShapeError):
            backward(y)
        loss = sum(y)
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)
        tape.reset()
        with pytest.raises(GraphError):
            backward(loss)


def test_tape_is_topological_and_reset_clears():
    tape = Tape()
    x = Tensor(np.ones(4), requires_grad=True)
    with use_tape(tape):
        y = mul(scale(x, 2.0), x)
        s = sum(y)
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(i) in seen for i in node.inputs if i.requires_grad)
        seen.add(id(node.output))
    assert tape.nodes[-1].output is s
    tape.reset()
    assert len(tape) == 0


def test_no_grad_records_nothing():
    tape = Tape()
    x = Tensor(np.ones(2), requires_grad=True)
    with use_tape(tape), no_grad():
        sum(scale(x, 3.0))
    assert len(tape) == 0


def test_grad_check_linear_op_is_exact(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda t: scale(t, 2.0), [x]) < 1e-10


def test_grad_check_sigmoid(rng):
    x = Tensor(rng.uniform(-3, 3, size=(1, 1, 3, 3, 3)))
    assert grad_check(nn.sigmoid, [x], epsilon=1e-5) < 1e-6


def test_grad_check_conv3d(rng):
    x = Tensor(rng.normal(size=(1, 1, 4, 4, 4)))
    w = Tensor(rng.normal(size=(1, 1, 3, 3, 3)))
    b = Tensor(rng.normal(size=(1,)))
    err = grad_check(lambda x, w, b: nn.conv3d(x, nn.ConvParams(w, b)), [x, w, b])
    assert err < 1e-4


def test_grad_check_detects_a_wrong_gradient(rng):
    from volseg.tensor import _record

    def broken(t):
        return _record("broken", (t,), t.data**2, lambda g: (g * t.data,))  # missing factor 2

    assert grad_check(broken, [Tensor(rng.uniform(1, 2, size=5))]) > 0.1


def test_grad_check_argument_validation(rng):
    with pytest.raises(ValueError):
        grad_check(nn.sigmoid, [Tensor(np.ones(2))], epsilon=1e-2)
    with pytest.raises(TypeError):
        grad_check(nn.sigmoid, [Tensor(np.ones(2, dtype=np.float32))])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2**63))
def test_randn_shape_and_determinism(shape, seed):
    a = randn_tensor(shape, seed)
    assert a.shape == tuple(shape) and a.size == int(np.prod(shape))
    assert np.all(np.isfinite(a.data))
    assert a.data.tobytes() == randn_tensor(shape, seed).data.tobytes()
