import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import input_check
from lspreg import numerics as nx
from lspreg.errors import NumericError, ShapeError
from lspreg.numerics import GradTape, Tensor


def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_relu_definition():
    assert nx.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_l2_norm_345():
    assert nx.l2_norm(Tensor([3.0, 4.0])).item() == 5.0


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        loss = nx.sum_(nx.square(x))
    (g,) = tape.gradient(loss, [x])
    assert g.data.tolist() == [2.0, 4.0]


def test_constant_has_zero_gradient():
    x = Tensor([1.0, -3.0], requires_grad=True)
    c = Tensor(7.0)
    with GradTape() as tape:
        loss = nx.mul(c, 2.0)
        _ = nx.square(x)
    grads = tape.backward(loss)
    assert np.all(grads[x.id].data == 0)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = nx.square(x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_non_finite_input_rejected():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        nx.log(Tensor([0.0]))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_no_recording_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    assert not nx.square(x).requires_grad


def test_tape_cleared_after_backward():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        loss = nx.sum_(x)
    tape.backward(loss)
    assert len(tape) == 0


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = rng.normal(size=(5, 4))

    def run():
        with GradTape() as tape:
            loss = nx.mean(nx.log_softmax(nx.relu(nx.matmul(x, w))))
        return tape.gradient(loss, [w])[0].data

    assert run().tobytes() == run().tobytes()


def test_batch_axis_broadcast_gradient():
    b = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x = np.arange(6.0).reshape(2, 3)
    with GradTape() as tape:
        loss = nx.sum_(nx.add(x, b))
    (g,) = tape.gradient(loss, [b])
    assert g.data.tolist() == [2.0, 2.0, 2.0]


def test_max_routes_gradient_to_first_argmax():
    x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
    with GradTape() as tape:
        loss = nx.sum_(nx.max_(x, axis=1))
    (g,) = tape.gradient(loss, [x])
    assert g.data.tolist() == [[0.0, 1.0, 0.0]]


def test_norm_zero_vector_subgradient():
    x = Tensor([[0.0, 0.0], [3.0, 4.0]], requires_grad=True)
    with GradTape() as tape:
        loss = nx.sum_(nx.norm(x, axis=-1))
    (g,) = tape.gradient(loss, [x])
    np.testing.assert_allclose(g.data, [[0, 0], [0.6, 0.8]])


def test_take_rows_scatter_adds_duplicates():
    x = Tensor([[1.0], [2.0]], requires_grad=True)
    with GradTape() as tape:
        loss = nx.sum_(nx.take_rows(x, [0, 0, 1]))
    (g,) = tape.gradient(loss, [x])
    assert g.data.tolist() == [[2.0], [1.0]]


COMPOSITES = {
    "softmax": lambda t: nx.sum_(nx.mul(nx.softmax(t), np.arange(12.0).reshape(3, 4))),
    "log_softmax": lambda t: nx.sum_(nx.mul(nx.log_softmax(t), np.linspace(-1, 1, 12).reshape(3, 4))),
    "exp_log": lambda t: nx.mean(nx.log(nx.add(nx.exp(t), 1.0))),
    "abs_clamp": lambda t: nx.sum_(nx.abs_(nx.clamp(t, -0.5, 0.7))),
    "norm_div": lambda t: nx.sum_(nx.mul(nx.div(t, nx.norm(t, axis=-1, keepdims=True)),
                                         np.arange(12.0).reshape(3, 4))),
    "reshape_concat": lambda t: nx.sum_(nx.square(nx.concat(
        [nx.reshape(t, (4, 3)), nx.slice_rows(nx.reshape(t, (4, 3)), 1, 3)]))),
    "take_sub_norm": lambda t: nx.sum_(nx.norm(nx.sub(nx.take_rows(t, [[0, 1], [2, 2]]),
                                                      nx.reshape(nx.take_rows(t, [1, 0]), (2, 1, 4))),
                                               axis=-1)),
}


@pytest.mark.parametrize("name", sorted(COMPOSITES))
@pytest.mark.parametrize("seed", range(5))
def test_composite_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    assert input_check(COMPOSITES[name], x) < 1e-4


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(z, c):
    p = nx.softmax(Tensor(z)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nx.softmax(Tensor(z + c)).data, p, atol=1e-12)
