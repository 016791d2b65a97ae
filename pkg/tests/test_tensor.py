import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sta import tensor as T
from sta.errors import ContractError, DomainError, NonFiniteError, ShapeError
from sta.optim import OptimizerState, adam_step, sgd_step
from sta.tensor import Tensor, backward, grad_check, tensor_create


def test_tensor_create():
    t = tensor_create([2, 2], [1, 2, 3, 4])
    assert t.shape == (2, 2)
    assert t.data.dtype == np.float64
    np.testing.assert_array_equal(t.data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(tensor_create([3], [0, 0, 0]).data, np.zeros(3))
    with pytest.raises(ShapeError):
        tensor_create([2, 2], [1, 2, 3])


def test_forward_examples():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])
    np.testing.assert_allclose(T.leaky_relu(Tensor([-1.0, 2.0])).data, [-0.2, 2.0])
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(70))).data, np.full(70, 1 / 70), rtol=0, atol=1e-15)
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_shape_and_domain_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=-1)
    with pytest.raises(DomainError):
        T.softmax(Tensor(np.zeros((2, 0))))


def test_non_finite_forward_is_loud():
    with pytest.raises(NonFiniteError, match="scale"):
        T.scale(Tensor([1e308]), 10.0)


def test_backward_examples():
    x = Tensor([3.0], requires_grad=True)
    backward(T.tsum(T.square(x)))
    assert x.grad[0] == 6.0
    w = Tensor(0.0, requires_grad=True)
    backward(T.sigmoid(w))
    assert w.grad == 0.25


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    W, v = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    assert grad_check(lambda a, b: T.mean(T.matmul(a, b)), [W, v], h=1e-6) < 1e-5


def test_backward_contract():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(T.scale(x, 2.0))
    with pytest.raises(ContractError):
        backward(T.tsum(Tensor(np.ones(3))))


def test_unreachable_leaf_gets_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0], requires_grad=True)
    grads = backward(T.tsum(T.square(x)), params=[x, y])
    np.testing.assert_array_equal(grads[y], [0.0])
    np.testing.assert_array_equal(grads[x], [2.0, 4.0])


def test_graph_is_released_after_backward():
    x = Tensor([1.0], requires_grad=True)
    y = T.square(x)
    backward(T.tsum(y))
    with pytest.raises(ContractError):
        backward(T.tsum(y))


def test_graph_records_are_topological():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = T.tsum(T.sigmoid(T.matmul(x, x)))
    graph, _ = T.ComputationGraph.trace(loss)
    seen = {x.node_id}
    for rec in graph.records:
        assert all(p in seen for p in rec.parent_ids)
        seen.add(rec.node_id)
    assert [r.op for r in graph.records] == ["matmul", "sigmoid", "sum"]


UNARY = {
    "leaky_relu": (T.leaky_relu, (0.0,)),
    "sigmoid": (T.sigmoid, ()),
    "softmax": (T.softmax, ()),
    "abs": (T.tabs, (0.0,)),
    "square": (T.square, ()),
    "sum": (T.tsum, ()),
    "mean": (T.mean, ()),
    "sum_axis0": (lambda a: T.tsum(a, axis=0), ()),
    "mean_axis0": (lambda a: T.mean(a, axis=0), ()),
    "reshape": (lambda a: T.reshape(a, (-1,)), ()),
    "scale": (lambda a: T.scale(a, -1.7), ()),
    "rows": (lambda a: T.rows(a, [2, 0, 2]), ()),
    "pick": (lambda a: T.pick(a, [1, 0, 3]), ()),
}

BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "matmul": lambda a, b: T.matmul(a, T.reshape(b, (4, 3))),
    "concat": lambda a, b: T.concat([a, b], axis=-1),
    "concat0": lambda a, b: T.concat([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    fn, kinks = UNARY[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for case in range(20):
        x = rng.standard_normal((3, 4))
        assert grad_check(fn, [x], h=1e-6, kinks=kinks, seed=case) < 1e-5


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    rng = np.random.default_rng(len(name))
    for case in range(20):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        assert grad_check(BINARY[name], [a, b], h=1e-6, seed=case) < 1e-5


def test_broadcast_add_gradient():
    rng = np.random.default_rng(3)
    for case in range(20):
        assert grad_check(T.add, [rng.standard_normal((5, 3)), rng.standard_normal(3)], seed=case) < 1e-5


def test_log_and_clip_gradients():
    rng = np.random.default_rng(4)
    for case in range(20):
        x = rng.uniform(0.1, 2.0, size=(6,))
        assert grad_check(T.log, [x], seed=case) < 1e-5
        y = rng.uniform(-2, 2, size=(6,))
        assert grad_check(lambda a: T.clip(a, -1.0, 1.0), [y], kinks=(-1.0, 1.0), seed=case) < 1e-5


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    for case in range(20):
        logits = rng.standard_normal((4, 6))
        labels = rng.integers(0, 6, size=4)
        err = grad_check(lambda z: -T.mean(T.log(T.pick(T.softmax(z), labels))), [logits], seed=case)
        assert err < 1e-5


def test_square_grad_check_small():
    assert grad_check(T.square, [np.array([2.0])]) < 1e-6


def test_leaky_relu_kink_is_skipped():
    # x = 0 exactly: the one-sided slopes are 1 and 0.2, central difference gives 0.6
    assert grad_check(T.leaky_relu, [np.array([0.0, 1.0, -1.0])], kinks=(0.0,)) < 1e-8
    assert grad_check(T.leaky_relu, [np.array([0.0])]) > 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_backward_is_linear(seed):
    rng = np.random.default_rng(seed)
    W0 = rng.standard_normal((3, 3))

    def grads(which):
        W = Tensor(W0.copy(), requires_grad=True)
        l1 = T.tsum(T.sigmoid(T.matmul(W, W)))
        l2 = T.mean(T.square(W))
        loss = {"1": l1, "2": l2, "both": T.add(l1, l2)}[which]
        backward(loss)
        return W.grad

    # equal up to float64 rounding of the accumulation order
    np.testing.assert_allclose(grads("both"), grads("1") + grads("2"), rtol=1e-13, atol=1e-15)


def test_replay_is_bit_identical():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 2))

    def run():
        x, y = Tensor(a, requires_grad=True), Tensor(b)
        out = T.softmax(T.leaky_relu(T.matmul(x, y)))
        backward(T.tsum(T.square(out)))
        return out.data.copy(), x.grad.copy()

    (o1, g1), (o2, g2) = run(), run()
    assert np.array_equal(o1, o2) and np.array_equal(g1, g2)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad


# ---------------------------------------------------------------- optimizers

def test_sgd_examples():
    p = Tensor([1.0])
    sgd_step(OptimizerState("sgd", 0.1), [p], [np.array([0.5])])
    assert p.data[0] == 0.95
    q = Tensor([0.3])
    sgd_step(OptimizerState("sgd", 0.1), [q], [np.array([0.0])])
    assert q.data[0] == 0.3
    r = Tensor([0.0])
    sgd_step(OptimizerState("sgd", 1e-4), [r], [np.array([1.0])])
    assert r.data[0] == -1e-4
    with pytest.raises(ContractError):
        sgd_step(OptimizerState("sgd", 0.1), [p], [np.zeros(2)])


def test_adam_first_step_closed_form():
    p = Tensor([0.0])
    state = OptimizerState("adam", 1e-4)
    adam_step(state, [p], [np.array([2.0])])
    assert state.t == 1
    assert math.isclose(p.data[0], -1e-4 * 2.0 / (2.0 + 1e-8), rel_tol=1e-12)
    assert math.isclose(p.data[0], -9.99999995e-5, rel_tol=1e-9)


def test_adam_zero_gradient_never_moves():
    p = Tensor([0.7, -0.2])
    state = OptimizerState("adam", 0.1)
    for t in range(1, 50):
        adam_step(state, [p], [np.zeros(2)])
        assert state.t == t
        np.testing.assert_array_equal(p.data, [0.7, -0.2])


def test_adam_descends_quadratic():
    # reference: f(x) = x^2 from x = 1, lr = 0.1; each step must shrink |x|
    x = Tensor([1.0])
    state = OptimizerState("adam", 0.1)
    prev = 1.0
    for _ in range(10):
        adam_step(state, [x], [2.0 * x.data])
        assert abs(x.data[0]) < prev
        prev = abs(x.data[0])


def test_adam_contract_errors():
    with pytest.raises(ContractError):
        adam_step(OptimizerState("sgd", 0.1), [Tensor([1.0])], [np.ones(1)])
    with pytest.raises(ContractError):
        adam_step(OptimizerState("adam", 0.1), [Tensor([1.0])], [np.ones(3)])
