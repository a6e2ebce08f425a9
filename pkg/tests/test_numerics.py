"""Engine-level checks: primitive values, backward rules vs finite
differences, optimizer semantics, purity."""

import math

import numpy as np
import pytest

from system15 import numerics as nm
from system15.numerics import ParamStore, Tensor


def fd_check(fn, arrs, eps=1e-6, tol=1e-6):
    """Max rel error between backward() grads and central differences for a
    scalar-valued fn of float64 leaf tensors."""
    leaves = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrs]
    out = fn(*leaves)
    out.backward()
    worst = 0.0
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        g = leaf.grad.reshape(-1) if leaf.grad is not None else np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with nm.no_grad():
                lp = fn(*leaves).item()
            flat[i] = orig - eps
            with nm.no_grad():
                lm = fn(*leaves).item()
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(g[i] - fd) / (abs(g[i]) + abs(fd) + 1e-8))
    assert worst < tol, f"max rel err {worst:.3e}"


rng = np.random.default_rng(42)


def test_sigmoid_center():
    assert nm.sigmoid(Tensor(np.array(0.0))).item() == pytest.approx(0.5)


def test_softmax_uniform():
    out = nm.softmax(Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25])


def test_matmul_identity():
    m = rng.normal(size=(3, 3))
    out = nm.matmul(Tensor(np.eye(3)), Tensor(m))
    np.testing.assert_allclose(out.data, m)


def test_matmul_shape_error():
    with pytest.raises(nm.NumericsError):
        nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_nonfinite_raises():
    with np.errstate(over="ignore"), pytest.raises(nm.NumericsError):
        nm.mul(Tensor(np.array([1e300])), Tensor(np.array([1e300])))


@pytest.mark.parametrize("fn,shapes", [
    (lambda a, b: nm.sum_(nm.matmul(a, b)), [(3, 4), (4, 2)]),
    (lambda a, b: nm.sum_(nm.matmul(a, b)), [(2, 3, 4), (4, 5)]),       # weight case
    (lambda a, b: nm.sum_(nm.matmul(a, b)), [(2, 3, 4), (2, 4, 5)]),    # batched case
    (lambda a, b: nm.sum_(nm.mul(a, b)), [(3, 4), (4,)]),               # broadcast mul
    (lambda a, b: nm.sum_(nm.add(a, b)), [(2, 3, 4), (4,)]),            # bias add
    (lambda a: nm.sum_(nm.sigmoid(a)), [(5,)]),
    (lambda a: nm.sum_(nm.gelu(a)), [(7,)]),
    (lambda a: nm.sum_(nm.relu(nm.add(a, 0.3))), [(6,)]),
    (lambda a: nm.sum_(nm.mul(nm.softmax(a), nm.softmax(a))), [(3, 5)]),
    (lambda a: nm.sum_(nm.mul(nm.log_softmax(a), nm.log_softmax(a))), [(2, 6)]),
    (lambda a: nm.mean(a, axis=1), [(1, 3)]),
    (lambda a: nm.sum_(nm.mean(nm.mul(a, a), axis=2)), [(2, 3, 4)]),
    (lambda a: nm.sum_(nm.concat([a, a], axis=0)[1:3]), [(3, 2)]),
    (lambda a: nm.sum_(nm.mul(nm.reshape(a, (6,)), nm.reshape(a, (6,)))), [(2, 3)]),
    (lambda a: nm.sum_(nm.mul(nm.transpose(a, (1, 0, 2)), 2.0)), [(2, 3, 2)]),
])
def test_primitive_gradients(fn, shapes):
    arrs = [rng.normal(size=s) for s in shapes]
    fd_check(fn, arrs)


def test_layer_norm_gradient():
    x = rng.normal(size=(3, 6))
    g = rng.normal(size=6) * 0.1 + 1.0
    b = rng.normal(size=6) * 0.1
    fd_check(lambda x, g, b: nm.sum_(nm.mul(nm.layer_norm(x, g, b), nm.layer_norm(x, g, b))), [x, g, b])


def test_embedding_gradient():
    table = rng.normal(size=(5, 3))
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    fd_check(lambda t: nm.sum_(nm.mul(nm.embedding(t, ids), nm.embedding(t, ids))), [table])


def test_take_along_last_gradient():
    x = rng.normal(size=(2, 3, 4))
    idx = np.array([[0, 3, 1], [2, 2, 0]])
    fd_check(lambda x: nm.sum_(nm.take_along_last(nm.mul(x, x), idx)), [x])


def test_sigmoid_grad_at_zero():
    x = Tensor(np.array(0.0), requires_grad=True)
    nm.sigmoid(x).backward()
    assert x.grad == pytest.approx(0.25)


def test_square_grad():
    x = Tensor(np.array(3.0), requires_grad=True)
    nm.mul(x, x).backward()
    assert x.grad == pytest.approx(6.0)


# mse ------------------------------------------------------------------------

def test_mse_identical_is_zero():
    a = rng.normal(size=(3, 4))
    assert nm.mse(Tensor(a), Tensor(a.copy())).item() == 0.0


def test_mse_values():
    assert nm.mse(Tensor(np.array([0.0, 0.0])), Tensor(np.array([2.0, 0.0]))).item() == pytest.approx(2.0)
    assert nm.mse(Tensor(np.array([1.0])), Tensor(np.array([-1.0]))).item() == pytest.approx(4.0)


def test_mse_symmetric():
    a, b = rng.normal(size=7), rng.normal(size=7)
    assert nm.mse(Tensor(a), Tensor(b)).item() == pytest.approx(nm.mse(Tensor(b), Tensor(a)).item())


def test_mse_shape_mismatch():
    with pytest.raises(nm.NumericsError):
        nm.mse(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# nll ------------------------------------------------------------------------

def test_nll_uniform():
    logits = Tensor(np.zeros((1, 8)))
    assert nm.nll(logits, np.array([3])).item() == pytest.approx(math.log(8), rel=1e-9)


def test_nll_sums_positions():
    logits = Tensor(np.zeros((3, 8)))
    assert nm.nll(logits, np.array([0, 5, 7])).item() == pytest.approx(3 * math.log(8), rel=1e-9)


def test_nll_confident_near_zero():
    # loss = log(1 + (V-1) e^-gap); below 1e-8 needs (V-1) e^-20 < 1e-8
    logits = np.zeros((1, 4))
    logits[0, 2] = 20.0
    assert nm.nll(Tensor(logits), np.array([2])).item() < 1e-8


def test_nll_target_out_of_range():
    with pytest.raises(nm.NumericsError):
        nm.nll(Tensor(np.zeros((1, 8))), np.array([8]))


def test_nll_mask():
    logits = Tensor(np.zeros((4, 8)))
    mask = np.array([1.0, 0.0, 1.0, 0.0])
    assert nm.nll(logits, np.zeros(4, dtype=int), mask).item() == pytest.approx(2 * math.log(8), rel=1e-9)


# optimizer -------------------------------------------------------------------

def test_adam_zero_grad_no_move():
    store = ParamStore()
    store.add("w", np.ones(3))
    store["w"].grad = np.zeros(3)
    nm.adam_step(store, lr=0.1)
    np.testing.assert_array_equal(store["w"].data, np.ones(3))


def test_adam_frozen_untouched():
    store = ParamStore()
    store.add("w", np.ones(3), trainable=False)
    store["w"].grad = np.ones(3)
    nm.adam_step(store, lr=0.1)
    np.testing.assert_array_equal(store["w"].data, np.ones(3))


def test_adam_first_step_magnitude():
    # with bias correction the first update is lr * g / (|g| + eps) ~ lr
    store = ParamStore()
    store.add("w", np.zeros(1))
    store["w"].grad = np.ones(1)
    nm.adam_step(store, lr=0.1)
    assert store["w"].data[0] == pytest.approx(-0.1, rel=1e-6)


def test_duplicate_name_rejected():
    store = ParamStore()
    store.add("w", np.ones(1))
    with pytest.raises(nm.NumericsError):
        store.add("w", np.ones(1))


# purity / determinism ---------------------------------------------------------

def test_primitives_pure():
    x = rng.normal(size=(4, 4)).astype(np.float32)
    a = nm.softmax(nm.matmul(Tensor(x), Tensor(x))).data
    b = nm.softmax(nm.matmul(Tensor(x.copy()), Tensor(x.copy()))).data
    assert np.array_equal(a, b)


def test_mac_counter():
    with nm.count_macs() as c:
        nm.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 5))))
    assert c.macs == 3 * 4 * 5


def test_grad_check_api():
    store = ParamStore()
    store.add("x", np.array([3.0]))

    def loss():
        x = store["x"]
        return nm.sum_(nm.mul(x, x))

    rep = nm.grad_check(loss, store, eps=1e-6)
    assert rep["_max"] < 1e-7
