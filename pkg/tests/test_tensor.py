import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmgraph import tensor as tn
from mmgraph.optim import AdamState, LrSchedule, adam_step, lr_at
from mmgraph.tensor import Tensor


def test_matmul_identity_and_zero():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tn.matmul(np.eye(2), m).data, m)
    out = tn.matmul(np.zeros((2, 3)), np.random.default_rng(0).normal(size=(3, 2)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_row_times_column():
    assert tn.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(tn.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        tn.matmul(np.ones((2, 3)), np.ones((2, 2)))


@pytest.mark.parametrize("x, expected", [(1.0, 1.0), (-1.0, -0.2), (0.0, 0.0)])
def test_leaky_relu_values(x, expected):
    assert tn.leaky_relu([x], 0.2).data[0] == pytest.approx(expected, abs=0)


def test_leaky_relu_subgradient_at_zero_is_slope():
    x = Tensor([0.0], requires_grad=True)
    tn.leaky_relu(x, 0.2).sum().backward()
    assert x.grad[0] == 0.2


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ValueError):
        tn.leaky_relu([1.0], 1.5)


def test_masked_softmax_examples():
    np.testing.assert_allclose(tn.masked_softmax([5.0, 5.0], [True, True]).data, [0.5, 0.5], atol=1e-15)
    out = tn.masked_softmax([0.0, 123.0], [True, False]).data
    assert out.tolist() == [1.0, 0.0]
    np.testing.assert_allclose(tn.masked_softmax([math.log(2), 0.0], [True, True]).data, [2 / 3, 1 / 3],
                               atol=1e-15)


def test_masked_softmax_isolated_row():
    with pytest.raises(tn.IsolatedNodeError):
        tn.masked_softmax([[1.0, 2.0], [3.0, 4.0]], [[True, False], [False, False]])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.data())
def test_masked_softmax_normalisation(logits, data):
    mask = data.draw(st.lists(st.booleans(), min_size=len(logits), max_size=len(logits)))
    mask[data.draw(st.integers(0, len(logits) - 1))] = True
    out = tn.masked_softmax(logits, mask).data
    m = np.array(mask)
    assert (out[~m] == 0.0).all()
    assert (out[m] > 0).all()
    assert abs(out[m].sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("u, v, expected", [
    ([1.0, 0.0], [1.0, 0.0], 1.0),
    ([1.0, 0.0], [0.0, 1.0], 0.0),
    ([1.0, 2.0], [2.0, 1.0], 0.8),
])
def test_cosine_examples(u, v, expected):
    assert tn.cosine_sim(u, v).item() == pytest.approx(expected, abs=1e-15)


def test_cosine_near_zero():
    with pytest.raises(ValueError):
        tn.cosine_sim([0.0, 0.0], [1.0, 0.0])
    assert tn.cosine_sim([0.0, 0.0], [1.0, 0.0], fallback=True).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8), st.floats(0.01, 100))
def test_cosine_scale_invariance_and_symmetry(u, c):
    u = np.array(u)
    if np.linalg.norm(u) < 1e-3:
        return
    assert tn.cosine_sim(u, c * u).item() == pytest.approx(1.0, abs=1e-12)
    v = np.roll(u, 1) + 0.5
    if np.linalg.norm(v) < 1e-3:
        return
    assert tn.cosine_sim(u, v).item() == tn.cosine_sim(v, u).item()
    assert -1.0 <= tn.cosine_sim(u, v).item() <= 1.0


def test_backward_linear_and_quadratic():
    x = Tensor([1.0, -2.0, 5.0], requires_grad=True)
    x.sum().backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = Tensor(3.0, requires_grad=True)
    (y * y).backward()
    assert y.grad == 6.0


def test_backward_accumulates_and_zero_grads_resets():
    x = Tensor(2.0, requires_grad=True)
    (x * 3.0).backward()
    (x * 3.0).backward()
    assert x.grad == 6.0
    tn.zero_grads([x])
    assert x.grad is None


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(tn.ShapeError):
        (x * 2.0).backward()


def test_backward_populates_intermediates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    h = x * 2.0
    (h * h).sum().backward()
    assert h.grad is not None and h.grad.shape == h.shape


# Finite-difference property check, one entry per differentiable op.
# Each builds a scalar from random inputs in [-2, 2]. Errors are measured
# against the largest gradient entry of the tensor, since near-zero entries
# only carry central-difference round-off.
def _scaled_error(a, n):
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-6)
    return float(np.abs(a - n).max() / scale)


def _sq(t):
    return (t * t).sum()


OPS = {
    "add": (lambda a, b: _sq(a + b), [(3, 2), (3, 2)]),
    "add_broadcast": (lambda a, b: _sq(a + b), [(3, 2), (1, 2)]),
    "sub": (lambda a, b: _sq(a - b), [(4,), (4,)]),
    "mul": (lambda a, b: _sq(a * b), [(2, 3), (2, 3)]),
    "div": (lambda a, b: _sq(a / (tn.exp(b) + 1.0)), [(3,), (3,)]),
    "exp": (lambda a: _sq(tn.exp(a)), [(5,)]),
    "log": (lambda a: _sq(tn.log(a * a + 1.0)), [(5,)]),
    "relu": (lambda a: _sq(tn.relu(a)) + tn.relu(a).sum(), [(6,)]),
    "leaky_relu": (lambda a: _sq(tn.leaky_relu(a)) + tn.leaky_relu(a).sum(), [(6,)]),
    "sigmoid": (lambda a: _sq(tn.sigmoid(a)), [(5,)]),
    "matmul": (lambda a, b: _sq(a @ b), [(3, 4), (4, 2)]),
    "matvec": (lambda a, b: _sq(a @ b), [(3, 4), (4,)]),
    "transpose": (lambda a: _sq(a.T @ a), [(3, 2)]),
    "reshape": (lambda a: _sq(a.reshape((3, 2)) @ a), [(2, 3)]),
    "take": (lambda a: _sq(a[np.array([0, 2, 2])] * a[1]), [(3, 4)]),
    "concat": (lambda a, b: _sq(tn.concat([a, b * a], axis=1)), [(2, 3), (2, 3)]),
    "stack": (lambda a, b: _sq(tn.stack([a, b * b])), [(4,), (4,)]),
    "sum_axis": (lambda a: _sq(a.sum(axis=0)) + _sq(a.sum(axis=1, keepdims=True)), [(3, 4)]),
    "mean": (lambda a: _sq(a.mean(axis=1)) + a.mean() * a.mean(), [(3, 4)]),
    "masked_softmax": (lambda a, b: (tn.masked_softmax(a, np.array([[1, 1, 0], [0, 1, 1]], bool)) * b).sum(),
                       [(2, 3), (2, 3)]),
    "log_softmax": (lambda a, b: (tn.log_softmax(a) * b).sum(), [(2, 4), (2, 4)]),
    "normalize_rows": (lambda a, b: (tn.normalize_rows(a) * b).sum(), [(3, 4), (3, 4)]),
    "cosine_sim": (lambda a, b: tn.cosine_sim(a, b) * tn.cosine_sim(a, b), [(4,), (4,)]),
    "cross_entropy": (lambda a: tn.cross_entropy(a, [1, 0, 2]), [(3, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_operation_gradients_match_finite_differences(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        xs = [Tensor(rng.uniform(-2, 2, size=s), requires_grad=True) for s in shapes]
        fn(*xs).backward()
        for x in xs:
            numeric = tn.finite_difference_grad(lambda: fn(*[Tensor(y.data) for y in xs]).item(), x, 1e-6)
            worst = max(worst, _scaled_error(x.grad, numeric))
    assert worst < 1e-4, f"{name}: {worst:.2e}"


# optimiser -------------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState()
    for _ in range(3):
        adam_step(p, {"w": np.zeros(2)}, state, 1e-2)
    assert p["w"].data.tolist() == [1.0, -2.0]
    assert state.step_count == 3


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array(0.5), requires_grad=True)}
    adam_step(p, {"w": np.array(1.0)}, AdamState(), 1e-3)
    # m_hat / sqrt(v_hat) = 1 at step one; eps shifts it by ~1e-11
    assert p["w"].data == pytest.approx(0.5 - 1e-3, abs=1e-10)


def test_adam_second_identical_step_not_larger():
    p = {"w": Tensor(np.array(0.0), requires_grad=True)}
    state = AdamState()
    adam_step(p, {"w": np.array(0.7)}, state, 1e-3)
    d1 = abs(float(p["w"].data))
    adam_step(p, {"w": np.array(0.7)}, state, 1e-3)
    d2 = abs(float(p["w"].data)) - d1
    assert d2 <= d1 + 1e-9


def test_adam_shape_mismatch_and_negative_lr():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(tn.ShapeError):
        adam_step(p, {"w": np.zeros(3)}, AdamState(), 1e-3)
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(2)}, AdamState(), -1.0)


def test_adam_moments_shape_match():
    p = {"w": Tensor(np.zeros((2, 3)), requires_grad=True)}
    state = AdamState()
    adam_step(p, {"w": np.ones((2, 3))}, state, 1e-3)
    assert state.first_moment["w"].shape == (2, 3) == state.second_moment["w"].shape


def test_lr_schedule_points():
    s = LrSchedule(1e-4, 5, 50)
    assert lr_at(s, 5) == 1e-4
    assert lr_at(s, 0) == pytest.approx(2e-5)
    last = 1e-4 * 0.5 * (1 + math.cos(math.pi * 44 / 45))
    assert lr_at(s, 49) == pytest.approx(last, rel=1e-15)
    assert 0 < lr_at(s, 49) < 1e-6
    assert lr_at(LrSchedule(1e-4, 5, 25), 15) == pytest.approx(5e-5, rel=1e-15)


def test_lr_schedule_monotone_after_warmup():
    s = LrSchedule(1e-3, 5, 40)
    lrs = [lr_at(s, e) for e in range(40)]
    assert all(v >= 0 for v in lrs)
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))


def test_lr_schedule_range_errors():
    s = LrSchedule()
    for bad in (-1, 50):
        with pytest.raises(ValueError):
            lr_at(s, bad)
