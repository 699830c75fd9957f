import numpy as np
import pytest

import qgcn.numerics as nx
from qgcn.errors import ShapeMismatch
from qgcn.numerics import Tensor, gradcheck
from qgcn.numerics.functional import BN_EPS, RunningStats


def leaf(rng, *shape, scale=1.0, name=None):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True, name=name)


def check(f, inputs, tol=1e-6):
    rep = gradcheck(f, inputs, tol=tol)
    assert rep.passed, rep.summary()
    return rep


# ---------------------------------------------------------------- kernels


def test_matmul_identity(rng):
    X = rng.normal(size=(3, 5))
    assert np.array_equal(nx.matmul(np.eye(3), X).data, X)


def test_relu_values_and_mask():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = nx.relu(x)
    assert np.array_equal(y.data, [0.0, 0.0, 2.0])
    y.sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_concat_matches_manual_blocks(rng):
    a, b, c = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 5)), rng.normal(size=(2, 4, 5))
    out = nx.concat([a, b, c], axis=-1).data
    manual = np.zeros((2, 4, 13))
    manual[..., 0:3] = a
    manual[..., 3:8] = b
    manual[..., 8:13] = c
    assert np.array_equal(out, manual)


@pytest.mark.parametrize(
    "name,f,shapes",
    [
        ("add_broadcast", lambda a, b: (a + b).sum(), [(3, 4), (4,)]),
        ("sub", lambda a, b: ((a - b) * (a - b)).sum(), [(3, 4), (3, 1)]),
        ("mul", lambda a, b: (a * b).sum(), [(2, 3), (2, 3)]),
        ("div", lambda a, b: (a / (b * b + 1.0)).sum(), [(2, 3), (3,)]),
        ("matmul2d", lambda a, b: ((a @ b) ** 2).sum(), [(3, 4), (4, 2)]),
        ("matmul_batch_weight", lambda a, b: ((a @ b) ** 2).sum(), [(2, 3, 4), (4, 5)]),
        ("matmul_op_batch", lambda a, b: ((a @ b) ** 2).sum(), [(3, 4), (2, 2, 4, 5)]),
        ("matmul_batched", lambda a, b: ((a @ b) ** 2).sum(), [(2, 3, 4), (2, 4, 5)]),
        ("reshape_transpose", lambda a: (a.reshape(4, 6).transpose() ** 2 * np.arange(24.0).reshape(6, 4)).sum(), [(2, 3, 4)]),
        ("getitem_basic", lambda a: (a[1:, ::2] ** 2).sum(), [(3, 4)]),
        ("getitem_fancy", lambda a: (a[:, [0, 2, 2]] ** 2).sum(), [(3, 4)]),
        ("concat", lambda a, b: (nx.concat([a, b], axis=1) ** 2 * np.arange(7.0)).sum(), [(2, 3), (2, 4)]),
        ("stack", lambda a, b: (nx.stack([a, b], axis=-1) ** 2 * np.array([1.0, 3.0])).sum(), [(2, 3), (2, 3)]),
        ("mean_axis", lambda a: (a.mean(axis=1) ** 2).sum(), [(3, 5)]),
        ("sum_keepdims", lambda a: (a.sum(axis=0, keepdims=True) ** 2).sum(), [(3, 5)]),
        ("sigmoid", lambda a: nx.sigmoid(a).sum(), [(4, 3)]),
        ("sqrt", lambda a: nx.sqrt(a * a + 1.0).sum(), [(4, 3)]),
        ("norm", lambda a: nx.norm(a, axis=-1).sum(), [(4, 3)]),
        ("abs", lambda a: nx.tabs(a).sum(), [(4, 3)]),
        ("sin_cos", lambda a: (nx.sin(a) * nx.cos(a)).sum(), [(4, 3)]),
        ("atan2", lambda a, b: nx.atan2(a, b).sum(), [(4, 3), (4, 3)]),
        ("arccos", lambda a: nx.arccos_clamped(nx.sigmoid(a) * 1.8 - 0.9).sum(), [(4, 3)]),
        ("power", lambda a: ((a * a + 0.5) ** 1.5).sum(), [(4, 3)]),
    ],
)
def test_kernel_gradients(rng, name, f, shapes):
    inputs = [leaf(rng, *s) for s in shapes]
    check(f, inputs)


def test_sum_of_squares_exact(rng):
    x = leaf(rng, 5, 4)
    rep = gradcheck(lambda a: (a * a).sum(), [x], tol=1e-9)
    assert rep.passed and rep.max_rel_error < 1e-9


def test_shape_errors(rng):
    with pytest.raises(ShapeMismatch):
        nx.matmul(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    with pytest.raises(ShapeMismatch):
        nx.add(rng.normal(size=(3, 4)), rng.normal(size=(2, 4)))
    with pytest.raises(ShapeMismatch):
        nx.concat([rng.normal(size=(3, 4)), rng.normal(size=(2, 5))], axis=1)
    with pytest.raises(ShapeMismatch):
        nx.reshape(rng.normal(size=(3, 4)), (5, 2))


def test_arccos_clamp():
    x = Tensor([1.0, -1.0, 0.5], requires_grad=True)
    y = nx.arccos_clamped(x)
    assert np.all(np.isfinite(y.data))
    y.sum().backward()
    assert np.all(np.isfinite(x.grad))
    d = 1e-12
    assert x.grad[0] == pytest.approx(-1.0 / np.sqrt(1.0 - (1.0 - d) ** 2))


# ---------------------------------------------------------------- backward


def test_backward_examples(rng):
    W = leaf(rng, 3, 4)
    W.sum().backward()
    assert np.array_equal(W.grad, np.ones((3, 4)))

    A = rng.normal(size=(2, 3))
    W = leaf(rng, 3, 4)
    nx.matmul(A, W).sum().backward()
    assert np.allclose(W.grad, A.T @ np.ones((2, 4)), rtol=0, atol=1e-14)

    x = leaf(rng, 5)
    (x.sum() + x.sum()).backward()
    assert np.array_equal(x.grad, np.full(5, 2.0))


def test_untouched_leaf_gets_zero(rng):
    x, unused = leaf(rng, 3), leaf(rng, 2)
    (x * x).sum().backward(params=[x, unused])
    assert np.array_equal(unused.grad, np.zeros(2))


def test_backward_needs_scalar(rng):
    x = leaf(rng, 3)
    with pytest.raises(ShapeMismatch):
        (x * 2.0).backward()


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 3)
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ---------------------------------------------------------------- batch norm


def _bn_params(rng, C):
    return Tensor(rng.uniform(0.5, 1.5, C), requires_grad=True), Tensor(rng.normal(size=C), requires_grad=True)


def test_batch_norm_train_statistics(rng):
    x = rng.normal(loc=3.0, scale=2.0, size=(8, 5, 4))
    scale, shift = Tensor(np.ones(4)), Tensor(np.zeros(4))
    stats = RunningStats.fresh(4)
    y = nx.batch_norm(x, scale, shift, stats, "train").data.reshape(-1, 4)
    assert np.allclose(y.mean(axis=0), 0.0, atol=1e-6)
    assert np.allclose(y.var(axis=0), 1.0, atol=1e-4)  # eps in the denominator
    raw = x.reshape(-1, 4)
    assert np.allclose(y, (raw - raw.mean(0)) / np.sqrt(raw.var(0) + BN_EPS), atol=1e-12)
    # running stats: momentum 0.1 from (0, 1), unbiased variance
    n = raw.shape[0]
    assert np.allclose(stats.mean, 0.1 * raw.mean(0), atol=1e-12)
    assert np.allclose(stats.var, 0.9 + 0.1 * raw.var(0) * n / (n - 1), atol=1e-12)


def test_batch_norm_eval_constant(rng):
    scale, shift = _bn_params(rng, 3)
    stats = RunningStats(np.full(3, 2.5), np.full(3, 0.7))
    y = nx.batch_norm(np.full((4, 3), 2.5), scale, shift, stats, "eval")
    assert np.allclose(y.data, np.broadcast_to(shift.data, (4, 3)), atol=1e-15)


def test_batch_norm_batch_one_errors(rng):
    scale, shift = _bn_params(rng, 3)
    with pytest.raises(ValueError):
        nx.batch_norm(rng.normal(size=(1, 3)), scale, shift, RunningStats.fresh(3), "train")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradcheck(rng, mode):
    x = leaf(rng, 6, 3, 4)
    scale, shift = _bn_params(rng, 4)
    w = rng.normal(size=(6, 3, 4))
    stats = RunningStats(rng.normal(size=4), rng.uniform(0.5, 2.0, 4))

    def f(x, s, b):
        # fresh copy of the stats so probes do not drift them
        st = RunningStats(stats.mean.copy(), stats.var.copy())
        return (nx.batch_norm(x, s, b, st, mode) * w).sum()

    rep = gradcheck(f, [x, scale, shift], tol=1e-4)
    assert rep.passed, rep.summary()


# ---------------------------------------------------------------- dropout


def test_dropout_identities(rng):
    x = rng.normal(size=(10, 10))
    assert np.array_equal(nx.dropout(x, 0.0, mode="train", seed=1).data, x)
    assert np.array_equal(nx.dropout(x, 0.9, mode="eval", seed=1).data, x)


def test_dropout_statistics():
    y = nx.dropout(np.ones(1_000_000), 0.25, mode="train", seed=(7, 3)).data
    dropped = np.mean(y == 0.0)
    assert abs(dropped - 0.25) <= 0.003
    assert np.allclose(y[y != 0], 1.0 / 0.75)


def test_dropout_seeded_and_frozen_mask_gradcheck(rng):
    a = nx.dropout(np.ones(100), 0.5, seed=(1, 2)).data
    b = nx.dropout(np.ones(100), 0.5, seed=(1, 2)).data
    c = nx.dropout(np.ones(100), 0.5, seed=(1, 3)).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    x = leaf(rng, 20)
    rep = gradcheck(lambda t: (nx.dropout(t, 0.3, seed=(5,)) ** 2).sum(), [x], tol=1e-6)
    assert rep.passed, rep.summary()


def test_dropout_rejects_bad_rate():
    with pytest.raises(ValueError):
        nx.dropout(np.ones(3), 1.0, seed=0)


# ---------------------------------------------------------------- gradcheck itself


def test_gradcheck_detects_wrong_gradient(rng):
    x = leaf(rng, 4)

    def bad(t):
        out = nx.sin(t)

        def fn(g):
            return (g * 2.0,)

        from qgcn.numerics.tensor import _result

        return _result(out.data, (t,), fn).sum()

    rep = gradcheck(bad, [x], tol=1e-4)
    assert not rep.passed


def test_gradcheck_subsamples(rng):
    x = leaf(rng, 30, 30)
    rep = gradcheck(lambda t: (t * t).sum(), [x], probes=200)
    assert rep.tensors[0].probed == 200
    small = leaf(rng, 5)
    rep = gradcheck(lambda t: (t * t).sum(), [small], probes=200)
    assert rep.tensors[0].probed == 5


def test_rel_error_formula():
    from qgcn.numerics.gradcheck import rel_error

    assert rel_error(0.5, 0.5 + 1e-6) == pytest.approx(1e-6)
    assert rel_error(100.0, 101.0) == pytest.approx(1.0 / 101.0)


def test_determinism(rng):
    data = rng.normal(size=(4, 6))

    def run():
        w = Tensor(np.linspace(-1, 1, 12).reshape(6, 2), requires_grad=True)
        h = nx.dropout(nx.relu(nx.matmul(data, w)), 0.25, seed=(3,))
        h.sum().backward()
        return h.data.copy(), w.grad.copy()

    (a, ga), (b, gb) = run(), run()
    assert np.array_equal(a, b) and np.array_equal(ga, gb)
