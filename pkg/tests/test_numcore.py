import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csdm import numcore as nc
from csdm.numcore import Dense, DimensionError, Parameter, Tensor, TrainingError

from conftest import numeric_grad, rel_err

mpmath.mp.dps = 50


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for r in range(k):
                acc += a[i, r] * b[r, j]
            out[i, j] = acc
    return out


# affine / matmul ---------------------------------------------------------------


def test_affine_identity_weights():
    y = nc.affine(Tensor([[1.0, 2.0]]), Parameter(np.eye(2)), Parameter(np.zeros(2)))
    np.testing.assert_array_equal(y.data, [[1.0, 2.0]])


def test_affine_zero_input_passes_bias():
    rng = np.random.default_rng(0)
    y = nc.affine(Tensor([[0.0, 0.0]]), Parameter(rng.normal(size=(2, 2))), Parameter([3.0, 4.0]))
    np.testing.assert_array_equal(y.data, [[3.0, 4.0]])


def test_affine_matches_naive_triple_loop():
    rng = np.random.default_rng(1)
    x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    y = nc.affine(Tensor(x), Parameter(W), Parameter(b))
    np.testing.assert_allclose(y.data, naive_matmul(x, W) + b, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 16), k=st.integers(1, 16), m=st.integers(1, 16), seed=st.integers(0, 2**31))
def test_affine_naive_oracle_property(n, k, m, seed):
    rng = np.random.default_rng(seed)
    x, W, b = rng.normal(size=(n, k)), rng.normal(size=(k, m)), rng.normal(size=m)
    y = nc.affine(Tensor(x), Parameter(W), Parameter(b))
    np.testing.assert_allclose(y.data, naive_matmul(x, W) + b, rtol=0, atol=1e-12)


def test_affine_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        nc.affine(Tensor(np.ones((2, 3))), Parameter(np.ones((4, 2))), Parameter(np.zeros(2)))


# sigmoid / bce -------------------------------------------------------------------


def test_sigmoid_values():
    assert nc.sigmoid(Tensor(0.0)).data == 0.5
    lo = nc.sigmoid(Tensor(-800.0)).data
    assert 0.0 <= lo <= 1e-300 and np.isfinite(lo)
    assert nc.sigmoid(Tensor(800.0)).data == 1.0
    with np.errstate(all="raise"):
        nc.sigmoid(Tensor(np.array([-700.0, 700.0])))


def test_sigmoid_matches_high_precision():
    for x in (1.0, -3.5, 12.0, -30.0):
        ref = float(1 / (1 + mpmath.exp(-mpmath.mpf(x))))
        assert nc.sigmoid(Tensor(x)).data == pytest.approx(ref, rel=1e-15)


def test_bce_values():
    assert nc.bce_loss(0.5, 1) == pytest.approx(np.log(2), abs=1e-12)
    assert nc.bce_loss(1 - 1e-7, 1) == pytest.approx(1e-7, rel=1e-3)
    # p_hat = sigmoid(1) = 0.731058...; the quoted 1.313261 is -log(1 - sigmoid(1))
    p = float(nc.sigmoid(Tensor(1.0)).data)
    ref = float(-mpmath.log(1 - 1 / (1 + mpmath.exp(-1))))
    assert nc.bce_loss(p, 0) == pytest.approx(ref, rel=1e-12)
    assert ref == pytest.approx(1.313261, abs=1e-6)


def test_bce_clamps_extremes():
    assert np.isfinite(nc.bce_loss(0.0, 1))
    assert np.isfinite(nc.bce_loss(1.0, 0))


def test_bce_rejects_non_binary_labels():
    with pytest.raises(ValueError):
        nc.bce_loss(0.5, 2)
    with pytest.raises(ValueError):
        nc.bce_with_logits(Tensor(np.zeros(2)), [0, 0.5])


def test_bce_logit_gradient_is_p_minus_y():
    z = Parameter(np.array([0.3, -1.2, 2.0]))
    y = np.array([1.0, 0.0, 1.0])
    nc.bce_with_logits(z, y).backward()
    p = 1 / (1 + np.exp(-z.data))
    np.testing.assert_allclose(z.grad * 3, p - y, atol=1e-15)


# dropout ----------------------------------------------------------------------------


def test_dropout_identity_cases():
    x = Tensor(np.arange(5.0))
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(nc.dropout(x, 0.0, True, rng).data, x.data)
    np.testing.assert_array_equal(nc.dropout(x, 0.5, False, rng).data, x.data)


def test_dropout_rejects_bad_p():
    with pytest.raises(ValueError):
        nc.dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))
    with pytest.raises(ValueError):
        nc.dropout(Tensor(np.ones(3)), -0.1, True, np.random.default_rng(0))


def test_dropout_mean_preserved():
    y = nc.dropout(Tensor(np.ones(10**6)), 0.5, True, np.random.default_rng(0)).data
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) == {0.0, 2.0}


def test_dropout_elementwise_expectation_within_3_sigma():
    x = np.array([0.5, -1.0, 2.0, 3.0])
    trials = 100_000
    p = 0.3
    # one row per trial
    sample = nc.dropout(Tensor(np.broadcast_to(x, (trials, x.size)).copy()), p, True, np.random.default_rng(5)).data
    sd = np.abs(x) * np.sqrt(p / (1 - p)) / np.sqrt(trials)
    assert np.all(np.abs(sample.mean(axis=0) - x) < 3 * sd)


# adam ----------------------------------------------------------------------------------


def test_adam_zero_grad_is_stationary():
    p = Parameter(np.array([1.0, -2.0]))
    nc.adam_step([p], 0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0]))
    p.grad[...] = 1.0
    nc.adam_step([p], 0.001)
    assert p.data[0] == pytest.approx(1.0 - 0.001, rel=1e-6)
    np.testing.assert_array_equal(p.grad, 0.0)  # zeroed afterwards
    assert p.step_count == 1


def test_adam_converges_on_quadratic():
    w = Parameter(np.array([1.0]))
    opt = nc.Adam([w], lr=0.1)
    for _ in range(100):
        nc.square(w).backward()
        opt.step()
    assert abs(w.data[0]) < 0.1


def test_adam_non_finite_gradient_names_parameter():
    p = Parameter(np.ones(2), name="weights.broken")
    p.grad[0] = np.nan
    with pytest.raises(TrainingError, match="weights.broken"):
        nc.adam_step([p], 0.1)


def test_reset_moments():
    p = Parameter(np.ones(2))
    p.grad[...] = 1.0
    nc.adam_step([p], 0.1)
    nc.reset_moments([p])
    assert p.step_count == 0 and not p.m.any() and not p.v.any()


# embedding bag ----------------------------------------------------------------------------


def test_embedding_lookup_and_weighted_bag():
    table = Parameter(np.arange(12.0).reshape(4, 3))
    np.testing.assert_array_equal(nc.embedding_bag(table, np.array([2, 0])).data, [[6, 7, 8], [0, 1, 2]])
    idx = np.array([[1, 3], [2, 0]])
    w = np.array([[0.5, 0.5], [1.0, 0.0]])
    np.testing.assert_allclose(nc.embedding_bag(table, idx, w).data, [[6, 7, 8], [6, 7, 8]])


def test_embedding_out_of_vocabulary():
    with pytest.raises(IndexError, match="out of vocabulary"):
        nc.embedding_bag(Parameter(np.zeros((3, 2))), np.array([3]))


def test_shared_table_accumulates_gradients():
    table = Parameter(np.ones((3, 2)))
    y = nc.embedding_bag(table, np.array([1])) + nc.embedding_bag(table, np.array([1]))
    nc.reduce_sum(y).backward()
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0]])


def test_backward_requires_scalar_seed():
    with pytest.raises(DimensionError):
        (Parameter(np.ones(3)) * 2.0).backward()


def test_ndarray_on_left_defers_to_tensor():
    t = Parameter(np.ones(2))
    out = np.array([2.0, 3.0]) * t
    assert isinstance(out, Tensor)
    np.testing.assert_array_equal(out.data, [2.0, 3.0])


# gradient checks ----------------------------------------------------------------------------

RNG = np.random.default_rng(1234)


def _check(build, *params: Parameter, tol: float = 1e-4):
    """``build()`` returns a scalar Tensor depending on ``params``."""
    for p in params:
        p.zero_grad()
    build().backward()
    for p in params:
        num = numeric_grad(lambda: float(build().data), p.data)
        assert rel_err(p.grad, num) < tol, p.name


def _randp(*shape, name="p"):
    return Parameter(RNG.normal(size=shape), name)


# fixed downstream weights make every check sensitive to every output entry
def _proj(y: Tensor) -> Tensor:
    w = np.cos(np.arange(y.data.size)).reshape(y.shape)
    return nc.reduce_sum(y * w)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "neg", "square", "div"])
def test_grad_elementwise(op):
    a, b = _randp(3, 4, name="a"), _randp(3, 4, name="b")
    fns = {
        "add": lambda: a + b,
        "sub": lambda: a - b,
        "mul": lambda: a * b,
        "neg": lambda: -a,
        "square": lambda: nc.square(a),
        "div": lambda: a / 3.0,
    }
    _check(lambda: _proj(fns[op]()), a, b)


def test_grad_broadcast_add_mul():
    a, b = _randp(3, 4, name="a"), _randp(4, name="b")
    _check(lambda: _proj(a * b + b), a, b)


def test_grad_relu_away_from_kink():
    a = Parameter(RNG.normal(size=(4, 5)), "a")
    a.data[np.abs(a.data) < 0.05] += 0.2
    _check(lambda: _proj(nc.relu(a)), a)


def test_grad_sigmoid():
    a = _randp(3, 3, name="a")
    _check(lambda: _proj(nc.sigmoid(a)), a)


def test_grad_matmul_and_affine():
    x, W, b = _randp(3, 4, name="x"), _randp(4, 2, name="W"), _randp(2, name="b")
    _check(lambda: _proj(nc.matmul(x, W)), x, W)
    _check(lambda: _proj(nc.affine(x, W, b)), x, W, b)


def test_grad_reductions_and_shapes():
    a, b = _randp(2, 3, 4, name="a"), _randp(2, 3, 4, name="b")
    _check(lambda: _proj(nc.reduce_sum(a, axis=1)), a)
    _check(lambda: _proj(nc.reduce_sum(a, axis=2, keepdims=True)), a)
    _check(lambda: _proj(nc.mean(a, axis=0)), a)
    _check(lambda: _proj(nc.reshape(a, (6, 4))), a)
    _check(lambda: _proj(nc.concat([a, b], axis=2)), a, b)
    _check(lambda: _proj(nc.stack([a, b], axis=1)), a, b)


def test_grad_embedding_bag():
    table = _randp(6, 3, name="table")
    idx1 = np.array([0, 2, 2, 5])
    idx2 = np.array([[1, 2, 0], [3, 3, 0]])
    w2 = np.array([[0.5, 0.5, 0.0], [0.25, 0.75, 0.0]])
    _check(lambda: _proj(nc.embedding_bag(table, idx1)), table)
    _check(lambda: _proj(nc.embedding_bag(table, idx2, w2)), table)


def test_grad_dropout_fixed_mask():
    a = _randp(5, 4, name="a")
    _check(lambda: _proj(nc.dropout(a, 0.5, True, np.random.default_rng(3))), a)


def test_grad_losses():
    z = _randp(8, name="z")
    y = (RNG.random(8) < 0.5).astype(float)
    _check(lambda: nc.bce_with_logits(z, y), z)
    pred = _randp(5, 3, name="pred")
    target = RNG.normal(size=(5, 3))
    _check(lambda: nc.mse(pred, target), pred)


def test_grad_dense_layer():
    d = Dense(np.random.default_rng(0), 4, 3, "dense")
    x = _randp(5, 4, name="x")
    _check(lambda: _proj(nc.relu(d(x)) + d(x)), x, *d.parameters())


def test_embedding_gradient_is_row_sparse():
    table = _randp(5, 3, name="table")
    nc.reduce_sum(nc.square(nc.embedding_bag(table, np.array([2])))).backward()
    num = numeric_grad(lambda: float(np.sum(table.data[2] ** 2)), table.data)
    rows = np.flatnonzero(np.abs(num).sum(axis=1))
    assert list(rows) == [2]
    np.testing.assert_array_equal(np.flatnonzero(np.abs(table.grad).sum(axis=1)), [2])


def test_glorot_bounds():
    w = nc.glorot_uniform(np.random.default_rng(0), 30, 10)
    assert np.abs(w).max() <= np.sqrt(6 / 40)
