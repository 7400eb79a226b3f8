import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invicl.tasks import (
    OOD,
    TaskConfig,
    TaskKind,
    dump_episodes,
    lasso_ista_weights,
    lasso_lambda_grid,
    least_squares_weights,
    load_episodes,
    loo_correction,
    oracle_gd,
    oracle_invicl_recurrence,
    oracle_least_squares,
    sample_arrays,
    sample_task,
    soft_threshold,
    tune_lasso,
)


def test_sampling_is_deterministic():
    cfg = TaskConfig(seed=7)
    a, b = sample_task(cfg, 3), sample_task(cfg, 3)
    assert np.array_equal(a.X, b.X) and a.y_t == b.y_t
    assert not np.array_equal(a.X, sample_task(cfg, 4).X)


def test_labels_are_noiseless_linear():
    inst = sample_task(TaskConfig(d=4, n=6, seed=1))
    assert np.allclose(inst.X @ inst.w, inst.y) and inst.b == 0
    assert inst.x_t @ inst.w == pytest.approx(inst.y_t)


def test_sparse_weights_have_three_nonzeros():
    _, _, w, *_ = sample_arrays(TaskConfig(TaskKind.SPARSE, d=8), 50, np.random.default_rng(0))
    assert ((w != 0).sum(axis=1) == 3).all()


def test_sparse_needs_d_at_least_three():
    with pytest.raises(ValueError):
        TaskConfig(TaskKind.SPARSE, d=2)


def test_ood_scale_has_variance_nine():
    X, *_ = sample_arrays(TaskConfig(d=5, n=40, ood=OOD.SCALE), 200, np.random.default_rng(0))
    assert X.var() == pytest.approx(9.0, rel=0.05)


def test_ood_noise_adds_shared_offset():
    X, y, w, b, x_t, y_t = sample_arrays(TaskConfig(d=3, n=5, ood=OOD.NOISE), 100, np.random.default_rng(0))
    resid = y - np.einsum("cnd,cd->cn", X, w)
    assert np.allclose(resid, b[:, None]) and b.std() == pytest.approx(1.0, rel=0.3)


def test_ood_subspace_rank():
    X, *_ = sample_arrays(TaskConfig(d=6, n=10, ood=OOD.SUBSPACE), 4, np.random.default_rng(0))
    assert all(np.linalg.matrix_rank(X[c]) == 3 for c in range(4))


def test_jsonl_round_trip(tmp_path):
    cfg = TaskConfig(d=3, n=4, seed=2)
    insts = [sample_task(cfg, e) for e in range(3)]
    dump_episodes(insts, tmp_path / "e.jsonl")
    back = load_episodes(tmp_path / "e.jsonl")
    assert all(np.array_equal(a.X, b.X) and a.cfg == b.cfg for a, b in zip(insts, back))


@given(st.integers(1, 6), st.integers(0, 4), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_least_squares_matches_numpy(d, extra, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((d + extra, d))
    y = rng.standard_normal(d + extra)
    ref = np.linalg.lstsq(X, y, rcond=None)[0]
    assert np.allclose(least_squares_weights(X, y), ref, atol=1e-8)


def test_least_squares_recovers_noiseless_query():
    inst = sample_task(TaskConfig(d=5, n=5, seed=3))
    assert (oracle_least_squares(inst.X, inst.y, inst.x_t) - inst.y_t) ** 2 <= 1e-8


def test_underdetermined_gives_minimum_norm():
    X = np.array([[1.0, 1.0]])
    assert np.allclose(least_squares_weights(X, np.array([2.0])), [1.0, 1.0])


def test_gd_loop_oracle():
    rng = np.random.default_rng(0)
    X, y, w0 = rng.standard_normal((6, 3)), rng.standard_normal(6), rng.standard_normal(3)
    w = w0.copy()
    for k in range(4):
        grad = np.zeros(3)
        for i in range(6):
            grad += (X[i] @ w - y[i]) * X[i]
        w = w - 0.05 * grad
        assert np.allclose(oracle_gd(X, y, 0.05, 4, w0)[k + 1], w)


def test_loo_correction_by_pairs():
    rng = np.random.default_rng(1)
    X, y, w = rng.standard_normal((5, 3)), rng.standard_normal(5), rng.standard_normal(3)
    expected = sum(X[i] * (X[i] @ X[j]) * (X[j] @ w - y[j]) for i in range(5) for j in range(5) if i != j)
    assert np.allclose(loo_correction(X, y, w), expected)


def test_recurrence_without_correction_is_gd_bitwise():
    rng = np.random.default_rng(2)
    X, y, w0 = rng.standard_normal((8, 4)), rng.standard_normal(8), rng.standard_normal(4)
    a = oracle_invicl_recurrence(X, y, 0.01, 10, w0, correction=False)
    assert np.array_equal(a, oracle_gd(X, y, 0.01, 10, w0))


def test_soft_threshold():
    assert soft_threshold(np.array([3.0, -0.5, -2.0]), 1.0).tolist() == [2.0, 0.0, -1.0]


def test_ista_satisfies_kkt():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((20, 6))
    y = X @ np.array([2.0, 0, 0, -1.0, 0, 0.5]) + 0.01 * rng.standard_normal(20)
    lam = 1.0
    w = lasso_ista_weights(X, y, lam, 5000)
    g = X.T @ (y - X @ w)
    on = w != 0
    assert np.allclose(g[on], lam * np.sign(w[on]), atol=1e-6)
    assert (np.abs(g[~on]) <= lam + 1e-6).all()


def test_lambda_grid_and_tuning():
    assert lasso_lambda_grid(10) == pytest.approx([0.01, 0.1, 1.0, 10.0])
    rng = np.random.default_rng(4)
    w = np.array([1.0, 0, 0, 2.0])
    X, Xv = rng.standard_normal((15, 4)), rng.standard_normal((15, 4))
    lam, wt = tune_lasso(X, X @ w, Xv, Xv @ w)
    assert lam in lasso_lambda_grid(15) and np.allclose(wt, w, atol=0.05)
