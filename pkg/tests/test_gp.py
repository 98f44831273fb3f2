"""GP regression: closed forms, dense oracles, finite differences, invariants."""
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gtddp.errors import ConditioningError, InsufficientDataError, ShapeError
from gtddp.gp import (
    GpDataset,
    GpHyperparams,
    OptimizerConfig,
    _lml_and_grad,
    default_hyperparams,
    fit,
    kernel,
    kernel_matrix,
    noise_only,
    optimize_dimension,
    optimize_hyperparams,
)

finite = st.floats(-5, 5, allow_nan=False)


def _problem(rng, N=8, D=3, n=2, hyper=None):
    X = rng.normal(size=(N, D))
    Y = rng.normal(size=(N, n))
    h = hyper or GpHyperparams(1.3, 0.2, rng.uniform(0.3, 2.0, D))
    return GpDataset(X, Y), h


def _dense_oracle(X, y, h, q):
    """Loop-by-loop covariance, then np.linalg.solve (no Cholesky)."""
    N = len(X)
    K = np.array([[kernel(X[i], X[j], h) for j in range(N)] for i in range(N)]) + h.sigma_w**2 * np.eye(N)
    k = np.array([kernel(q, X[i], h) for i in range(N)])
    return k @ np.linalg.solve(K, y), h.sigma_s**2 - k @ np.linalg.solve(K, k)


# ------------------------------------------------------------------- kernel

def test_kernel_zero_distance_is_signal_variance():
    h = GpHyperparams(1.7, 0.1, [0.5, 2.0])
    assert kernel([1.0, -2.0], [1.0, -2.0], h) == pytest.approx(1.7**2, rel=1e-15)


def test_kernel_unit_offset_hand_value():
    h = GpHyperparams(1.0, 0.1, np.ones(3))
    assert kernel([0, 0, 0], [0, 1, 0], h) == pytest.approx(np.exp(-0.5), rel=1e-15)


@given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite))
def test_kernel_symmetric(a, b):
    h = GpHyperparams(0.8, 0.1, [1.0, 0.5, 2.0, 0.1])
    assert kernel(a, b, h) == kernel(b, a, h)


def test_kernel_matrix_matches_pairwise(rng):
    h = GpHyperparams(1.1, 0.1, rng.uniform(0.1, 3, 4))
    A, B = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
    ref = np.array([[kernel(a, b, h) for b in B] for a in A])
    np.testing.assert_allclose(kernel_matrix(A, B, h), ref, rtol=1e-13)


def test_kernel_shape_mismatch():
    with pytest.raises(ShapeError):
        kernel([0, 0], [0, 0, 0], GpHyperparams(1, 1, [1, 1]))


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        GpHyperparams(0.0, 1.0, [1.0])
    with pytest.raises(ValueError):
        GpHyperparams(1.0, 1.0, [1.0, -1.0])
    with pytest.raises(ValueError):
        GpHyperparams.from_dict({"sigma_s": 1, "sigma_w": 1, "m_diag": [1], "extra": 2})


def test_hyperparams_log_round_trip():
    h = GpHyperparams(0.3, 2e-3, [1e-4, 7.0])
    h2 = GpHyperparams.from_log(h.to_log())
    assert h2.sigma_s == pytest.approx(h.sigma_s, rel=1e-15)
    np.testing.assert_allclose(h2.m_diag, h.m_diag, rtol=1e-14)


# ----------------------------------------------------------------- fit / predict

def test_single_sample_closed_forms():
    s, w, y = 1.5, 0.4, 2.0
    h = GpHyperparams(s, w, [1.0, 1.0])
    model = fit(GpDataset([[0.3, -0.2]], [[y]]), h)
    assert model.factor[0][0, 0] ** 2 == pytest.approx(s**2 + w**2, rel=1e-14)
    assert model.alpha[0, 0] == pytest.approx(y / (s**2 + w**2), rel=1e-14)
    assert model.predict_mean([0.3, -0.2])[0] == pytest.approx(s**2 / (s**2 + w**2) * y, rel=1e-14)
    assert model.predict_var([0.3, -0.2])[0] == pytest.approx(s**2 * w**2 / (s**2 + w**2), rel=1e-12)
    np.testing.assert_array_equal(model.predict_grad_mean([0.3, -0.2]), 0.0)
    value, _ = model.log_marginal_likelihood(0)
    ref = -0.5 * y**2 / (s**2 + w**2) - 0.5 * np.log(s**2 + w**2) - 0.5 * np.log(2 * np.pi)
    assert value == pytest.approx(ref, rel=1e-14)


def test_alpha_matches_dense_solve(rng):
    data, h = _problem(rng, N=10, n=1)
    model = fit(data, h)
    K = kernel_matrix(data.inputs, data.inputs, h) + h.sigma_w**2 * np.eye(10)
    np.testing.assert_allclose(model.alpha[:, 0], np.linalg.solve(K, data.targets[:, 0]), rtol=1e-10)


def test_predictions_match_dense_oracle(rng):
    data, h = _problem(rng, N=5, n=2)
    model = fit(data, h)
    for q in rng.normal(size=(6, 3)):
        mean, var = model.predict_mean(q), model.predict_var(q)
        for d in range(2):
            m_ref, v_ref = _dense_oracle(data.inputs, data.targets[:, d], h, q)
            assert mean[d] == pytest.approx(m_ref, rel=1e-10, abs=1e-14)
            assert var[d] == pytest.approx(v_ref, rel=1e-10, abs=1e-14)


def test_far_query_reverts_to_prior(rng):
    data, h = _problem(rng)
    model = fit(data, h)
    q = np.full(3, 1e3)
    np.testing.assert_allclose(model.predict_mean(q), 0.0, atol=1e-300)
    np.testing.assert_allclose(model.predict_var(q), h.sigma_s**2, rtol=1e-15)
    gv = model.predict_grad_var(q)
    for d in range(2):
        np.testing.assert_allclose(gv[d], h.sigma_s**2 * np.diag(h.m_diag), rtol=1e-15)


def test_duplicate_rows_fit_with_noise():
    X = np.array([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
    model = fit(GpDataset(X, [[1.0], [1.1], [0.9]]), GpHyperparams(1.0, 0.1, [1.0, 1.0]))
    assert model.jitter == (0.0,)
    assert np.isfinite(model.predict_mean(X[0])).all()


def test_jitter_only_when_needed():
    X = np.zeros((4, 1))
    h = GpHyperparams(1.0, 1e-9, [1.0])  # numerically singular: rank one plus 1e-18
    model = fit(GpDataset(X, np.ones((4, 1))), h)
    assert 0 < model.jitter[0] <= 1e-6


def test_conditioning_error_reports_dimension():
    from gtddp.gp import _factorize

    K = -np.eye(3)  # indefinite beyond any jitter
    with pytest.raises(ConditioningError) as exc:
        _factorize(K, 1.0, dim=4)
    assert exc.value.dim == 4


@given(st.integers(0, 2**32 - 1))
def test_variance_bounded_by_prior(seed):
    rng = np.random.default_rng(seed)
    data, h = _problem(rng, N=6, D=2, n=1)
    model = fit(data, h)
    v = model.predict_var(rng.normal(size=(10, 2)) * 2)
    assert np.all(v >= 0) and np.all(v <= h.sigma_s**2 * (1 + 1e-12))


def test_mean_var_fast_path_agrees(rng):
    data, _ = _problem(rng, N=12, D=4, n=3)
    hyper = [GpHyperparams(rng.uniform(0.5, 2), 0.1, rng.uniform(0.2, 2, 4)) for _ in range(3)]
    model = fit(data, hyper)
    Q = rng.normal(size=(7, 4))
    mean, var = model.predict_mean_var(Q)
    np.testing.assert_allclose(mean, model.predict_mean(Q), rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(var, model.predict_var(Q), rtol=1e-8, atol=1e-13)
    m1, v1 = model.predict_mean_var(Q[0])
    assert m1.shape == (3,) and v1.shape == (3,)


def test_query_shape_checked(rng):
    data, h = _problem(rng)
    with pytest.raises(ShapeError):
        fit(data, h).predict_mean(np.zeros(5))


# ------------------------------------------------------------- derivatives

def _fd(f, q, eps=1e-5):
    cols = []
    for k in range(q.size):
        e = np.zeros_like(q)
        e[k] = eps
        cols.append((f(q + e) - f(q - e)) / (2 * eps))
    return np.stack(cols, axis=-1)


def test_grad_mean_matches_finite_differences(rng):
    data, h = _problem(rng, N=10, D=3, n=2)
    model = fit(data, h)
    for q in rng.normal(size=(5, 3)):
        np.testing.assert_allclose(model.predict_grad_mean(q), _fd(model.predict_mean, q), rtol=1e-5, atol=1e-8)


def test_grad_var_of_variance_matches_finite_differences(rng):
    data, h = _problem(rng, N=10, D=3, n=2)
    model = fit(data, h)
    for q in rng.normal(size=(5, 3)):
        np.testing.assert_allclose(model.predict_var_grad(q), _fd(model.predict_var, q), rtol=1e-5, atol=1e-8)


def test_zero_length_scale_weights_give_zero_gradient(rng):
    data, _ = _problem(rng)
    h = GpHyperparams(1.0, 0.1, np.full(3, 1e-300))
    np.testing.assert_allclose(fit(data, h).predict_grad_mean(rng.normal(size=3)), 0.0, atol=1e-250)


def test_gradient_covariance_dense_oracle(rng):
    data, h = _problem(rng, N=3, D=2, n=1)
    model = fit(data, h)
    q = rng.normal(size=2)
    X = data.inputs
    K = kernel_matrix(X, X, h) + h.sigma_w**2 * np.eye(3)
    J = np.array([kernel(q, x, h) * h.m_diag * (x - q) for x in X])  # dk/dq, (N, D)
    ref = h.sigma_s**2 * np.diag(h.m_diag) - J.T @ np.linalg.solve(K, J)
    S = model.predict_grad_var(q)[0]
    np.testing.assert_allclose(S, ref, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(S, S.T, atol=1e-12)


def test_lml_gradient_matches_finite_differences(rng):
    data, h = _problem(rng, N=15, D=3, n=1)
    X, y = data.inputs, data.targets[:, 0]
    _, g = _lml_and_grad(X, y, h)
    th = h.to_log()
    fd = _fd(lambda t: np.array(_lml_and_grad(X, y, GpHyperparams.from_log(t))[0]), th)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_lml_permutation_invariant(rng):
    data, h = _problem(rng, N=9, n=1)
    perm = rng.permutation(9)
    a, _ = _lml_and_grad(data.inputs, data.targets[:, 0], h)
    b, _ = _lml_and_grad(data.inputs[perm], data.targets[perm, 0], h)
    assert a == pytest.approx(b, rel=1e-12)


# ------------------------------------------------------------- optimization

def _gp_sample(rng, N, D, h):
    X = rng.uniform(-2, 2, size=(N, D))
    K = kernel_matrix(X, X, h) + 1e-10 * np.eye(N)
    f = np.linalg.cholesky(K) @ rng.normal(size=N)
    return X, f + h.sigma_w * rng.normal(size=N)


def test_ascent_is_monotone_and_stationary(rng):
    truth = GpHyperparams(1.0, 0.1, np.ones(2))
    X, y = _gp_sample(rng, 60, 2, truth)
    cfg = OptimizerConfig(tol=1e-5, max_iters=300)
    h, trace = optimize_dimension(X, y, GpHyperparams(0.5, 0.5, [0.5, 0.5]), cfg)
    assert trace.converged
    assert np.all(np.diff(trace.values) > 0)
    _, g = _lml_and_grad(X, y, h)
    assert np.abs(g).max() <= cfg.tol


def test_recovers_generating_hyperparameters():
    rng = np.random.default_rng(7)
    truth = GpHyperparams(1.0, 0.1, np.ones(2))
    X, y = _gp_sample(rng, 200, 2, truth)
    h = optimize_hyperparams(GpDataset(X, y[:, None]), GpHyperparams(0.5, 0.5, [0.5, 0.5]))[0]
    assert 1 / 1.5 <= h.sigma_s / truth.sigma_s <= 1.5
    assert 1 / 1.5 <= h.sigma_w / truth.sigma_w <= 1.5


def test_noise_test_rejects_pure_noise(rng):
    X = rng.normal(size=(80, 3))
    y = 0.3 * rng.normal(size=80)
    data = GpDataset(X, y[:, None])
    h = optimize_hyperparams(data, default_hyperparams(data))[0]
    quiet = noise_only(y, h.m_diag)
    assert h.sigma_s == quiet.sigma_s and h.sigma_w == quiet.sigma_w


def test_noise_test_keeps_real_structure(rng):
    X = rng.uniform(-2, 2, size=(80, 1))
    y = np.sin(2 * X[:, 0]) + 0.01 * rng.normal(size=80)
    data = GpDataset(X, y[:, None])
    h = optimize_hyperparams(data, default_hyperparams(data))[0]
    assert h.sigma_s > 0.3 and h.sigma_w < 0.05


def test_noise_only_is_stationary(rng):
    """The quiet model sits at a stationary point in sigma_w (and nearly so overall)."""
    X = rng.normal(size=(30, 2))
    y = rng.normal(size=30)
    _, g = _lml_and_grad(X, y, noise_only(y, np.ones(2)))
    assert abs(g[1]) < 1e-9


# ------------------------------------------------------------------ dataset

def test_dataset_validation():
    with pytest.raises(ShapeError):
        GpDataset(np.zeros((3, 2)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        GpDataset([[np.nan, 0.0]], [[0.0]])
    with pytest.raises(InsufficientDataError):
        GpDataset.concatenate([])


@given(st.integers(1, 500), st.integers(1, 80))
def test_subsample_cap(N, n_max):
    data = GpDataset(np.arange(N, dtype=float)[:, None], np.zeros((N, 1)))
    sub = data.subsample(n_max)
    assert len(sub) <= n_max
    assert sub.inputs[0, 0] == 0.0
    if N <= n_max:
        assert sub is data
