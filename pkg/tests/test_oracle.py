import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfn_opt import _kernels as K
from sfn_opt.oracle import (
    BatchSpec,
    FiniteSumProblem,
    FunctionOracle,
    Michalewicz,
    OracleError,
    Quadratic,
    Rosenbrock,
    StochasticQuadratic,
    make_problem,
)


def fd_grad(f, w, h=1e-6):
    g = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def fd_hess(grad, w, h=1e-6):
    d = w.size
    H = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        H[:, i] = (grad(w + e) - grad(w - e)) / (2 * h)
    return H


@pytest.fixture(params=["michalewicz", "rosenbrock", "finite-sum"])
def problem(request):
    return make_problem(request.param, 6)


def test_gradient_matches_finite_differences(problem):
    w = np.random.default_rng(1).uniform(0.5, 1.5, problem.dim)
    np.testing.assert_allclose(problem.gradient(w), fd_grad(problem.value, w), rtol=1e-5, atol=1e-6)


def test_hessian_matches_finite_differences(problem):
    w = np.random.default_rng(2).uniform(0.5, 1.5, problem.dim)
    np.testing.assert_allclose(problem.hessian(w), fd_hess(problem.gradient, w), rtol=1e-4, atol=1e-5)


def test_hess_mat_is_symmetric_and_matches_hess_vec(problem):
    rng = np.random.default_rng(3)
    w = rng.standard_normal(problem.dim)
    V = rng.standard_normal((problem.dim, 3))
    HV = problem.hess_mat(w, V)
    np.testing.assert_allclose(HV[:, 1], problem.hess_vec(w, V[:, 1]), rtol=1e-12, atol=1e-12)
    H = problem.hessian(w)
    np.testing.assert_allclose(H, H.T, atol=1e-10)


def test_rosenbrock_minimum_and_known_values():
    r = Rosenbrock(4)
    assert r.value(np.ones(4)) == 0.0
    np.testing.assert_array_equal(r.gradient(np.ones(4)), np.zeros(4))
    assert r.value(np.zeros(4)) == pytest.approx(3.0)
    np.testing.assert_allclose(r.gradient(np.zeros(4)), [-2.0, -2.0, -2.0, 0.0])


def test_rosenbrock_hessian_is_tridiagonal():
    H = Rosenbrock(6).hessian(np.linspace(-1, 1, 6))
    assert np.all(np.triu(H, 2) == 0) and np.all(np.tril(H, -2) == 0)


def test_michalewicz_known_value():
    # -sin(pi/2) * sin(pi/4)^20 = -2^-10
    w = np.array([np.pi / 2])
    assert Michalewicz(1).value(w) == pytest.approx(-(2.0**-10))


def test_michalewicz_hessian_is_diagonal():
    m = Michalewicz(5)
    w = np.linspace(1.0, 2.5, 5)
    H = m.hessian(w)
    np.testing.assert_allclose(H, np.diag(m.hess_diag(w)), atol=0)


def test_quadratic_oracle():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    q = Quadratic(A, np.array([1.0, -1.0]))
    w = np.array([0.3, -0.7])
    np.testing.assert_allclose(q.gradient(w), A @ w - [1.0, -1.0])
    np.testing.assert_allclose(q.hessian(w), A)


def test_function_oracle_fd_hvp_fallback():
    A = np.diag([1.0, 4.0, 9.0])
    f = FunctionOracle(3, lambda w: 0.5 * w @ A @ w + np.sum(w**4), lambda w: A @ w + 4 * w**3)
    w = np.array([0.1, -0.4, 0.7])
    np.testing.assert_allclose(f.hessian(w), A + np.diag(12 * w**2), rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("bad", [np.ones(3), np.array([1.0, np.nan, 0, 0, 0, 0])])
def test_point_validation(bad):
    with pytest.raises(OracleError):
        Rosenbrock(6).gradient(bad)


def test_deterministic_oracle_rejects_indices():
    with pytest.raises(OracleError):
        Rosenbrock(3).gradient(np.zeros(3), np.array([1]))


def test_batch_indices_validated():
    p = FiniteSumProblem(3, 10)
    with pytest.raises(OracleError):
        p.gradient(np.zeros(3), np.array([10]))
    with pytest.raises(OracleError):
        BatchSpec(np.array([], dtype=int), np.array([0]))


def test_full_batch_equals_default():
    p = FiniteSumProblem(4, 20, seed=5)
    w = np.random.default_rng(0).standard_normal(4)
    np.testing.assert_allclose(p.gradient(w, np.arange(20)), p.gradient(w))
    np.testing.assert_allclose(p.hessian(w, np.arange(20)), p.hessian(w))


def test_per_sample_quantities_average_to_full():
    p = FiniteSumProblem(5, 30, noise=0.4, seed=2)
    w = np.random.default_rng(4).standard_normal(5)
    np.testing.assert_allclose(p.per_sample_gradients(w).mean(axis=0), p.gradient(w), atol=1e-12)
    np.testing.assert_allclose(p.per_sample_hessians(w).mean(axis=0), p.hessian(w), atol=1e-12)


def test_batch_gradient_is_unbiased():
    p = FiniteSumProblem(4, 12, noise=0.5, seed=1)
    w = np.ones(4)
    # every 3-subset equally likely: the average over all of them is exact
    from itertools import combinations

    avg = np.mean([p.gradient(w, np.array(c)) for c in combinations(range(12), 3)], axis=0)
    np.testing.assert_allclose(avg, p.gradient(w), atol=1e-12)


def test_finite_sum_config_round_trip():
    p = FiniteSumProblem(4, 9, noise=0.2, seed=3)
    q = FiniteSumProblem.from_config(p.to_json())
    assert json.loads(q.to_json()) == json.loads(p.to_json())
    np.testing.assert_array_equal(p.A, q.A)


def test_stochastic_quadratic_mean_hessian_and_minimizer():
    eig = np.array([4.0, 2.0, 1.0])
    q = StochasticQuadratic.with_spectrum(eig, 40, seed=0, hess_noise=0.3)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(q.hessian(np.zeros(3)))), np.sort(eig), atol=1e-12)
    np.testing.assert_allclose(q.gradient(q.minimizer()), 0, atol=1e-12)


def test_unknown_problem():
    with pytest.raises(OracleError, match="unknown problem"):
        make_problem("himmelblau", 2)


# --- numba / numpy agreement ----------------------------------------------

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


@needs_numba
@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_analytic_kernels_agree(d, seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(-3, 3, d)
    V = rng.standard_normal((d, 3))
    for name in ("michalewicz_value", "michalewicz_grad", "michalewicz_hess_diag", "rosenbrock_value", "rosenbrock_grad"):
        np.testing.assert_allclose(K.NUMBA_KERNELS[name](w), K.NUMPY_KERNELS[name](w), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(K.NUMBA_KERNELS["rosenbrock_hessmat"](w, V), K.NUMPY_KERNELS["rosenbrock_hessmat"](w, V),
                               rtol=1e-10, atol=1e-9)


@needs_numba
def test_finite_sum_kernels_agree():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((15, 4, 6))
    b = rng.standard_normal((15, 4))
    idx = np.array([0, 3, 7, 14])
    w = rng.standard_normal(6)
    V = rng.standard_normal((6, 2))
    for name, args in [
        ("finite_sum_grad", (A, b, idx, w)),
        ("finite_sum_per_sample_grads", (A, b, idx, w)),
        ("finite_sum_hessmat", (A, idx, V)),
    ]:
        np.testing.assert_allclose(K.NUMBA_KERNELS[name](*args), K.NUMPY_KERNELS[name](*args), rtol=1e-12, atol=1e-12)


def test_backend_flag(monkeypatch):
    import importlib

    monkeypatch.setenv("SFN_OPT_DISABLE_NUMBA", "1")
    mod = importlib.reload(K)
    try:
        assert mod.BACKEND == "numpy" and not mod.USE_NUMBA
        assert mod.michalewicz_grad is mod.NUMPY_KERNELS["michalewicz_grad"]
    finally:
        monkeypatch.delenv("SFN_OPT_DISABLE_NUMBA")
        importlib.reload(K)
