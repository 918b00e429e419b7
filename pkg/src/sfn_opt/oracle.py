"""Objective oracles: deterministic analytic test functions and finite sums.

An oracle exposes value, gradient, Hessian-vector and Hessian-matrix
products. Finite-sum oracles additionally take an index array selecting the
samples to average over; ``idx=None`` means the full data set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels as K


class OracleError(ValueError):
    """Invalid input handed to an oracle (bad shape, bad index, ...)."""


@dataclass(frozen=True)
class BatchSpec:
    """Sample indices for the gradient batch and the Hessian batch."""

    grad_indices: np.ndarray
    hess_indices: np.ndarray

    def __post_init__(self):
        if len(self.grad_indices) == 0 or len(self.hess_indices) == 0:
            raise OracleError("batch index sets must be non-empty")

    @classmethod
    def full(cls, oracle):
        idx = np.arange(oracle.n_samples)
        return cls(idx, idx)


def as_point(w, dim):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != dim:
        raise OracleError(f"expected a point of length {dim}, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise OracleError("point has non-finite entries")
    return w


class ObjectiveOracle:
    """Base class. Subclasses implement ``_value``, ``_gradient``, ``_hess_mat``.

    Attributes
    ----------
    dim : int
        Number of optimization parameters.
    n_samples : int
        Size of the data set; 1 for deterministic problems.
    has_dense_hessian : bool
        Whether forming the dense d x d Hessian is considered affordable.
    """

    name = "oracle"
    n_samples = 1

    def __init__(self, dim):
        if dim < 1:
            raise OracleError("dimension must be positive")
        self.dim = int(dim)
        self.has_dense_hessian = self.dim <= 2000

    @property
    def stochastic(self):
        return self.n_samples > 1

    def _indices(self, idx):
        if idx is None:
            return np.arange(self.n_samples)
        idx = np.asarray(idx, dtype=np.int64).ravel()
        if idx.size == 0:
            raise OracleError("empty index set")
        if idx.min() < 0 or idx.max() >= self.n_samples:
            raise OracleError(f"sample index out of range [0, {self.n_samples})")
        return idx

    # public API -----------------------------------------------------------

    def value(self, w, idx=None):
        return float(self._value(as_point(w, self.dim), self._indices(idx)))

    def gradient(self, w, idx=None):
        return self._gradient(as_point(w, self.dim), self._indices(idx))

    def hess_vec(self, w, v, idx=None):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise OracleError(f"direction must have shape ({self.dim},), got {v.shape}")
        return self.hess_mat(w, v[:, None], idx)[:, 0]

    def hess_mat(self, w, V, idx=None):
        V = np.asarray(V, dtype=np.float64)
        if V.ndim != 2 or V.shape[0] != self.dim or V.shape[1] < 1:
            raise OracleError(f"block must have shape ({self.dim}, r>=1), got {V.shape}")
        return self._hess_mat(as_point(w, self.dim), V, self._indices(idx))

    def hessian(self, w, idx=None):
        """Dense Hessian, assembled from a Hessian-matrix product with I."""
        if not self.has_dense_hessian:
            raise OracleError(f"dense Hessian disabled for d={self.dim}")
        H = self.hess_mat(w, np.eye(self.dim), idx)
        return 0.5 * (H + H.T)

    def _hess_mat(self, w, V, idx):
        raise NotImplementedError

    def config(self):
        return {"problem": self.name, "d": self.dim}


# ---------------------------------------------------------------------------
# deterministic problems
# ---------------------------------------------------------------------------


class Michalewicz(ObjectiveOracle):
    """``F(w) = -sum_j sin(w_j) sin^20(j w_j^2 / pi)``; separable, diagonal Hessian."""

    name = "michalewicz"

    def _value(self, w, idx):
        return K.michalewicz_value(w)

    def _gradient(self, w, idx):
        return K.michalewicz_grad(w)

    def hess_diag(self, w):
        return K.michalewicz_hess_diag(as_point(w, self.dim))

    def _hess_mat(self, w, V, idx):
        return K.michalewicz_hess_diag(w)[:, None] * V


class Rosenbrock(ObjectiveOracle):
    """Chained Rosenbrock function, minimized at the all-ones vector."""

    name = "rosenbrock"

    def __init__(self, dim):
        if dim < 2:
            raise OracleError("Rosenbrock needs d >= 2")
        super().__init__(dim)

    def _value(self, w, idx):
        return K.rosenbrock_value(w)

    def _gradient(self, w, idx):
        return K.rosenbrock_grad(w)

    def _hess_mat(self, w, V, idx):
        return K.rosenbrock_hessmat(w, np.ascontiguousarray(V))


class Quadratic(ObjectiveOracle):
    """``F(w) = 1/2 w^T A w - b^T w``."""

    name = "quadratic"

    def __init__(self, A, b=None):
        A = np.asarray(A, dtype=np.float64)
        super().__init__(A.shape[0])
        self.A = 0.5 * (A + A.T)
        self.b = np.zeros(self.dim) if b is None else np.asarray(b, dtype=np.float64)

    def _value(self, w, idx):
        return 0.5 * w @ self.A @ w - self.b @ w

    def _gradient(self, w, idx):
        return self.A @ w - self.b

    def _hess_mat(self, w, V, idx):
        return self.A @ V

    def hessian(self, w, idx=None):
        as_point(w, self.dim)
        return self.A.copy()


def fd_step(w):
    return np.sqrt(np.finfo(np.float64).eps) * (1.0 + np.linalg.norm(w))


class FunctionOracle(ObjectiveOracle):
    """Wraps user callables. Missing HVPs fall back to central differences
    of the gradient."""

    name = "function"

    def __init__(self, dim, value_fn, grad_fn, hvp_fn=None):
        super().__init__(dim)
        self._f = value_fn
        self._g = grad_fn
        self._hvp = hvp_fn

    def _value(self, w, idx):
        return self._f(w)

    def _gradient(self, w, idx):
        return np.asarray(self._g(w), dtype=np.float64)

    def _hess_mat(self, w, V, idx):
        out = np.empty_like(V)
        for i in range(V.shape[1]):
            v = V[:, i]
            if self._hvp is not None:
                out[:, i] = self._hvp(w, v)
                continue
            nv = np.linalg.norm(v)
            if nv == 0.0:
                out[:, i] = 0.0
                continue
            eps = fd_step(w) / nv
            out[:, i] = (self._g(w + eps * v) - self._g(w - eps * v)) / (2.0 * eps)
        return out


# ---------------------------------------------------------------------------
# finite-sum problems
# ---------------------------------------------------------------------------


class FiniteSumOracle(ObjectiveOracle):
    """Common machinery for ``F(w) = 1/n sum_i l_i(w)``."""

    def per_sample_gradients(self, w, idx=None):
        raise NotImplementedError

    def per_sample_hessians(self, w, idx=None):
        """Stack of dense per-sample Hessians, shape (len(idx), d, d)."""
        raise NotImplementedError


class FiniteSumProblem(FiniteSumOracle):
    """Seeded nonconvex finite-sum surrogate.

    ``l_i(w) = 1/2 ||A_i w - b_i||^2 + reg/4 (||w||^2 - 1)^2`` with
    ``A_i = A0 + noise * G_i`` and ``b_i = b0 + noise * h_i``. The shared
    double-well term makes the landscape indefinite near the origin once
    ``reg`` exceeds the smallest eigenvalue of ``A0^T A0``.
    """

    name = "finite-sum"

    def __init__(self, d, n, noise=0.1, seed=0, rows=None, reg=0.5):
        if d < 1 or n < 1:
            raise OracleError("finite-sum problem needs d, n >= 1")
        super().__init__(d)
        self.n_samples = int(n)
        self.noise = float(noise)
        self.seed = int(seed)
        self.rows = int(rows) if rows is not None else int(d)
        self.reg = float(reg)
        rng = np.random.default_rng(self.seed)
        A0 = rng.standard_normal((self.rows, d)) / np.sqrt(self.rows)
        b0 = rng.standard_normal(self.rows)
        G = rng.standard_normal((self.n_samples, self.rows, d)) / np.sqrt(self.rows)
        h = rng.standard_normal((self.n_samples, self.rows))
        self.A = np.ascontiguousarray(A0[None] + self.noise * G)
        self.b = np.ascontiguousarray(b0[None] + self.noise * h)

    def _reg_value(self, w):
        s = w @ w - 1.0
        return 0.25 * self.reg * s * s

    def _reg_grad(self, w):
        return self.reg * (w @ w - 1.0) * w

    def _reg_hess(self, w):
        return self.reg * ((w @ w - 1.0) * np.eye(self.dim) + 2.0 * np.outer(w, w))

    def _value(self, w, idx):
        resid = np.einsum("nmd,d->nm", self.A[idx], w) - self.b[idx]
        return 0.5 * np.mean(np.sum(resid * resid, axis=1)) + self._reg_value(w)

    def _gradient(self, w, idx):
        return K.finite_sum_grad(self.A, self.b, idx, w) + self._reg_grad(w)

    def _hess_mat(self, w, V, idx):
        HV = K.finite_sum_hessmat(self.A, idx, np.ascontiguousarray(V))
        return HV + self.reg * ((w @ w - 1.0) * V + 2.0 * np.outer(w, w @ V))

    def per_sample_gradients(self, w, idx=None):
        w = as_point(w, self.dim)
        idx = self._indices(idx)
        return K.finite_sum_per_sample_grads(self.A, self.b, idx, w) + self._reg_grad(w)

    def per_sample_hessians(self, w, idx=None):
        w = as_point(w, self.dim)
        idx = self._indices(idx)
        Ai = self.A[idx]
        return np.einsum("nmd,nmk->ndk", Ai, Ai) + self._reg_hess(w)[None]

    def config(self):
        return {
            "problem": self.name,
            "d": self.dim,
            "n": self.n_samples,
            "noise": self.noise,
            "seed": self.seed,
            "rows": self.rows,
            "reg": self.reg,
        }

    def to_json(self):
        return json.dumps(self.config(), sort_keys=True)

    @classmethod
    def from_config(cls, cfg):
        if isinstance(cfg, str):
            cfg = json.loads(cfg)
        return cls(
            int(cfg["d"]),
            int(cfg["n"]),
            noise=float(cfg.get("noise", 0.1)),
            seed=int(cfg.get("seed", 0)),
            rows=cfg.get("rows"),
            reg=float(cfg.get("reg", 0.5)),
        )


class StochasticQuadratic(FiniteSumOracle):
    """``l_i(w) = 1/2 w^T H_i w - b_i^T w`` around a prescribed mean Hessian.

    ``H_i = H + hess_noise * S_i`` with ``S_i`` symmetric Gaussian (scaled to
    unit expected spectral size per sqrt(d)), ``b_i = b + grad_noise * z_i``.
    The per-sample perturbations are centred over the data set so the full
    objective has exactly the mean Hessian ``H`` passed in.
    """

    name = "stochastic-quadratic"

    def __init__(self, H, n, grad_noise=1.0, hess_noise=0.0, seed=0, b=None):
        H = np.asarray(H, dtype=np.float64)
        super().__init__(H.shape[0])
        d = self.dim
        self.n_samples = int(n)
        self.grad_noise = float(grad_noise)
        self.hess_noise = float(hess_noise)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.H = 0.5 * (H + H.T)
        self.b_mean = rng.standard_normal(d) if b is None else np.asarray(b, dtype=np.float64)
        z = rng.standard_normal((n, d))
        z -= z.mean(axis=0)
        S = rng.standard_normal((n, d, d))
        S = 0.5 * (S + S.transpose(0, 2, 1)) / np.sqrt(d)
        S -= S.mean(axis=0)
        self.bs = self.b_mean[None] + self.grad_noise * z
        self.Hs = self.H[None] + self.hess_noise * S

    @classmethod
    def with_spectrum(cls, eigenvalues, n, seed=0, **kw):
        eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
        rng = np.random.default_rng(seed + 7919)
        Q, _ = np.linalg.qr(rng.standard_normal((eigenvalues.size, eigenvalues.size)))
        return cls((Q * eigenvalues) @ Q.T, n, seed=seed, **kw)

    def minimizer(self):
        return np.linalg.solve(self.H, self.b_mean)

    def _value(self, w, idx):
        Hb = self.Hs[idx].mean(axis=0)
        return 0.5 * w @ Hb @ w - self.bs[idx].mean(axis=0) @ w

    def _gradient(self, w, idx):
        return self.Hs[idx].mean(axis=0) @ w - self.bs[idx].mean(axis=0)

    def _hess_mat(self, w, V, idx):
        return self.Hs[idx].mean(axis=0) @ V

    def hessian(self, w, idx=None):
        as_point(w, self.dim)
        return self.Hs[self._indices(idx)].mean(axis=0)

    def per_sample_gradients(self, w, idx=None):
        w = as_point(w, self.dim)
        idx = self._indices(idx)
        return self.Hs[idx] @ w - self.bs[idx]

    def per_sample_hessians(self, w, idx=None):
        as_point(w, self.dim)
        return self.Hs[self._indices(idx)].copy()

    def config(self):
        return {
            "problem": self.name,
            "d": self.dim,
            "n": self.n_samples,
            "grad_noise": self.grad_noise,
            "hess_noise": self.hess_noise,
            "seed": self.seed,
        }


def make_finite_sum_problem(d, n, noise=0.1, seed=0, **kw):
    return FiniteSumProblem(d, n, noise=noise, seed=seed, **kw)


PROBLEMS = ("michalewicz", "rosenbrock", "finite-sum", "stochastic-quadratic")


def make_problem(name, d, **params):
    """Build a built-in problem by name."""
    if name == "michalewicz":
        return Michalewicz(d)
    if name == "rosenbrock":
        return Rosenbrock(d)
    if name == "finite-sum":
        return FiniteSumProblem(d, params.pop("n", 50), **params)
    if name == "stochastic-quadratic":
        n = params.pop("n", 200)
        cond = float(params.pop("cond", 10.0))
        spectrum = np.geomspace(1.0, 1.0 / cond, d)
        return StochasticQuadratic.with_spectrum(spectrum, n, **params)
    raise OracleError(f"unknown problem {name!r}; choose from {', '.join(PROBLEMS)}")
