"""Randomized low-rank eigendecomposition of symmetric operators.

Operators are callables ``op(V) -> H @ V`` acting on d x k blocks, so a
Hessian only needs to be available through Hessian-matrix products.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class LowRankEig:
    """Eigenpairs ``H ~= U diag(lambdas) U^T`` sorted by descending ``|lambda|``."""

    U: np.ndarray
    lambdas: np.ndarray
    tolerance_met: bool = True
    columns_used: int = 0

    @property
    def rank(self):
        return int(self.lambdas.shape[0])

    @property
    def dim(self):
        return int(self.U.shape[0])

    @classmethod
    def empty(cls, d):
        return cls(np.zeros((d, 0)), np.zeros(0))

    @classmethod
    def from_dense(cls, H, r=None):
        """Exact eigendecomposition of a dense symmetric matrix, truncated to r."""
        lam, V = np.linalg.eigh(0.5 * (H + H.T))
        order = np.argsort(-np.abs(lam), kind="stable")
        if r is not None:
            order = order[:r]
        return cls(V[:, order], lam[order])

    def truncate(self, r):
        return LowRankEig(self.U[:, :r], self.lambdas[:r], self.tolerance_met, self.columns_used)

    def matvec(self, v):
        return self.U @ (self.lambdas * (self.U.T @ v))

    def dense(self):
        return (self.U * self.lambdas) @ self.U.T

    def to_dict(self, include_vectors=False):
        out = {"d": self.dim, "r": self.rank, "lambdas": self.lambdas.tolist()}
        if include_vectors:
            out["U"] = self.U.tolist()
        return out

    def to_json(self, include_vectors=False):
        return json.dumps(self.to_dict(include_vectors))

    @classmethod
    def from_dict(cls, data):
        lam = np.asarray(data["lambdas"], dtype=np.float64)
        if "U" in data:
            U = np.asarray(data["U"], dtype=np.float64).reshape(int(data["d"]), lam.size)
        else:
            U = np.full((int(data["d"]), lam.size), np.nan)
        return cls(U, lam)

    def save_npz(self, path):
        np.savez(path, U=self.U, lambdas=self.lambdas)

    @classmethod
    def load_npz(cls, path):
        with np.load(path) as z:
            return cls(z["U"], z["lambdas"])


@dataclass
class RangeFinderConfig:
    rank: int
    oversample: int = 10
    power_iters: int = 0
    seed: int | None = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.oversample < 0 or self.power_iters < 0:
            raise ValueError("oversample and power_iters must be >= 0")

    def width(self, d):
        if self.rank > d:
            raise ValueError(f"rank {self.rank} exceeds dimension {d}")
        return self.rank + min(self.oversample, d - self.rank)


def _as_operator(op):
    if callable(op):
        return op
    M = np.asarray(op, dtype=np.float64)
    return lambda V: M @ V


def orthonormalize(Y, drop_tol=1e-12):
    """Orthonormal basis of range(Y) via Householder QR.

    Columns whose R-diagonal falls below ``drop_tol`` times the largest one
    are numerically dependent on earlier columns and are dropped, so the
    result may be narrower than ``Y``.
    """
    if Y.shape[1] == 0:
        return Y.copy()
    Q, R = np.linalg.qr(Y)
    diag = np.abs(np.diag(R))
    top = diag.max(initial=0.0)
    if top == 0.0:
        return Q[:, :0]
    return Q[:, diag > drop_tol * top]


def randomized_range(op, d, cfg, rng=None):
    """Orthonormal Q whose span approximates the dominant range of ``op``.

    Returns ``(Q, columns_used)``. ``columns_used`` counts the operator
    columns consumed by the sketch and power iterations.
    """
    op = _as_operator(op)
    k = cfg.width(d)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    Omega = rng.standard_normal((d, k))
    Q = orthonormalize(op(Omega))
    used = k
    for _ in range(cfg.power_iters):
        Q = orthonormalize(op(_pad(Q, k, rng)))
        used += k
    return Q, used


def _pad(Q, k, rng):
    # keep block width fixed so the cost model holds even after column drops
    if Q.shape[1] >= k:
        return Q
    extra = rng.standard_normal((Q.shape[0], k - Q.shape[1]))
    return np.hstack([Q, extra])


def eig_from_range(op, Q, rank=None):
    """Rayleigh-Ritz on span(Q): eigendecompose ``T = Q^T H Q`` and lift."""
    op = _as_operator(op)
    if Q.shape[1] == 0:
        return LowRankEig.empty(Q.shape[0])
    T = Q.T @ op(Q)
    T = 0.5 * (T + T.T)
    lam, V = np.linalg.eigh(T)
    order = np.argsort(-np.abs(lam), kind="stable")
    if rank is not None:
        order = order[:rank]
    return LowRankEig(Q @ V[:, order], lam[order], columns_used=Q.shape[1])


def randomized_eigh(op, d, cfg, rng=None):
    """Double-pass randomized eigendecomposition truncated to ``cfg.rank``."""
    Q, used = randomized_range(op, d, cfg, rng)
    eig = eig_from_range(op, Q, cfg.rank)
    eig.columns_used = used + Q.shape[1]
    return eig


def lowrank_residual_norm(op, eig, probes=4, seed=0, iters=30):
    """Estimate ``||H - U diag(lambdas) U^T||_2`` by block power iteration."""
    op = _as_operator(op)
    rng = np.random.default_rng(seed)

    def resid(V):
        return op(V) - eig.U @ (eig.lambdas[:, None] * (eig.U.T @ V))

    X, _ = np.linalg.qr(rng.standard_normal((eig.dim, max(1, probes))))
    for _ in range(iters):
        Y = resid(X)
        if not np.any(Y):
            return 0.0
        X, _ = np.linalg.qr(Y)
    T = X.T @ resid(X)
    return float(np.abs(np.linalg.eigvalsh(0.5 * (T + T.T))).max())


def adaptive_rank(op, d, tol, block=5, max_rank=None, seed=0, probes=4):
    """Grow the range in blocks until the residual drops below ``tol * ||H||``.

    Eigenpairs with ``|lambda| <= tol * ||H||`` are discarded from the result.
    The returned eig has ``tolerance_met=False`` when ``max_rank`` is reached
    first.
    """
    if tol <= 0 or block < 1:
        raise ValueError("tol must be > 0 and block >= 1")
    op = _as_operator(op)
    max_rank = d if max_rank is None else min(max_rank, d)
    rng = np.random.default_rng(seed)
    Q = np.zeros((d, 0))
    HQ = np.zeros((d, 0))
    used = 0
    norm_est = 0.0
    while True:
        width = min(block, max_rank - Q.shape[1])
        Y = op(rng.standard_normal((d, width)))
        used += width
        norm_est = max(norm_est, np.linalg.norm(Y, axis=0).max() / np.sqrt(d))
        for _ in range(2):
            Y = Y - Q @ (Q.T @ Y)
        Qn = orthonormalize(Y)
        if Qn.shape[1]:
            Q = np.hstack([Q, Qn])
            HQ = np.hstack([HQ, op(Qn)])
            used += Qn.shape[1]
        T = Q.T @ HQ
        lam, V = np.linalg.eigh(0.5 * (T + T.T))
        order = np.argsort(-np.abs(lam), kind="stable")
        eig = LowRankEig(Q @ V[:, order], lam[order], columns_used=used)
        scale = max(abs(lam).max(initial=0.0), norm_est)
        if scale == 0.0:
            return LowRankEig.empty(d)
        res = lowrank_residual_norm(op, eig, probes=probes, seed=int(rng.integers(2**31)))
        done = res <= tol * scale
        if done or Q.shape[1] >= max_rank or Qn.shape[1] == 0:
            keep = max(1, int(np.sum(np.abs(eig.lambdas) > tol * scale)))
            eig = eig.truncate(keep)
            eig.tolerance_met = bool(done)
            return eig
