"""Optimizers sharing the update ``w <- w + alpha * p``.

Methods: gradient descent (``gd``), curvature-scaled GD (``csgd``), dense
Newton (``newton``), full saddle-free Newton (``full_sfn``) and low-rank
saddle-free Newton (``lrsfn``). On finite-sum oracles the gradient and the
Hessian are subsampled with independently drawn batches every iteration.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .randeig import LowRankEig, RangeFinderConfig, randomized_eigh

METHODS = ("gd", "csgd", "newton", "full_sfn", "lrsfn")
DENSE_LIMIT = 2000
DIVERGENCE_LOSS = 1e12


class OptimizerError(RuntimeError):
    """A direction could not be computed (singular Hessian, bad config, ...)."""


# ---------------------------------------------------------------------------
# search directions
# ---------------------------------------------------------------------------


def direction_gd(g):
    return -np.asarray(g, dtype=np.float64)


def direction_csgd(g, lambda1_abs):
    """Gradient direction plus the curvature-scaled step ``1/|lambda_1|``."""
    if not lambda1_abs > 1e-12:
        raise OptimizerError("curvature vanishes: |lambda_1| below 1e-12")
    return -np.asarray(g, dtype=np.float64), 1.0 / lambda1_abs


def direction_newton(H, g, singular_tol=1e-12):
    """Solve ``H p = -g`` through a symmetric eigendecomposition.

    Raises :class:`OptimizerError` when the smallest eigenvalue magnitude is
    at or below ``singular_tol * ||H||``. ``singular_tol=0`` only rejects
    exactly singular matrices.
    """
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    scale = np.abs(lam).max(initial=0.0)
    if scale == 0.0 or np.abs(lam).min() <= singular_tol * scale:
        raise OptimizerError("Hessian singular")
    return -V @ ((V.T @ g) / lam)


def abs_eig(eig):
    """Spectral absolute value: same eigenvectors, ``|lambda|``."""
    return LowRankEig(eig.U, np.abs(eig.lambdas), eig.tolerance_met, eig.columns_used)


def abs_hessian(H):
    """Dense ``|H| = V |Lambda| V^T``."""
    return abs_eig(LowRankEig.from_dense(H)).dense()


def direction_full_sfn(H, g, gamma=0.0):
    """Solve ``(|H| + gamma I) p = -g`` in the eigenbasis of ``H``.

    Modes where ``|lambda| + gamma`` is exactly zero are left out (the
    gradient has no usable curvature there).
    """
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    denom = np.abs(lam) + gamma
    coef = V.T @ g
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(denom > 0.0, coef / denom, 0.0)
    return -V @ scaled


def direction_lrsfn(eig, g, gamma, rel_guard=1e-14):
    """Low-rank saddle-free Newton direction by Sherman-Morrison-Woodbury.

    Returns ``p`` solving ``(U |Lambda| U^T + gamma I) p = -g`` in O(d r):
    ``p = -g/gamma + U diag(|lambda| / (gamma (|lambda| + gamma))) U^T g``.
    Modes with ``|lambda| < rel_guard * |lambda_1|`` are folded into the
    damped complement.
    """
    if not gamma > 0:
        raise OptimizerError("lrsfn needs gamma > 0")
    g = np.asarray(g, dtype=np.float64)
    p = -g / gamma
    if eig.rank == 0:
        return p
    lam = np.abs(eig.lambdas)
    keep = lam >= rel_guard * lam.max()
    if not np.any(keep):
        return p
    U = eig.U[:, keep]
    lam = lam[keep]
    # (1/|L| + 1/gamma)^{-1} / gamma^2 == |L| / (gamma (|L| + gamma))
    weights = lam / (gamma * (lam + gamma))
    return p + U @ (weights * (U.T @ g))


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    """Hyperparameters for one optimizer run.

    ``gamma=None`` selects the method default (1e-3 for ``lrsfn``, 0 for
    ``full_sfn``). ``grad_batch``/``hess_batch`` of ``None`` mean the full
    data set and the gradient batch size respectively.
    """

    method: str = "gd"
    alpha: float = 1.0
    gamma: float | None = None
    rank: int = 10
    grad_batch: int | None = None
    hess_batch: int | None = None
    max_iters: int = 100
    seed: int = 0
    oversample: int = 10
    power_iters: int = 0
    singular_tol: float = 1e-12
    label: str | None = None

    @property
    def name(self):
        if self.label:
            return self.label
        if self.method == "lrsfn":
            return f"lrsfn_r{self.rank}"
        return self.method

    def damping(self):
        if self.gamma is not None:
            return float(self.gamma)
        return 1e-3 if self.method == "lrsfn" else 0.0

    def validate(self, oracle=None):
        if self.method not in METHODS:
            raise OptimizerError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.alpha > 0:
            raise OptimizerError("alpha must be > 0")
        if self.method == "lrsfn" and not self.damping() > 0:
            raise OptimizerError("gamma must be > 0 for lrsfn")
        if self.gamma is not None and self.gamma < 0:
            raise OptimizerError("gamma must be >= 0")
        if self.max_iters < 0:
            raise OptimizerError("max_iters must be >= 0")
        if self.method == "lrsfn" and self.rank < 1:
            raise OptimizerError("rank must be >= 1")
        if oracle is None:
            return self
        if self.method == "lrsfn" and self.rank > oracle.dim:
            raise OptimizerError(f"rank {self.rank} exceeds dimension {oracle.dim}")
        if self.method in ("newton", "full_sfn") and oracle.dim > DENSE_LIMIT:
            raise OptimizerError(f"{self.method} needs a dense Hessian; d={oracle.dim} > {DENSE_LIMIT}")
        nx, ns = self.batch_sizes(oracle)
        if not 1 <= ns <= nx <= oracle.n_samples:
            raise OptimizerError("need 1 <= hess_batch <= grad_batch <= n_samples")
        return self

    def batch_sizes(self, oracle):
        nx = oracle.n_samples if self.grad_batch is None else int(self.grad_batch)
        ns = nx if self.hess_batch is None else int(self.hess_batch)
        return nx, ns

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise OptimizerError(f"unknown optimizer fields: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class OptimizerState:
    w: np.ndarray
    rng: np.random.Generator
    k: int = 0
    work_units: int = 0
    last_eig: LowRankEig | None = None
    diverged: bool = False
    status: str = "ok"


@dataclass
class TraceRecord:
    k: int
    loss: float
    grad_norm: float
    step_norm: float
    work_units: int
    wall_ns: int
    diverged: bool = False
    grad_indices: list | None = None
    hess_indices: list | None = None

    def to_dict(self):
        out = {
            "k": self.k,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "step_norm": self.step_norm,
            "work_units": self.work_units,
            "wall_ns": self.wall_ns,
            "diverged": self.diverged,
        }
        if self.grad_indices is not None:
            out["grad_indices"] = self.grad_indices
            out["hess_indices"] = self.hess_indices
        return out


@dataclass
class RunResult:
    trace: list
    best_w: np.ndarray
    best_loss: float
    final_w: np.ndarray
    diverged: bool = False
    status: str = "ok"
    config: OptimizerConfig | None = None
    extras: dict = field(default_factory=dict)

    @property
    def final_loss(self):
        return self.trace[-1].loss

    @property
    def losses(self):
        return np.array([r.loss for r in self.trace])


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------


def draw_batches(oracle, cfg, rng):
    """Uniform without-replacement index sets, drawn independently."""
    nx, ns = cfg.batch_sizes(oracle)
    n = oracle.n_samples
    gi = np.arange(n) if nx == n else np.sort(rng.choice(n, size=nx, replace=False))
    hi = np.arange(n) if ns == n else np.sort(rng.choice(n, size=ns, replace=False))
    return gi, hi


def compute_direction(oracle, cfg, w, g, hess_idx, rng):
    """Search direction, effective step length, low-rank eig (if any) and
    the Hessian-side work for one iteration."""
    method = cfg.method
    d = oracle.dim
    ns = len(hess_idx)
    if method == "gd":
        return direction_gd(g), cfg.alpha, None, 0
    if method == "lrsfn":
        rf = RangeFinderConfig(cfg.rank, cfg.oversample, cfg.power_iters)
        eig = randomized_eigh(lambda V: oracle.hess_mat(w, V, hess_idx), d, rf, rng=rng)
        return direction_lrsfn(eig, g, cfg.damping()), cfg.alpha, eig, 2 * cfg.rank * ns
    if method == "csgd" and d > DENSE_LIMIT:
        rf = RangeFinderConfig(1, cfg.oversample, cfg.power_iters)
        eig = randomized_eigh(lambda V: oracle.hess_mat(w, V, hess_idx), d, rf, rng=rng)
        p, alpha = direction_csgd(g, abs(eig.lambdas[0]))
        return p, alpha, eig, 2 * eig.columns_used * ns
    H = oracle.hessian(w, hess_idx)
    dense_work = 2 * d * ns
    if method == "csgd":
        lam1 = np.abs(np.linalg.eigvalsh(H)).max()
        p, alpha = direction_csgd(g, lam1)
        return p, alpha, None, dense_work
    if method == "newton":
        return direction_newton(H, g, cfg.singular_tol), cfg.alpha, None, dense_work
    if method == "full_sfn":
        return direction_full_sfn(H, g, cfg.damping()), cfg.alpha, None, dense_work
    raise OptimizerError(f"unknown method {method!r}")


def _bad(loss, w):
    return not np.isfinite(loss) or loss > DIVERGENCE_LOSS or not np.all(np.isfinite(w))


def step(state, oracle, cfg):
    """Advance one iteration in place and return ``(state, record)``."""
    t0 = time.perf_counter_ns()
    gi, hi = draw_batches(oracle, cfg, state.rng)
    g = oracle.gradient(state.w, gi)
    p, alpha, eig, hess_work = compute_direction(oracle, cfg, state.w, g, hi, state.rng)
    s = alpha * p
    with np.errstate(over="ignore", invalid="ignore"):
        w_new = state.w + s
        loss = oracle.value(w_new) if np.all(np.isfinite(w_new)) else np.inf
    state.w = w_new
    state.k += 1
    state.work_units += len(gi) + hess_work
    state.last_eig = eig
    if _bad(loss, w_new):
        state.diverged = True
        state.status = "diverged"
    stochastic = oracle.stochastic
    rec = TraceRecord(
        k=state.k,
        loss=float(loss),
        grad_norm=float(np.linalg.norm(g)),
        step_norm=float(np.linalg.norm(s)),
        work_units=state.work_units,
        wall_ns=time.perf_counter_ns() - t0,
        diverged=state.diverged,
        grad_indices=gi.tolist() if stochastic else None,
        hess_indices=hi.tolist() if stochastic else None,
    )
    return state, rec


def run(oracle, cfg, w0, callbacks=()):
    """Run ``cfg.max_iters`` iterations (fewer on divergence or error).

    Each callback is called as ``cb(state, record)`` after every record,
    including the initial one. The best-loss iterate seen is returned
    alongside the full trace.
    """
    cfg.validate(oracle)
    w = np.array(w0, dtype=np.float64)
    if w.shape != (oracle.dim,):
        raise OptimizerError(f"w0 must have length {oracle.dim}")
    state = OptimizerState(w=w, rng=np.random.default_rng(cfg.seed))
    t0 = time.perf_counter_ns()
    loss0 = oracle.value(w)
    rec = TraceRecord(0, loss0, float(np.linalg.norm(oracle.gradient(w))), 0.0, 0, time.perf_counter_ns() - t0)
    trace = [rec]
    best_loss, best_w = loss0, w.copy()
    for cb in callbacks:
        cb(state, rec)
    while state.k < cfg.max_iters:
        try:
            state, rec = step(state, oracle, cfg)
        except OptimizerError as exc:
            state.diverged = True
            state.status = f"error: {exc}"
            if trace:
                trace[-1].diverged = True
            break
        trace.append(rec)
        for cb in callbacks:
            cb(state, rec)
        if state.diverged:
            break
        if rec.loss < best_loss:
            best_loss, best_w = rec.loss, state.w.copy()
    return RunResult(
        trace=trace,
        best_w=best_w,
        best_loss=float(best_loss),
        final_w=state.w.copy(),
        diverged=state.diverged,
        status=state.status,
        config=cfg,
    )
