"""Linearized stability analysis for stochastic optimizers.

The optimizer is viewed as explicit Euler on the flow ``dw/dt = p(w)``.
Monte Carlo error in the search direction perturbs the path by ``eta``,
which evolves as

    eta_{k+1} = eta_k + dt * Jp(w_k) eta_k + dt * xi(w_k + eta_k),

with ``Jp`` the Jacobian of the noise-free direction map and ``xi`` the
difference between the subsampled and full-data directions. This module
estimates the variance constants that bound ``xi``, turns them into step
length bounds, and simulates the perturbation system directly.

Everything here works with dense d x d matrices and is meant for d <= 50.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .oracle import FiniteSumOracle, OracleError
from .optim import (
    OptimizerConfig,
    direction_lrsfn,
    direction_newton,
)
from .randeig import LowRankEig

DEFAULT_ZETA = 0.5


class StabilityError(RuntimeError):
    pass


class NonSmoothWarning(RuntimeWarning):
    """A retained eigenvalue sits near zero, where ``|.|`` is not differentiable."""


def _require_finite_sum(oracle):
    if not isinstance(oracle, FiniteSumOracle) or oracle.n_samples < 2:
        raise StabilityError("no sampling dimension: oracle is deterministic")


def _sample_indices(n, limit, rng):
    """All samples when ``n <= limit``, else ``limit`` drawn without replacement."""
    if n <= limit:
        return np.arange(n)
    return np.sort(rng.choice(n, size=limit, replace=False))


def _spec_norms(M):
    """Spectral norms of a stack of symmetric matrices."""
    return np.abs(np.linalg.eigvalsh(M)).max(axis=-1)


def abs_sym(H):
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    return (V * np.abs(lam)) @ V.T


def abs_sym_rank(H, r):
    """``|H^(r)|``: spectral absolute value of the rank-r truncation."""
    return abs_sym(LowRankEig.from_dense(H, r).dense())


# ---------------------------------------------------------------------------
# Monte Carlo variance constants
# ---------------------------------------------------------------------------


@dataclass
class GradVariance:
    v_hat: float
    batch_size: int | None = None
    mc_error: float | None = None
    draws: int = 0

    @property
    def bound(self):
        if self.batch_size is None:
            return None
        return self.v_hat / math.sqrt(self.batch_size)


def estimate_grad_variance(oracle, w, batch_size=None, n_probes=200, seed=0, exhaustive_limit=5000):
    """Gradient variance constant ``v`` with ``tr Cov(grad l_i) = v^2``.

    The covariance is taken over the whole data set when it has at most
    ``exhaustive_limit`` samples, else over a random subset of that size.
    With ``batch_size`` given, also measures ``E||grad F_X - grad F||`` over
    ``n_probes`` random batches (drawn without replacement).
    """
    _require_finite_sum(oracle)
    rng = np.random.default_rng(seed)
    idx = _sample_indices(oracle.n_samples, exhaustive_limit, rng)
    G = oracle.per_sample_gradients(w, idx)
    dev = G - G.mean(axis=0)
    v_hat = float(np.sqrt(np.mean(np.sum(dev * dev, axis=1))))
    out = GradVariance(v_hat)
    if batch_size is not None:
        if not 1 <= batch_size <= oracle.n_samples:
            raise StabilityError("batch size out of range")
        full = oracle.gradient(w)
        errs = np.empty(n_probes)
        for t in range(n_probes):
            bi = rng.choice(oracle.n_samples, size=batch_size, replace=False)
            errs[t] = np.linalg.norm(oracle.gradient(w, bi) - full)
        out.batch_size = int(batch_size)
        out.mc_error = float(errs.mean())
        out.draws = n_probes
    return out


@dataclass
class HessVariance:
    """Hessian variance constants.

    ``sigma``/``sigma_abs`` are root-mean-square spectral norms of the
    per-sample deviations ``H_i - H`` and ``|H_i| - |H|``. They always
    dominate the tight values ``sigma_tight = ||E[(H_i - H)^2]||^(1/2)``,
    which are reported alongside.
    """

    sigma: float
    sigma_abs: float
    sigma_tight: float
    sigma_abs_tight: float


def estimate_hess_variance(oracle, w, n_probes=None, seed=0, exhaustive_limit=5000):
    _require_finite_sum(oracle)
    rng = np.random.default_rng(seed)
    limit = exhaustive_limit if n_probes is None else min(exhaustive_limit, n_probes)
    idx = _sample_indices(oracle.n_samples, limit, rng)
    Hs = oracle.per_sample_hessians(w, idx)
    H = oracle.hessian(w)
    D = Hs - H[None]
    Habs = abs_sym(H)
    lam, V = np.linalg.eigh(Hs)
    Dabs = np.einsum("nij,nj,nkj->nik", V, np.abs(lam), V) - Habs[None]

    def tight(X):
        return float(np.sqrt(max(0.0, np.abs(np.linalg.eigvalsh(np.mean(X @ X, axis=0))).max())))

    return HessVariance(
        sigma=float(np.sqrt(np.mean(_spec_norms(D) ** 2))),
        sigma_abs=float(np.sqrt(np.mean(_spec_norms(Dabs) ** 2))),
        sigma_tight=tight(D),
        sigma_abs_tight=tight(Dabs),
    )


@dataclass
class MCConstants:
    v: float
    sigma: float
    sigma_abs: float
    estimated_at: list
    n_probes: int

    def to_dict(self):
        return asdict(self)


def estimate_mc_constants(oracle, w, n_probes=100, seed=0):
    gv = estimate_grad_variance(oracle, w, seed=seed)
    hv = estimate_hess_variance(oracle, w, seed=seed)
    return MCConstants(gv.v_hat, hv.sigma, hv.sigma_abs, np.asarray(w).tolist(), n_probes)


# ---------------------------------------------------------------------------
# direction maps and their Jacobians
# ---------------------------------------------------------------------------


def full_direction(oracle, w, method, cfg, grad_idx=None, hess_idx=None):
    """Direction ``p(w)`` with exact (dense) curvature on the given batches."""
    g = oracle.gradient(w, grad_idx)
    if method == "gd":
        return -g
    H = oracle.hessian(w, hess_idx)
    if method == "newton":
        return direction_newton(H, g, cfg.singular_tol)
    if method == "lrsfn":
        return direction_lrsfn(LowRankEig.from_dense(H, cfg.rank), g, cfg.damping())
    raise StabilityError(f"method {method!r} not supported here")


def jacobian_of_direction(oracle, w, method, cfg=None, eps=None, force_fd=False):
    """Jacobian ``dp/dw`` of the noise-free direction map.

    ``gd`` uses the exact ``-Hessian`` unless ``force_fd``; ``newton`` and
    ``lrsfn`` use central differences with step ``1e-5 (1 + ||w||)``.
    """
    cfg = cfg or OptimizerConfig(method=method)
    w = np.asarray(w, dtype=np.float64)
    if method == "gd" and not force_fd:
        return -oracle.hessian(w)
    if method == "lrsfn":
        lam = np.abs(LowRankEig.from_dense(oracle.hessian(w), cfg.rank).lambdas)
        if lam.size and lam.min() < 1e-6 * lam.max():
            warnings.warn("retained eigenvalue near zero; |H| is not smooth here", NonSmoothWarning, stacklevel=2)
    h = 1e-5 * (1.0 + np.linalg.norm(w)) if eps is None else eps
    d = w.shape[0]
    J = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        J[:, i] = (full_direction(oracle, w + e, method, cfg) - full_direction(oracle, w - e, method, cfg)) / (2 * h)
    return J


def jacobian_spectrum(J):
    """``(|lambda_1|, max real part)`` of a (possibly nonsymmetric) Jacobian."""
    ev = np.linalg.eigvals(J)
    return float(np.abs(ev).max()), float(ev.real.max())


# ---------------------------------------------------------------------------
# step-length bounds
# ---------------------------------------------------------------------------


@dataclass
class StabilityReport:
    zeta: float
    lambda1_jacobian: float
    C0: float
    C1: float
    C2: float
    dt_geometry: float
    dt_stochastic: float
    dt_bound: float
    flags: list = field(default_factory=list)

    def to_dict(self):
        out = asdict(self)
        for k, val in out.items():
            if isinstance(val, float) and math.isinf(val):
                out[k] = "inf"
        return out


def _check_zeta(zeta):
    if not 0.0 < zeta < 1.0:
        raise StabilityError("zeta must lie in (0, 1)")


def dt_bound_gd(lambda1, v, n_grad, zeta=DEFAULT_ZETA):
    """Step-length bound for (stochastic) gradient descent.

    ``min((1 + zeta) / |lambda_1|, (1 - zeta) sqrt(N_X) / v)``; the second
    term is infinite without gradient noise.
    """
    _check_zeta(zeta)
    if not lambda1 > 0:
        raise StabilityError("lambda1 must be > 0")
    geo = (1.0 + zeta) / abs(lambda1)
    sto = math.inf if v == 0 else (1.0 - zeta) * math.sqrt(n_grad) / v
    return StabilityReport(zeta, abs(lambda1), float(v), 0.0, 0.0, geo, sto, min(geo, sto))


def dt_bound_newton(lambda1_jac, C0, C1, C2, n_grad, n_hess, grad_norm_expect, zeta=DEFAULT_ZETA):
    """Step-length bound for stochastic Newton / LRSFN.

    ``min((1 + zeta)/|lambda_1(Jp)|, (1 - zeta) / (C0/sqrt(N_X)
    + C1 E||g||/sqrt(N_S) + C2 E||g||/N_S))``.
    """
    _check_zeta(zeta)
    flags = []
    if lambda1_jac > 0:
        geo = (1.0 + zeta) / abs(lambda1_jac)
    else:
        geo = math.inf
    denom = C0 / math.sqrt(n_grad) + (C1 / math.sqrt(n_hess) + C2 / n_hess) * grad_norm_expect
    if not math.isfinite(denom):
        flags.append("unbounded risk")
        sto = 0.0
    else:
        sto = math.inf if denom == 0 else (1.0 - zeta) / denom
    return StabilityReport(zeta, float(lambda1_jac), float(C0), float(C1), float(C2), geo, sto, min(geo, sto), flags)


@dataclass
class NewtonConstants:
    C0: float
    C1: float
    C2: float
    v: float
    sigma: float
    inv_norm: float
    expect_inv1: float
    expect_inv2: float
    unbounded_fraction: float
    grad_norm_expect: float


def error_constants(v, sigma, inv_norm, expect_inv1=1.0, expect_inv2=1.0):
    """``(C0, C1, C2)`` from the variance constants and ``||A^-1||``.

    For LRSFN pass ``inv_norm = 1/gamma`` and ``sigma = sigma_abs``.
    """
    C0 = v * inv_norm
    if sigma == 0:
        return C0, 0.0, 0.0
    C1 = 0.5 * sigma * inv_norm**2 * (1.0 + expect_inv1)
    C2 = 0.25 * sigma**2 * inv_norm**3 * expect_inv2
    return C0, C1, C2


def estimate_newton_constants(oracle, w, method, cfg, n_probes=100, seed=0):
    """Monte Carlo error constants for the stochastic Newton / LRSFN direction.

    Newton (``A = Hessian``)::

        C0 = v ||A^-1||
        C1 = sigma/2 ||A^-1||^2 (1 + E||(I + E_MC A^-1)^-1||)
        C2 = sigma^2/4 ||A^-1||^3 E||(I + E_MC A^-1 / 2)^-1||

    LRSFN (``A = |H^(r)| + gamma I``) uses ``||A^-1|| <= 1/gamma`` and the
    absolute-Hessian constant ``sigma_abs``, with ``E_MC`` the deviation of the
    subsampled ``|H_S^(r)|`` from ``|H^(r)|``. Expectations are sample means
    over ``n_probes`` Hessian batches of size ``cfg.hess_batch``; draws where
    ``I + E_MC A^-1`` is numerically singular are excluded and counted.
    """
    _require_finite_sum(oracle)
    if method not in ("newton", "lrsfn"):
        raise StabilityError("method must be 'newton' or 'lrsfn'")
    rng = np.random.default_rng(seed)
    nx, ns = cfg.batch_sizes(oracle)
    gv = estimate_grad_variance(oracle, w, seed=seed)
    hv = estimate_hess_variance(oracle, w, seed=seed)
    H = oracle.hessian(w)
    d = oracle.dim
    if method == "newton":
        lam = np.abs(np.linalg.eigvalsh(H))
        if lam.min() == 0:
            raise StabilityError("Hessian singular")
        inv_norm = 1.0 / lam.min()
        Ainv = np.linalg.inv(H)
        sigma = hv.sigma

        def deviation(S):
            return oracle.hessian(w, S) - H
    else:
        gamma = cfg.damping()
        inv_norm = 1.0 / gamma
        base = abs_sym_rank(H, cfg.rank)
        Ainv = np.linalg.inv(base + gamma * np.eye(d))
        sigma = hv.sigma_abs

        def deviation(S):
            return abs_sym_rank(oracle.hessian(w, S), cfg.rank) - base

    e1, e2, gnorms = [], [], []
    bad = 0
    eye = np.eye(d)
    for _ in range(n_probes):
        S = rng.choice(oracle.n_samples, size=ns, replace=False)
        X = rng.choice(oracle.n_samples, size=nx, replace=False)
        gnorms.append(np.linalg.norm(oracle.gradient(w, X)))
        EA = deviation(S) @ Ainv
        M1, M2 = eye + EA, eye + 0.5 * EA
        if np.linalg.cond(M1) > 1e12 or np.linalg.cond(M2) > 1e12:
            bad += 1
            continue
        e1.append(np.linalg.norm(np.linalg.inv(M1), 2))
        e2.append(np.linalg.norm(np.linalg.inv(M2), 2))
    E1 = float(np.mean(e1)) if e1 else math.inf
    E2 = float(np.mean(e2)) if e2 else math.inf
    v = gv.v_hat
    C0, C1, C2 = error_constants(v, sigma, inv_norm, E1, E2)
    return NewtonConstants(C0, C1, C2, v, sigma, inv_norm, E1, E2, bad / n_probes, float(np.mean(gnorms)))


def stability_report(oracle, w, cfg, zeta=DEFAULT_ZETA, n_probes=100, seed=0):
    """Estimate every constant at ``w`` and return the step-length bound."""
    method = cfg.method
    nx, ns = cfg.batch_sizes(oracle)
    if method == "gd":
        lam1 = float(np.abs(np.linalg.eigvalsh(oracle.hessian(w))).max())
        v = estimate_grad_variance(oracle, w, seed=seed).v_hat if oracle.stochastic else 0.0
        return dt_bound_gd(lam1, v, nx, zeta)
    J = jacobian_of_direction(oracle, w, method, cfg)
    lam1, max_real = jacobian_spectrum(J)
    if oracle.stochastic:
        nc = estimate_newton_constants(oracle, w, method, cfg, n_probes=n_probes, seed=seed)
        C0, C1, C2, gexp = nc.C0, nc.C1, nc.C2, nc.grad_norm_expect
    else:
        C0 = C1 = C2 = 0.0
        gexp = float(np.linalg.norm(oracle.gradient(w)))
    rep = dt_bound_newton(lam1, C0, C1, C2, nx, ns, gexp, zeta)
    if max_real > 1e-8 * max(lam1, 1.0):
        rep.flags.append("jacobian not negative semi-definite")
    return rep


# ---------------------------------------------------------------------------
# empirical checks of the Monte Carlo lemmas
# ---------------------------------------------------------------------------


def check_gradient_bound(oracle, w, batch_sizes, draws=200, seed=0, slack=1.05):
    """``E||grad F_X - grad F|| <= v / sqrt(N_X)`` at each batch size."""
    rows = []
    for N in batch_sizes:
        gv = estimate_grad_variance(oracle, w, batch_size=N, n_probes=draws, seed=seed + N)
        rows.append(
            {"batch": int(N), "lhs": gv.mc_error, "bound": gv.bound, "ratio": gv.mc_error / gv.bound if gv.bound else 0.0,
             "pass": bool(gv.mc_error <= slack * gv.bound)}
        )
    return rows


def check_hessian_bound(oracle, w, batch_sizes, draws=200, seed=0, slack=1.05):
    """``E||H_S - H|| <= sigma/sqrt(N_S)`` and the absolute-Hessian analogue."""
    hv = estimate_hess_variance(oracle, w, seed=seed)
    H = oracle.hessian(w)
    Habs = abs_sym(H)
    rows = []
    for N in batch_sizes:
        rng = np.random.default_rng(seed + 1000 + N)
        e, ea = np.empty(draws), np.empty(draws)
        for t in range(draws):
            S = rng.choice(oracle.n_samples, size=N, replace=False)
            HS = oracle.hessian(w, S)
            e[t] = np.abs(np.linalg.eigvalsh(HS - H)).max()
            ea[t] = np.abs(np.linalg.eigvalsh(abs_sym(HS) - Habs)).max()
        b, ba = hv.sigma / math.sqrt(N), hv.sigma_abs / math.sqrt(N)
        rows.append(
            {"batch": int(N), "lhs": float(e.mean()), "bound": b, "ratio": float(e.mean() / b) if b else 0.0,
             "lhs_abs": float(ea.mean()), "bound_abs": ba, "ratio_abs": float(ea.mean() / ba) if ba else 0.0,
             "pass": bool(e.mean() <= slack * b and ea.mean() <= slack * ba)}
        )
    return rows


def check_newton_direction_bound(oracle, w, batch_pairs, draws=200, seed=0, slack=1.05, n_probes=None):
    """Search-direction error of ``A_S^-1 g_X`` against its constant-based bound.

    ``A`` is the Hessian at ``w``; gradient and Hessian batches are drawn
    independently.
    """
    H = oracle.hessian(w)
    g = oracle.gradient(w)
    ref = np.linalg.solve(H, g)
    rows = []
    for nx, ns in batch_pairs:
        cfg = OptimizerConfig(method="newton", grad_batch=nx, hess_batch=ns)
        nc = estimate_newton_constants(oracle, w, "newton", cfg, n_probes=n_probes or draws, seed=seed + 7 * ns)
        rng = np.random.default_rng(seed + 2000 + 31 * nx + ns)
        errs, gn = np.empty(draws), np.empty(draws)
        for t in range(draws):
            X = rng.choice(oracle.n_samples, size=nx, replace=False)
            S = rng.choice(oracle.n_samples, size=ns, replace=False)
            gx = oracle.gradient(w, X)
            errs[t] = np.linalg.norm(np.linalg.solve(oracle.hessian(w, S), gx) - ref)
            gn[t] = np.linalg.norm(gx)
        bound = nc.C0 / math.sqrt(nx) + (nc.C1 / math.sqrt(ns) + nc.C2 / ns) * gn.mean()
        rows.append(
            {"grad_batch": int(nx), "hess_batch": int(ns), "lhs": float(errs.mean()), "bound": float(bound),
             "ratio": float(errs.mean() / bound) if bound else 0.0, "C0": nc.C0, "C1": nc.C1, "C2": nc.C2,
             "unbounded_fraction": nc.unbounded_fraction, "pass": bool(errs.mean() <= slack * bound)}
        )
    return rows


# ---------------------------------------------------------------------------
# perturbation propagation
# ---------------------------------------------------------------------------


def perturbation_update(eta, J, dt, xi):
    return eta + dt * (J @ eta) + dt * xi


@dataclass
class PerturbationTrace:
    norms: np.ndarray
    dt: float
    blowup: float = 1e8

    @property
    def mean(self):
        return self.norms.mean(axis=0)

    @property
    def stable(self):
        return bool(np.all(self.mean < 1.0))

    def first_exceed(self, level=1.0):
        """Per replicate, first step with ``||eta_k|| > level`` (-1 if never)."""
        hit = self.norms > level
        return np.where(hit.any(axis=1), hit.argmax(axis=1), -1)

    def exceed_fraction(self, level=1.0, before=None):
        fe = self.first_exceed(level)
        if before is not None:
            fe = np.where(fe < before, fe, -1)
        return float(np.mean(fe >= 0))

    def to_dict(self):
        return {
            "dt": self.dt,
            "stable": self.stable,
            "mean": self.mean.tolist(),
            "max_mean": float(self.mean.max()),
            "replicates": self.norms.tolist(),
        }


def simulate_perturbation(oracle, cfg, w0, n_replicates=50, n_steps=200, seed=0, dt=None, blowup=1e8):
    """Propagate Monte Carlo perturbations along the noise-free path.

    The reference path ``w_{k+1} = w_k + dt p(w_k)`` uses full-data
    directions. Each replicate draws its own gradient/Hessian batches (sizes
    from ``cfg``) to realize ``xi = p_batch - p_full`` at ``w_k + eta_k``.
    Replicates whose ``||eta||`` exceeds ``blowup`` are frozen there.
    """
    _require_finite_sum(oracle)
    method = cfg.method
    dt = cfg.alpha if dt is None else float(dt)
    nx, ns = cfg.batch_sizes(oracle)
    d = oracle.dim
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_replicates)]
    etas = np.zeros((n_replicates, d))
    norms = np.zeros((n_replicates, n_steps + 1))
    alive = np.ones(n_replicates, dtype=bool)
    w = np.array(w0, dtype=np.float64)
    n = oracle.n_samples
    for k in range(n_steps):
        p_ref = full_direction(oracle, w, method, cfg)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonSmoothWarning)
            J = jacobian_of_direction(oracle, w, method, cfg)
        for r in np.flatnonzero(alive):
            x = w + etas[r]
            rng = streams[r]
            X = rng.choice(n, size=nx, replace=False)
            S = rng.choice(n, size=ns, replace=False)
            try:
                xi = full_direction(oracle, x, method, cfg, X, S) - full_direction(oracle, x, method, cfg)
            except (OracleError, np.linalg.LinAlgError):
                xi = np.full(d, np.inf)
            with np.errstate(over="ignore", invalid="ignore"):
                etas[r] = perturbation_update(etas[r], J, dt, xi)
            nrm = np.linalg.norm(etas[r])
            if not np.isfinite(nrm) or nrm > blowup:
                alive[r] = False
                nrm = blowup
            norms[r, k + 1] = nrm
        norms[~alive, k + 1] = np.maximum(norms[~alive, k + 1], blowup)
        w = w + dt * p_ref
        if not np.all(np.isfinite(w)) or not np.isfinite(oracle.value(w)) or oracle.value(w) > 1e12:
            raise StabilityError("reference unstable")
    return PerturbationTrace(norms, dt, blowup)


def stability_sweep(oracle, cfg, w0, dt_values, batch_pairs, n_replicates=20, n_steps=100, seed=0):
    """Rows of ``(dt, grad_batch, hess_batch, stable, max_mean_eta)``."""
    rows = []
    for nx, ns in batch_pairs:
        c = OptimizerConfig(**{**cfg.to_dict(), "grad_batch": nx, "hess_batch": ns})
        for dt in dt_values:
            try:
                tr = simulate_perturbation(oracle, c, w0, n_replicates, n_steps, seed, dt=dt)
                rows.append({"dt": dt, "grad_batch": nx, "hess_batch": ns, "stable": tr.stable,
                             "max_mean_eta": float(tr.mean.max())})
            except StabilityError:
                rows.append({"dt": dt, "grad_batch": nx, "hess_batch": ns, "stable": False,
                             "max_mean_eta": math.inf})
    return rows
