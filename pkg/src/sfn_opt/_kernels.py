"""Hot numeric kernels for the built-in objectives.

Every kernel exists twice: an explicit-loop version compiled with
``numba.njit`` and a vectorized numpy version. The numba path is used when
numba imports and ``SFN_OPT_DISABLE_NUMBA`` is unset (or ``0``); otherwise
the numpy path is bound to the public names. Kernels listed in
:data:`PREFER_NUMPY` stay on numpy either way. Both paths are exposed through
:data:`NUMPY_KERNELS` and :data:`NUMBA_KERNELS` so tests and the benchmark
can compare them directly.
"""

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None


def _env_disabled():
    flag = os.environ.get("SFN_OPT_DISABLE_NUMBA", "0").strip().lower()
    return flag not in ("", "0", "false", "no", "off")


HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _env_disabled()

_PI = math.pi


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def _mich_parts(w):
    a = np.arange(1, w.shape[0] + 1, dtype=np.float64) / _PI
    u = a * w * w
    return a, np.sin(w), np.cos(w), np.sin(u), np.cos(u)


def michalewicz_value_np(w):
    _, sw, _, su, _ = _mich_parts(w)
    return -float(np.sum(sw * su**20))


def michalewicz_grad_np(w):
    a, sw, cw, su, cu = _mich_parts(w)
    s19 = su**19
    return -(cw * s19 * su + sw * 40.0 * a * w * s19 * cu)


def michalewicz_hess_diag_np(w):
    a, sw, cw, su, cu = _mich_parts(w)
    s18 = su**18
    s19 = s18 * su
    s20 = s19 * su
    du = 2.0 * a * w
    inner = 380.0 * s18 * cu * cu * du * du - 20.0 * s20 * du * du + 40.0 * a * s19 * cu
    return -(-sw * s20 + 2.0 * cw * 20.0 * s19 * cu * du + sw * inner)


def rosenbrock_value_np(w):
    x, y = w[:-1], w[1:]
    return float(np.sum(100.0 * (y - x * x) ** 2 + (1.0 - x) ** 2))


def rosenbrock_grad_np(w):
    x, y = w[:-1], w[1:]
    r = y - x * x
    g = np.zeros_like(w)
    g[:-1] += -400.0 * x * r - 2.0 * (1.0 - x)
    g[1:] += 200.0 * r
    return g


def rosenbrock_bands_np(w):
    """Main diagonal and first off-diagonal of the (tridiagonal) Hessian."""
    diag = np.zeros_like(w)
    diag[:-1] += 1200.0 * w[:-1] ** 2 - 400.0 * w[1:] + 2.0
    diag[1:] += 200.0
    return diag, -400.0 * w[:-1]


def rosenbrock_hessmat_np(w, V):
    diag, off = rosenbrock_bands_np(w)
    out = diag[:, None] * V
    out[:-1] += off[:, None] * V[1:]
    out[1:] += off[:, None] * V[:-1]
    return out


def finite_sum_grad_np(A, b, idx, w):
    """Mean over ``idx`` of ``A_i^T (A_i w - b_i)``; ``A`` is (n, m, d)."""
    Ai = A[idx]
    resid = np.einsum("nmd,d->nm", Ai, w) - b[idx]
    return np.einsum("nmd,nm->d", Ai, resid) / idx.shape[0]


def finite_sum_per_sample_grads_np(A, b, idx, w):
    Ai = A[idx]
    resid = np.einsum("nmd,d->nm", Ai, w) - b[idx]
    return np.einsum("nmd,nm->nd", Ai, resid)


def finite_sum_hessmat_np(A, idx, V):
    Ai = A[idx].reshape(-1, A.shape[2])
    return Ai.T @ (Ai @ V) / idx.shape[0]


NUMPY_KERNELS = {
    "michalewicz_value": michalewicz_value_np,
    "michalewicz_grad": michalewicz_grad_np,
    "michalewicz_hess_diag": michalewicz_hess_diag_np,
    "rosenbrock_value": rosenbrock_value_np,
    "rosenbrock_grad": rosenbrock_grad_np,
    "rosenbrock_hessmat": rosenbrock_hessmat_np,
    "finite_sum_grad": finite_sum_grad_np,
    "finite_sum_per_sample_grads": finite_sum_per_sample_grads_np,
    "finite_sum_hessmat": finite_sum_hessmat_np,
}


# ---------------------------------------------------------------------------
# numba loop path
# ---------------------------------------------------------------------------

NUMBA_KERNELS = {}

if HAVE_NUMBA:
    _njit = numba.njit(cache=True, nogil=True)

    @_njit
    def michalewicz_value_nb(w):
        total = 0.0
        for j in range(w.shape[0]):
            su = math.sin((j + 1) * w[j] * w[j] / _PI)
            total -= math.sin(w[j]) * su**20
        return total

    @_njit
    def michalewicz_grad_nb(w):
        g = np.empty_like(w)
        for j in range(w.shape[0]):
            a = (j + 1) / _PI
            u = a * w[j] * w[j]
            su = math.sin(u)
            s19 = su**19
            g[j] = -(math.cos(w[j]) * s19 * su + math.sin(w[j]) * 40.0 * a * w[j] * s19 * math.cos(u))
        return g

    @_njit
    def michalewicz_hess_diag_nb(w):
        h = np.empty_like(w)
        for j in range(w.shape[0]):
            a = (j + 1) / _PI
            x = w[j]
            u = a * x * x
            su = math.sin(u)
            cu = math.cos(u)
            sw = math.sin(x)
            s18 = su**18
            s19 = s18 * su
            s20 = s19 * su
            du = 2.0 * a * x
            inner = 380.0 * s18 * cu * cu * du * du - 20.0 * s20 * du * du + 40.0 * a * s19 * cu
            h[j] = -(-sw * s20 + 40.0 * math.cos(x) * s19 * cu * du + sw * inner)
        return h

    @_njit
    def rosenbrock_value_nb(w):
        total = 0.0
        for j in range(w.shape[0] - 1):
            r = w[j + 1] - w[j] * w[j]
            total += 100.0 * r * r + (1.0 - w[j]) ** 2
        return total

    @_njit
    def rosenbrock_grad_nb(w):
        d = w.shape[0]
        g = np.zeros_like(w)
        for j in range(d - 1):
            r = w[j + 1] - w[j] * w[j]
            g[j] += -400.0 * w[j] * r - 2.0 * (1.0 - w[j])
            g[j + 1] += 200.0 * r
        return g

    @_njit
    def rosenbrock_hessmat_nb(w, V):
        d, k = V.shape
        out = np.zeros((d, k))
        for j in range(d):
            diag = 0.0
            if j < d - 1:
                diag += 1200.0 * w[j] * w[j] - 400.0 * w[j + 1] + 2.0
            if j > 0:
                diag += 200.0
            for c in range(k):
                acc = diag * V[j, c]
                if j < d - 1:
                    acc += -400.0 * w[j] * V[j + 1, c]
                if j > 0:
                    acc += -400.0 * w[j - 1] * V[j - 1, c]
                out[j, c] = acc
        return out

    @_njit
    def finite_sum_per_sample_grads_nb(A, b, idx, w):
        nb = idx.shape[0]
        _, m, d = A.shape
        out = np.zeros((nb, d))
        for s in range(nb):
            i = idx[s]
            for r in range(m):
                res = -b[i, r]
                for c in range(d):
                    res += A[i, r, c] * w[c]
                for c in range(d):
                    out[s, c] += A[i, r, c] * res
        return out

    @_njit
    def finite_sum_grad_nb(A, b, idx, w):
        per = finite_sum_per_sample_grads_nb(A, b, idx, w)
        g = np.zeros(A.shape[2])
        for s in range(per.shape[0]):
            for c in range(per.shape[1]):
                g[c] += per[s, c]
        return g / idx.shape[0]

    @_njit
    def finite_sum_hessmat_nb(A, idx, V):
        _, m, d = A.shape
        k = V.shape[1]
        out = np.zeros((d, k))
        av = np.empty(k)
        for s in range(idx.shape[0]):
            i = idx[s]
            for r in range(m):
                for c in range(k):
                    acc = 0.0
                    for q in range(d):
                        acc += A[i, r, q] * V[q, c]
                    av[c] = acc
                for q in range(d):
                    a = A[i, r, q]
                    for c in range(k):
                        out[q, c] += a * av[c]
        return out / idx.shape[0]

    NUMBA_KERNELS = {
        "michalewicz_value": michalewicz_value_nb,
        "michalewicz_grad": michalewicz_grad_nb,
        "michalewicz_hess_diag": michalewicz_hess_diag_nb,
        "rosenbrock_value": rosenbrock_value_nb,
        "rosenbrock_grad": rosenbrock_grad_nb,
        "rosenbrock_hessmat": rosenbrock_hessmat_nb,
        "finite_sum_grad": finite_sum_grad_nb,
        "finite_sum_per_sample_grads": finite_sum_per_sample_grads_nb,
        "finite_sum_hessmat": finite_sum_hessmat_nb,
    }


# Blocked products go through BLAS on the numpy side, which beats the
# compiled triple loop; see benchmarks/bench_kernels.py.
PREFER_NUMPY = frozenset({"finite_sum_hessmat"})

if USE_NUMBA:
    ACTIVE_KERNELS = {k: (NUMPY_KERNELS[k] if k in PREFER_NUMPY else f) for k, f in NUMBA_KERNELS.items()}
else:
    ACTIVE_KERNELS = dict(NUMPY_KERNELS)
BACKEND = "numba" if USE_NUMBA else "numpy"

michalewicz_value = ACTIVE_KERNELS["michalewicz_value"]
michalewicz_grad = ACTIVE_KERNELS["michalewicz_grad"]
michalewicz_hess_diag = ACTIVE_KERNELS["michalewicz_hess_diag"]
rosenbrock_value = ACTIVE_KERNELS["rosenbrock_value"]
rosenbrock_grad = ACTIVE_KERNELS["rosenbrock_grad"]
rosenbrock_hessmat = ACTIVE_KERNELS["rosenbrock_hessmat"]
finite_sum_grad = ACTIVE_KERNELS["finite_sum_grad"]
finite_sum_per_sample_grads = ACTIVE_KERNELS["finite_sum_per_sample_grads"]
finite_sum_hessmat = ACTIVE_KERNELS["finite_sum_hessmat"]
