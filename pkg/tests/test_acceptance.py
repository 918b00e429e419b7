"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the status lines are
printed even when output capture is on.
"""

import time

import numpy as np
import pytest

from sfn_opt import stability as S
from sfn_opt.harness import michalewicz_ordering, michalewicz_spec, run_experiment
from sfn_opt.oracle import FiniteSumProblem, Rosenbrock, StochasticQuadratic
from sfn_opt.optim import OptimizerConfig, direction_lrsfn, run
from sfn_opt.randeig import LowRankEig, RangeFinderConfig, randomized_eigh

# tolerances
SMW_TOL = 1e-8
EIG_FACTOR = 10.0
ROSEN_CONVERGED = 1e-8
ROSEN_SLOW = 1e-2
LEMMA_SLACK = 1.05
R2_MIN = 0.99
LRSFN_C0_REL = 0.05
WORK_PER_ITER = 672


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, elapsed=None):
        tag = "PASS" if ok else "FAIL"
        t = f" [{elapsed:.1f}s]" if elapsed is not None else ""
        with capsys.disabled():
            print(f"\n[{tag}] criterion {n}: {detail}{t}")
        assert ok, detail

    return emit


def test_criterion_1_smw_exactness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(300):
        d = int(np.exp(rng.uniform(np.log(2), np.log(2000))))
        r = int(rng.integers(1, min(d, 100) + 1))
        gamma = 10 ** rng.uniform(-4, 2)
        U, _ = np.linalg.qr(rng.standard_normal((d, r)))
        lam = rng.choice([-1.0, 1.0], r) * 10 ** rng.uniform(-3, 3, r)
        g = rng.standard_normal(d)
        p = direction_lrsfn(LowRankEig(U, lam), g, gamma)
        resid = U @ (np.abs(lam) * (U.T @ p)) + gamma * p + g
        worst = max(worst, np.linalg.norm(resid) / np.linalg.norm(g))
    dt = time.perf_counter() - t0
    report(1, worst <= SMW_TOL and dt < 60, f"worst relative residual {worst:.2e} over 300 instances", dt)


def test_criterion_2_randomized_eig_quality(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    d, r = 500, 20
    j = np.arange(1, d + 1)
    ratios = []
    for i in range(20):
        # alternate geometric and polynomial decay, random signs
        lam = rng.uniform(0.75, 0.95) ** j if i % 2 == 0 else j ** -rng.uniform(1.0, 3.0)
        lam = lam * rng.choice([-1.0, 1.0], d)
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        H = (Q * lam) @ Q.T
        eig = randomized_eigh(H, d, RangeFinderConfig(r, oversample=10, power_iters=0, seed=i))
        resid = np.abs(np.linalg.eigvalsh(H - eig.dense())).max()
        ratios.append(resid / abs(lam[r]))
    med = float(np.median(ratios))
    dt = time.perf_counter() - t0
    report(2, med <= EIG_FACTOR and dt < 60, f"median ||H - U L U^T|| / |lambda_(r+1)| = {med:.2f}", dt)


def test_criterion_3_rosenbrock_baselines(report):
    t0 = time.perf_counter()
    f = Rosenbrock(10)
    w0 = np.zeros(10)
    newton = run(f, OptimizerConfig("newton", alpha=1.0, max_iters=25), w0)
    sfn = run(f, OptimizerConfig("full_sfn", alpha=1.0, max_iters=25), w0)
    # 200 iterations: from the origin the blow-up happens at k = 138
    gd_fast = run(f, OptimizerConfig("gd", alpha=4e-3, max_iters=200), w0)
    gd_slow = run(f, OptimizerConfig("gd", alpha=1e-3, max_iters=100), w0)
    csgd = run(f, OptimizerConfig("csgd", max_iters=100), w0)
    checks = {
        "newton<1e-8": newton.best_loss < ROSEN_CONVERGED,
        "sfn<1e-8": sfn.best_loss < ROSEN_CONVERGED,
        "sfn rises first": sfn.losses.max() > sfn.losses[0],
        "gd(4e-3) diverged": gd_fast.diverged,
        "gd(1e-3)>1e-2": gd_slow.trace[100].loss > ROSEN_SLOW,
        "csgd>1e-2": csgd.trace[100].loss > ROSEN_SLOW,
    }
    dt = time.perf_counter() - t0
    detail = ", ".join(f"{k}={'ok' if v else 'NO'}" for k, v in checks.items())
    detail += f" (newton {newton.best_loss:.1e}, sfn {sfn.best_loss:.1e}, gd {gd_slow.final_loss:.3g}, csgd {csgd.final_loss:.3g})"
    report(3, all(checks.values()) and dt < 10, detail, dt)


def test_criterion_4_michalewicz_ordering(report):
    t0 = time.perf_counter()
    res = run_experiment(michalewicz_spec(n_seeds=10))
    means = res.means()
    ok_order, chain = michalewicz_ordering(means)
    brackets = means["full_sfn"] <= -15 and means["newton"] >= -5
    lr = [means[k] for k in ("lrsfn_r80", "lrsfn_r50", "lrsfn_r60")]
    coarse = means["full_sfn"] < min(lr) and max(lr) < means["csgd"] < means["gd"] < means["newton"]
    dt = time.perf_counter() - t0
    shown = ", ".join(f"{k}={means[k]:.2f}" for k in
                      ("full_sfn", "lrsfn_r80", "lrsfn_r50", "lrsfn_r60", "csgd", "gd", "newton"))
    detail = f"ordering={'ok' if ok_order else 'NO'} coarse={'ok' if coarse else 'NO'} brackets={'ok' if brackets else 'NO'} ({shown})"
    report(4, ok_order and brackets and dt < 300, detail, dt)


def test_criterion_5_lrsfn_heavy_tail(report):
    t0 = time.perf_counter()
    f = Rosenbrock(10)
    w0 = np.zeros(10)
    finals = {}
    for gamma in (1e-3, 1e-1, 1.0, 10.0):
        r = run(f, OptimizerConfig("lrsfn", rank=9, gamma=gamma, alpha=1.0, max_iters=100), w0)
        finals[gamma] = np.inf if r.diverged else r.final_loss
    best = min(finals.values())
    newton = run(f, OptimizerConfig("newton", max_iters=100), w0).final_loss
    dt = time.perf_counter() - t0
    ok = best >= ROSEN_SLOW and newton < ROSEN_CONVERGED and dt < 30
    per = ", ".join(f"gamma={g:g}:{v:.3g}" for g, v in finals.items())
    report(5, ok, f"best LRSFN(r=9) final {best:.3g} ({per}), newton {newton:.1e}", dt)


def test_criterion_6_monte_carlo_lemmas(report):
    t0 = time.perf_counter()
    worst = {"A1": 0.0, "A2": 0.0, "A2abs": 0.0, "A4": 0.0}
    ok = True
    for seed in range(3):
        p = FiniteSumProblem(10, 50, noise=0.3, seed=seed)
        w = np.random.default_rng(100 + seed).normal(0, 0.5, 10)
        for row in S.check_gradient_bound(p, w, [2, 8, 32], draws=200, seed=seed, slack=LEMMA_SLACK):
            worst["A1"] = max(worst["A1"], row["ratio"])
            ok &= row["pass"]
        for row in S.check_hessian_bound(p, w, [2, 5, 10, 25], draws=200, seed=seed, slack=LEMMA_SLACK):
            worst["A2"] = max(worst["A2"], row["ratio"])
            worst["A2abs"] = max(worst["A2abs"], row["ratio_abs"])
            ok &= row["pass"]
        small = FiniteSumProblem(5, 40, noise=0.3, seed=seed)
        ws = np.random.default_rng(200 + seed).normal(0, 0.5, 5)
        for row in S.check_newton_direction_bound(small, ws, [(2, 2), (8, 5), (32, 10), (40, 40)], draws=200,
                                                  seed=seed, slack=LEMMA_SLACK):
            worst["A4"] = max(worst["A4"], row["ratio"])
            ok &= row["pass"]
    dt = time.perf_counter() - t0
    detail = "worst lhs/bound " + ", ".join(f"{k}={v:.3f}" for k, v in worst.items())
    report(6, bool(ok) and dt < 120, detail, dt)


def _phase(oracle, cfg, w0, bound, label):
    lo = S.simulate_perturbation(oracle, OptimizerConfig(**{**cfg.to_dict(), "alpha": 0.1 * bound}), w0,
                                 n_replicates=50, n_steps=200, seed=1)
    hi = S.simulate_perturbation(oracle, OptimizerConfig(**{**cfg.to_dict(), "alpha": 50 * bound}), w0,
                                 n_replicates=50, n_steps=200, seed=2)
    frac = hi.exceed_fraction(1.0, before=200)
    ok = lo.stable and frac >= 0.8
    return ok, f"{label}: bound {bound:.4g}, 0.1x max mean|eta| {lo.mean.max():.3f}, 50x exceed {frac:.0%}"


def test_criterion_7_stability_phase(report):
    t0 = time.perf_counter()
    # gradient descent: noise-limited regime so the 50x reference path stays convergent
    q = StochasticQuadratic.with_spectrum(np.linspace(1.0, 0.5, 10), 200, seed=3, grad_noise=12.0)
    w0 = q.minimizer()
    cfg = OptimizerConfig("gd", grad_batch=4)
    lam1 = float(np.abs(np.linalg.eigvalsh(q.hessian(w0))).max())
    v = S.estimate_grad_variance(q, w0).v_hat
    ok_gd, msg_gd = _phase(q, cfg, w0, S.dt_bound_gd(lam1, v, 4).dt_bound, "gd")

    # LRSFN: two dominant modes kept, flat damped complement, Hessian noise on
    q2 = StochasticQuadratic.with_spectrum(np.r_[10.0, 8.0, np.full(8, 0.5)], 200, seed=3, grad_noise=8.0,
                                           hess_noise=0.5)
    w2 = q2.minimizer()
    cfg2 = OptimizerConfig("lrsfn", rank=2, gamma=1.0, grad_batch=4, hess_batch=8)
    rep = S.stability_report(q2, w2, cfg2, zeta=0.5, n_probes=100, seed=0)
    ok_lr, msg_lr = _phase(q2, cfg2, w2, rep.dt_bound, "lrsfn")
    dt = time.perf_counter() - t0
    report(7, ok_gd and ok_lr and dt < 180, f"{msg_gd}; {msg_lr}", dt)


def test_criterion_8_c0_conditioning(report):
    t0 = time.perf_counter()
    d, gamma = 10, 0.1
    inv_norms, newton_c0, lrsfn_c0, v_ref = [], [], [], []
    for kappa in (10.0, 1e2, 1e3, 1e4):
        q = StochasticQuadratic.with_spectrum(np.geomspace(1.0, 1.0 / kappa, d), 200, seed=0, grad_noise=1.0)
        w = np.zeros(d)
        G = q.per_sample_gradients(w)
        v_ref.append(np.sqrt(np.trace(np.cov(G.T, bias=True))))
        inv_norms.append(1.0 / np.abs(np.linalg.eigvalsh(q.hessian(w))).min())
        nc = S.estimate_newton_constants(q, w, "newton", OptimizerConfig("newton", grad_batch=8, hess_batch=8),
                                         n_probes=20)
        newton_c0.append(nc.C0)
        lc = S.estimate_newton_constants(q, w, "lrsfn", OptimizerConfig("lrsfn", rank=3, gamma=gamma, grad_batch=8,
                                                                          hess_batch=8), n_probes=20)
        lrsfn_c0.append(lc.C0)
    x, y = np.array(inv_norms), np.array(newton_c0)
    slope, icpt = np.polyfit(x, y, 1)
    r2 = 1 - np.sum((y - (slope * x + icpt)) ** 2) / np.sum((y - y.mean()) ** 2)
    rel = np.abs(np.array(lrsfn_c0) / (np.array(v_ref) / gamma) - 1).max()
    dt = time.perf_counter() - t0
    ok = r2 >= R2_MIN and rel <= LRSFN_C0_REL and dt < 60
    report(8, ok, f"newton C0 vs ||H^-1||: R^2={r2:.5f}; LRSFN C0 max rel. dev. from v/gamma {rel:.2e}", dt)


def test_criterion_9_work_accounting(report):
    p = FiniteSumProblem(50, 64, seed=0)
    cfg = OptimizerConfig("lrsfn", rank=40, grad_batch=32, hess_batch=8, gamma=1.0, alpha=0.1, max_iters=4)
    res = run(p, cfg, np.zeros(50))
    per_iter = np.diff([r.work_units for r in res.trace])
    report(9, bool(np.all(per_iter == WORK_PER_ITER)), f"work units per iteration {per_iter.tolist()}")
