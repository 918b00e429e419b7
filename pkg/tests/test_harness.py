import csv
import io
import json

import numpy as np
import pytest

from sfn_opt.harness import (
    ExperimentSpec,
    HarnessError,
    michalewicz_ordering,
    run_experiment,
    spectrum_snapshot,
    summarize,
    summary_csv,
    work_normalized_compare,
)
from sfn_opt.oracle import Michalewicz, Quadratic
from sfn_opt.optim import OptimizerConfig, run


def small_spec(**kw):
    cfgs = [OptimizerConfig("gd", alpha=0.1, max_iters=5, grad_batch=8),
            OptimizerConfig("lrsfn", rank=3, gamma=0.1, alpha=0.5, max_iters=5, grad_batch=8, hess_batch=4)]
    base = dict(problem="finite-sum", d=6, configs=cfgs, n_seeds=3, init=("gaussian", 0.5),
                problem_params={"n": 30, "noise": 0.2, "seed": 1})
    base.update(kw)
    return ExperimentSpec(**base)


def test_zero_iterations_best_is_initial_loss():
    cfgs = [OptimizerConfig(m, max_iters=0) for m in ("gd", "csgd", "newton", "full_sfn")]
    cfgs.append(OptimizerConfig("lrsfn", rank=3, max_iters=0))
    spec = ExperimentSpec("rosenbrock", 5, cfgs, n_seeds=1, init=("gaussian", 0.1), seed_offset=4)
    res = run_experiment(spec)
    f0 = spec.oracle().value(spec.initial_point(4))
    assert all(r.mean_best == f0 for r in res.rows)


def test_summary_matches_direct_recomputation():
    res = run_experiment(small_spec())
    for row in res.rows:
        best = np.array([r.best_loss for r in res.runs[row.method] if not r.diverged])
        assert row.mean_best == pytest.approx(best.mean(), rel=1e-14)
        assert row.std_best == pytest.approx(best.std(ddof=1), rel=1e-12)
        assert row.min_best == best.min()
        assert row.mean_work == np.mean([r.trace[-1].work_units for r in res.runs[row.method]])


def test_divergent_runs_counted_not_averaged():
    row = summarize("x", [1.0, 5.0, 3.0], [10, 10, 10], [False, True, False])
    assert row.diverged == 1 and row.mean_best == 2.0
    assert summarize("y", [1.0], [1], [True]).note == "all diverged"


def test_summary_csv_is_byte_identical_across_runs_and_threads(tmp_path):
    a = run_experiment(small_spec(out_dir=str(tmp_path / "a")))
    b = run_experiment(small_spec(out_dir=str(tmp_path / "b"), threads=3))
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()
    assert summary_csv(a.rows) == summary_csv(b.rows)
    rows = list(csv.reader(io.StringIO(summary_csv(a.rows))))
    assert rows[0] == ["method", "mean_best", "std_best", "min_best", "mean_work", "diverged"]


def test_outputs_written(tmp_path):
    spec = small_spec(out_dir=str(tmp_path), record_spectrum_at=(0, 5), spectrum_rank=4)
    run_experiment(spec)
    lines = (tmp_path / "traces.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 3 * 6
    rec = json.loads(lines[0])
    assert {"method", "seed", "k", "loss", "grad_norm", "step_norm", "work_units", "wall_ns", "diverged"} <= set(rec)
    spectra = json.loads((tmp_path / "spectra.json").read_text())
    assert len(spectra) == 2 * 3 * 2 and len(spectra[0]["eigenvalues"]) == 4
    assert json.loads((tmp_path / "spec.json").read_text())["n_seeds"] == 3


@pytest.mark.parametrize(
    "kw",
    [{"n_seeds": 0}, {"configs": []}, {"init": ("uniform", 1.0)}, {"init": ("fixed", np.zeros(3))}, {"threads": 0}],
)
def test_spec_validation(kw):
    with pytest.raises(HarnessError):
        run_experiment(small_spec(**kw))


def test_spectrum_snapshot_matches_dense():
    eigs = np.array([6.0, -4.0, 2.0, 1.0, 0.5, -0.25, 0.1, 0.05])
    Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((8, 8)))
    q = Quadratic((Q * eigs) @ Q.T)
    eig = spectrum_snapshot(q, np.zeros(8), 3, seed=1)
    np.testing.assert_allclose(eig.lambdas, [6.0, -4.0, 2.0], atol=1e-10)


def test_spectrum_snapshot_zero_function():
    eig = spectrum_snapshot(Quadratic(np.zeros((5, 5))), np.zeros(5), 3)
    assert np.all(np.abs(eig.lambdas) <= 1e-10)


def test_michalewicz_spectrum_is_indefinite_near_origin():
    m = Michalewicz(100)
    w0 = np.random.default_rng(0).normal(0, 1.0, 100)
    lam = spectrum_snapshot(m, w0, 40, seed=0).lambdas
    assert lam.min() < 0 < lam.max()


def test_work_normalized_identical_runs():
    spec = small_spec(configs=[OptimizerConfig("gd", alpha=0.1, max_iters=5, grad_batch=8)], n_seeds=1)
    r1 = run_experiment(spec).runs["gd"]
    r2 = run_experiment(spec).runs["gd"]
    a = work_normalized_compare({"gd": r1}, 24)
    b = work_normalized_compare({"gd": r2}, 24)
    assert a == b and a[0].mean_iters == 3


def test_work_normalized_iteration_counts():
    from sfn_opt.oracle import FiniteSumProblem

    p = FiniteSumProblem(50, 64, seed=0)
    K = 2
    lr = run(p, OptimizerConfig("lrsfn", rank=40, grad_batch=32, hess_batch=8, gamma=1.0, alpha=0.1, max_iters=5),
             np.zeros(50))
    sgd = run(p, OptimizerConfig("gd", grad_batch=32, alpha=0.01, max_iters=60), np.zeros(50))
    rows = {r.method: r for r in work_normalized_compare({"lrsfn": [lr], "sgd": [sgd]}, 672 * K)}
    assert rows["lrsfn"].mean_iters == K
    assert rows["sgd"].mean_iters == 21 * K


def test_work_budget_below_one_iteration():
    spec = small_spec(n_seeds=1)
    rows = work_normalized_compare(run_experiment(spec).runs, 5)
    assert all(r.note == "no data" for r in rows)


def test_ordering_checker():
    good = {"full_sfn": -25, "lrsfn_r80": -22, "lrsfn_r50": -19.4, "lrsfn_r60": -19.3, "csgd": -8, "gd": -3,
            "newton": -0.3}
    assert michalewicz_ordering(good)[0]
    swapped = dict(good, lrsfn_r80=-19.35)  # r50 < r80 < r60: one adjacent swap
    assert michalewicz_ordering(swapped)[0]
    bad = dict(good, newton=-10)
    assert not michalewicz_ordering(bad)[0]
