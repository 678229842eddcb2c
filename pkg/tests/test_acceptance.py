"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` or directly with
``python tests/test_acceptance.py``. Monte Carlo criteria run single-threaded
at the full replication counts, so the whole file takes a few minutes.
"""

import os
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import confounded_model, random_valid_model  # noqa: E402
from ivope.datagen import build_scenario_identity, make_rng, sample_dataset  # noqa: E402
from ivope.estimator import Moments, estimate, mix_features, naive_ols_baseline, solve_two_stage  # noqa: E402
from ivope.experiments import (  # noqa: E402
    ExperimentConfig,
    ScenarioConfig,
    prescreen_bias_scenario,
    run_bias_experiment,
    run_concentration_experiment,
    run_coverage_experiment,
    run_rate_experiment,
)
from ivope.inference import components_from_estimate, grad_rho_Ef, jacobian_d, normalizer_d  # noqa: E402
from ivope.model import bellman_oracle_value, exact_value, population_moments  # noqa: E402

GRID = (500, 2000, 8000, 32000)
SCENARIO = ScenarioConfig(kind="confounded", S=3, A=3, Z=3, confound_strength=1.0, gamma=0.5, seed=0)
FD_STEP = 1e-6


def _line(number, ok, detail, elapsed, budget):
    status = "PASS" if ok else "FAIL"
    timing = f"{elapsed:.1f}s (budget {budget}s)"
    return f"{status} criterion {number}: {detail} [{timing}]"


def _emit(text, capsys=None):
    if capsys is None:
        print(text, flush=True)
    else:
        with capsys.disabled():
            print("\n" + text, flush=True)


def _timed(fn):
    t0 = time.perf_counter()
    ok, detail = fn()
    return ok, detail, time.perf_counter() - t0


# -- criteria -------------------------------------------------------------------


def criterion_1():
    worst_theta = worst_oracle = 0.0
    for seed in range(100):
        model, policy = random_valid_model(seed)
        assert model.S <= 5 and model.A <= 5 and model.Z <= 5 and model.d <= 25
        mom = population_moments(model, policy)
        _, _, theta = solve_two_stage(Moments(mom.Sigma, mom.tau, mom.B), model.gamma)
        theta_true, V, _ = exact_value(model, policy)
        worst_theta = max(worst_theta, np.abs(theta - theta_true).max())
        worst_oracle = max(worst_oracle, np.abs(bellman_oracle_value(model, policy) - V).max())
    ok = worst_theta <= 1e-9 and worst_oracle <= 1e-8
    return ok, f"100 models, max |θ-θ*| = {worst_theta:.2e} (≤1e-9), max oracle gap = {worst_oracle:.2e} (≤1e-8)"


def criterion_2():
    worst = 0.0
    cases = 0
    for S, A in [(1, 1), (1, 3), (2, 2), (3, 2), (2, 4), (4, 3)]:
        for seed in range(3):
            model, policy = build_scenario_identity(S, A, seed, noise_halfwidth=0.5)
            ds = sample_dataset(model, 20_000, seed=seed)
            est = estimate(ds, model.Phi, policy, model.gamma)
            if np.any(est.stage1.counts == 0):
                continue
            naive = naive_ols_baseline(ds, model.Phi, policy, model.gamma)
            worst = max(worst, np.abs(est.V_hat - naive).max())
            cases += 1
    ok = cases >= 15 and worst <= 1e-10
    return ok, f"{cases} identity scenarios, max |V̂ - V̂_LSTDQ| = {worst:.2e} (≤1e-10)"


def criterion_3():
    report = run_rate_experiment(ExperimentConfig(SCENARIO, GRID, 200))
    slope = report.slope
    errs = ", ".join(f"{e:.4f}" for e in report.column("mean_abs_error"))
    failures = sum(report.column("failures"))
    ok = -0.65 <= slope <= -0.35
    return ok, f"slope {slope:.3f} ± {report.slope_se:.3f} in [-0.65, -0.35]; mean errors {errs}; failures {failures}"


def criterion_4():
    report = run_coverage_experiment(ExperimentConfig(SCENARIO, (5000,), 500, level=0.95))
    cov, ks = report.column("coverage")[0], report.column("ks_distance")[0]
    ok = 0.90 <= cov <= 0.98 and ks <= 0.08
    return ok, f"coverage {cov:.3f} in [0.90, 0.98]; KS distance {ks:.3f} (≤0.08)"


def criterion_5():
    scenario = prescreen_bias_scenario(SCENARIO)
    report = run_bias_experiment(ExperimentConfig(scenario, (32000,), 100))
    two, naive = report.column("two_stage_error")[0], report.column("naive_error")[0]
    ok = naive >= 5 * two and two <= 0.05
    return ok, f"scenario seed {scenario.seed}: two-stage {two:.4f} (≤0.05), naive {naive:.4f}, ratio {naive / two:.1f} (≥5)"


def _fd_jacobian(x, S, A, Z):
    cols = []
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = FD_STEP
        cols.append((normalizer_d(x + e, S, A, Z) - normalizer_d(x - e, S, A, Z)) / (2 * FD_STEP))
    return np.column_stack(cols)


def _fd_grad(ds, comp):
    def mean_f(rho):
        phi = rho @ comp.Phi
        td = ds.r + comp.gamma * comp.policy_features[ds.s_next] @ comp.theta - phi[ds.z] @ comp.theta
        return comp.G_factor @ (phi[ds.z] * td[:, None]).mean(axis=0)

    Z, SA = comp.rho_hat.shape
    out = np.zeros((len(comp.theta), SA * Z))
    for p in range(SA):
        for z in range(Z):
            e = np.zeros_like(comp.rho_hat)
            e[z, p] = FD_STEP
            out[:, p * Z + z] = (mean_f(comp.rho_hat + e) - mean_f(comp.rho_hat - e)) / (2 * FD_STEP)
    return out


def _rel(a, b):
    scale = np.abs(a).max()
    return np.abs(a - b).max() / scale if scale > 0 else np.abs(b).max()


def criterion_6():
    worst_jac = worst_grad = 0.0
    for seed in range(20):
        rng = make_rng(500 + seed)
        # A >= 2 so that every block of the normalizer is non-constant
        S, A, Z = int(rng.integers(1, 4)), int(rng.integers(2, 4)), int(rng.integers(1, 4))
        x = rng.random(S * A * Z) + 0.05
        x /= x.sum()
        worst_jac = max(worst_jac, _rel(jacobian_d(x, S, A, Z).toarray(), _fd_jacobian(x, S, A, Z)))

        S, A, Z = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
        model, policy = confounded_model(S, A, Z, float(rng.random()), 500 + seed, gamma=0.5)
        ds = sample_dataset(model, 400, seed=seed)
        est = estimate(ds, model.Phi, policy, model.gamma, ridge_lambda=1e-3)
        comp = components_from_estimate(est, model.Phi)
        worst_grad = max(worst_grad, _rel(grad_rho_Ef(ds, comp), _fd_grad(ds, comp)))
    ok = worst_jac <= 1e-6 and worst_grad <= 1e-6
    return ok, f"20 instances each, max rel err jacobian_d {worst_jac:.2e}, grad_rho_Ef {worst_grad:.2e} (≤1e-6)"


def criterion_7():
    report = run_concentration_experiment(ExperimentConfig(SCENARIO, GRID, 100))
    slope = report.summary["slope"]
    op = report.column("sigma_op_norm")[-1]
    ok = -0.65 <= slope <= -0.35 and abs(op - 1) <= 0.2
    return ok, f"feature-error slope {slope:.3f} in [-0.65, -0.35]; ‖Σ^½Σ̂⁻¹Σ^½‖ at n=32000 = {op:.3f} (|·-1| ≤ 0.2)"


def _cli(args, cwd):
    proc = subprocess.run([sys.executable, "-m", "ivope", *args], cwd=cwd, capture_output=True)
    return proc.returncode, proc.stdout


def criterion_8():
    import json

    config = {"scenario": {"kind": "confounded", "seed": 0}, "n_grid": [500, 1000, 2000], "replications": 50}
    commands = [
        ("scenario", ["scenario", "confounded", "--S", "3", "--A", "3", "--Z", "3", "--seed", "0", "--out", "{o}"]),
        ("validate", ["validate", "model.json"]),
        ("gen", ["gen", "--model", "model.json", "--n", "3000", "--seed", "11", "--out", "{o}"]),
        ("gen --emit-eps", ["gen", "--model", "model.json", "--n", "3000", "--seed", "11", "--emit-eps", "--out", "{o}"]),
        ("estimate", ["estimate", "--model", "model.json", "--data", "data.csv", "--out", "{o}"]),
        ("estimate --lambda", ["estimate", "--model", "model.json", "--data", "data.csv", "--lambda", "0.01", "--out", "{o}"]),
        ("infer", ["infer", "--model-features", "model.json", "--data", "data.csv", "--est", "est.json", "--out", "{o}"]),
    ] + [
        (f"experiment {kind} --threads 4", ["experiment", kind, "--config", "exp.json", "--threads", "4", "--out", "{o}"])
        for kind in ("rate", "coverage", "bias", "concentration")
    ]
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        cwd = Path(tmp)
        (cwd / "exp.json").write_text(json.dumps(config))
        assert _cli(["scenario", "confounded", "--S", "3", "--A", "3", "--Z", "3", "--seed", "0", "--out", "model.json"], cwd)[0] == 0
        assert _cli(["gen", "--model", "model.json", "--n", "3000", "--seed", "11", "--out", "data.csv"], cwd)[0] == 0
        assert _cli(["estimate", "--model", "model.json", "--data", "data.csv", "--out", "est.json"], cwd)[0] == 0
        for name, template in commands:
            results = []
            for run in (1, 2):
                out = f"out_{len(results)}_{run}"
                code, stdout = _cli([a.replace("{o}", out) for a in template], cwd)
                produced = (cwd / out).read_bytes() if (cwd / out).exists() else b""
                results.append((code, stdout, produced))
            if results[0] != results[1] or results[0][0] != 0:
                mismatched.append(name)
    ok = not mismatched
    detail = f"{len(commands)} commands rerun byte-identical" if ok else f"non-identical: {', '.join(mismatched)}"
    return ok, detail


CRITERIA = [
    (1, criterion_1, 10),
    (2, criterion_2, 5),
    (3, criterion_3, 600),
    (4, criterion_4, 600),
    (5, criterion_5, 300),
    (6, criterion_6, 30),
    (7, criterion_7, 300),
    (8, criterion_8, 600),
]


@pytest.mark.slow
@pytest.mark.parametrize("number, fn, budget", CRITERIA, ids=[f"criterion_{c[0]}" for c in CRITERIA])
def test_criterion(number, fn, budget, capsys):
    ok, detail, elapsed = _timed(fn)
    _emit(_line(number, ok, detail, elapsed, budget), capsys)
    assert ok, detail
    assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget}s"


if __name__ == "__main__":
    os.environ.setdefault("PYTHONHASHSEED", "0")
    failed = 0
    for number, fn, budget in CRITERIA:
        ok, detail, elapsed = _timed(fn)
        ok = ok and elapsed < budget
        failed += not ok
        _emit(_line(number, ok, detail, elapsed, budget))
    sys.exit(1 if failed else 0)
