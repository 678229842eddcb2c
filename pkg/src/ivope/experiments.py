"""Seeded Monte Carlo studies of the estimator: error rate, interval coverage,
confounding bias against the naive baseline, and first-stage concentration.

Every replication draws its own dataset from a seed derived only from
``(base_seed, n, rep)``; results are collected in ``(n, rep)`` order before
aggregation, so sequential and parallel runs give identical reports.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .datagen import build_scenario_confounded, build_scenario_identity, sample_dataset
from .errors import NumericalError, ValidationError
from .estimator import estimate, naive_ols_baseline
from .inference import asymptotic_covariance, confidence_intervals
from .model import exact_value, policy_features, population_moments, true_A_matrix

log = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.10
MIN_REPLICATIONS = 50


class ExperimentError(NumericalError):
    """Too many replications failed."""


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "confounded"
    S: int = 3
    A: int = 3
    Z: int = 3
    confound_strength: float = 1.0
    gamma: float = 0.5
    noise_halfwidth: float = 0.5
    seed: int = 0
    d: Optional[int] = None

    def build(self):
        return _build_scenario(self)


@lru_cache(maxsize=16)
def _build_scenario(cfg: ScenarioConfig):
    if cfg.kind == "identity":
        return build_scenario_identity(cfg.S, cfg.A, cfg.seed, gamma=cfg.gamma, noise_halfwidth=cfg.noise_halfwidth)
    if cfg.kind == "confounded":
        return build_scenario_confounded(
            cfg.S,
            cfg.A,
            cfg.Z,
            cfg.confound_strength,
            cfg.seed,
            d=cfg.d,
            gamma=cfg.gamma,
            noise_halfwidth=cfg.noise_halfwidth,
        )
    raise ValidationError(f"unknown scenario kind {cfg.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig
    n_grid: tuple
    replications: int
    base_seed: int = 0
    level: float = 0.95
    ridge_lambda: float = 0.0
    s0: int = 0

    def __post_init__(self):
        grid = tuple(int(n) for n in self.n_grid)
        object.__setattr__(self, "n_grid", grid)
        if not grid or any(n < 1 for n in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValidationError("n_grid must be a strictly increasing list of positive sizes")
        if self.replications < 1:
            raise ValidationError("replications must be positive")
        if not 0.0 < self.level < 1.0:
            raise ValidationError("level must lie in (0, 1)")
        if self.ridge_lambda < 0:
            raise ValidationError("ridge_lambda must be nonnegative")

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        scen = dict(doc.pop("scenario", {}))
        unknown = set(scen) - set(ScenarioConfig.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(scenario=ScenarioConfig(**scen), **doc)

    def to_dict(self):
        doc = asdict(self)
        doc["n_grid"] = list(self.n_grid)
        return doc


def replication_seed(base_seed: int, n: int, rep: int) -> int:
    """64-bit seed that depends only on ``(base_seed, n, rep)``."""
    ss = np.random.SeedSequence(entropy=int(base_seed) % 2**64, spawn_key=(int(n), int(rep)))
    return int(ss.generate_state(1, np.uint64)[0])


def naive_population_value(model, policy) -> np.ndarray:
    """Infinite-data limit of the naive baseline.

    Regressing on the logged pair's own features targets
    ``E[phi phi^T]^{-1} E[phi (R + mu)]`` under the marginal pair law; the
    transition regression stays unbiased because eps does not enter ``s'``.
    """
    q = model.p_z @ model.rho
    gram = (model.Phi * q[:, None]).T @ model.Phi
    w_naive = np.linalg.solve(gram, model.Phi.T @ (q * (model.reward + model.confounder.mu)))
    theta = np.linalg.solve(np.eye(model.d) - model.gamma * true_A_matrix(model, policy), w_naive)
    return policy_features(model, policy) @ theta


def prescreen_bias_scenario(base: ScenarioConfig, s0=0, min_bias=0.2, min_sigma=1e-3, max_tries=50):
    """First scenario seed at or after ``base.seed`` with a clear confounding gap.

    Requires genuine endogeneity (``max |E[r|s,a] - R(s,a)| >= 0.01``), a
    closed-form naive bias at ``s0`` of at least ``min_bias`` and population
    ``sigma_min >= min_sigma``.
    """
    for seed in range(base.seed, base.seed + max_tries):
        cfg = ScenarioConfig(**{**asdict(base), "seed": seed})
        try:
            model, policy = cfg.build()
        except ValidationError:
            continue
        _, V, _ = exact_value(model, policy)
        gap = np.abs(model.confounder.mu).max()
        bias = abs(naive_population_value(model, policy)[s0] - V[s0])
        if gap >= 0.01 and bias >= min_bias and population_moments(model, policy).sigma_min >= min_sigma:
            return cfg
    raise ExperimentError(f"no scenario seed in [{base.seed}, {base.seed + max_tries}) passed the pre-screen")


# -- replication kernels (module level so they pickle) ----------------------


def _truth(cfg):
    model, policy = cfg.scenario.build()
    _, V, _ = exact_value(model, policy)
    return model, policy, V


def _rate_rep(cfg: ExperimentConfig, n, seed):
    model, policy, V = _truth(cfg)
    ds = sample_dataset(model, n, seed)
    est = estimate(ds, model.Phi, policy, model.gamma, cfg.ridge_lambda)
    err = est.V_hat - V
    return {"err": abs(err[cfg.s0]), "signed": err[cfg.s0], "sup": np.abs(err).max(), "sigma_min_hat": est.sigma_min_hat}


def _contains(ci, v):
    # rounding slack so zero-width intervals at an exact estimate still count
    slack = 64 * np.finfo(float).eps * max(1.0, abs(v))
    return ci.lo - slack <= v <= ci.hi + slack


def _coverage_rep(cfg: ExperimentConfig, n, seed):
    model, policy, V = _truth(cfg)
    ds = sample_dataset(model, n, seed)
    est = estimate(ds, model.Phi, policy, model.gamma, cfg.ridge_lambda)
    cov = asymptotic_covariance(ds, est, model.Phi)
    cis = confidence_intervals(est.V_hat, cov, n, cfg.level)
    sd = math.sqrt(max(cov.cov_V[cfg.s0, cfg.s0], 0.0) / n)
    err = est.V_hat[cfg.s0] - V[cfg.s0]
    return {
        "covered": [_contains(ci, v) for ci, v in zip(cis, V)],
        "width": cis[cfg.s0].width,
        "standardized": err / sd if sd > 0 else (0.0 if err == 0 else math.copysign(math.inf, err)),
    }


def _bias_rep(cfg: ExperimentConfig, n, seed):
    model, policy, V = _truth(cfg)
    ds = sample_dataset(model, n, seed)
    est = estimate(ds, model.Phi, policy, model.gamma, cfg.ridge_lambda)
    naive = naive_ols_baseline(ds, model.Phi, policy, model.gamma)
    return {"two_stage": abs(est.V_hat[cfg.s0] - V[cfg.s0]), "naive": abs(naive[cfg.s0] - V[cfg.s0])}


def _concentration_rep(cfg: ExperimentConfig, n, seed):
    model, policy, _ = _truth(cfg)
    mom = population_moments(model, policy)
    ds = sample_dataset(model, n, seed)
    est = estimate(ds, model.Phi, policy, model.gamma, cfg.ridge_lambda)
    feature_err = np.linalg.norm(est.stage1.phi_hat[ds.z] - mom.phi_rho[ds.z], axis=1).mean()
    evals, evecs = np.linalg.eigh(mom.Sigma)
    root = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    sandwich = root @ np.linalg.solve(est.Sigma_hat, root)
    return {"feature_err": feature_err, "op_norm": np.linalg.norm(sandwich, 2)}


_KERNELS = {"rate": _rate_rep, "coverage": _coverage_rep, "bias": _bias_rep, "concentration": _concentration_rep}


def _run_one(task):
    kind, cfg, n, rep = task
    seed = replication_seed(cfg.base_seed, n, rep)
    try:
        return n, rep, _KERNELS[kind](cfg, n, seed)
    except NumericalError as exc:
        return n, rep, {"failed": str(exc)}


def run_replications(kind: str, cfg: ExperimentConfig, threads: int = 1):
    """Run every (n, rep) cycle; returns ``{n: [result or None, ...]}`` ordered by rep."""
    cfg.scenario.build()  # surface scenario errors before fanning out
    tasks = [(kind, cfg, n, rep) for n in cfg.n_grid for rep in range(cfg.replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_one, tasks, chunksize=max(1, len(tasks) // (8 * threads))))
    else:
        results = [_run_one(t) for t in tasks]
    results.sort(key=lambda item: (item[0], item[1]))
    grouped = {n: [] for n in cfg.n_grid}
    for n, _, res in results:
        grouped[n].append(res)
    for n, reps in grouped.items():
        failed = sum("failed" in r for r in reps)
        if failed:
            log.warning("n=%d: %d of %d replications failed", n, failed, len(reps))
        if failed > MAX_FAILURE_FRACTION * len(reps):
            raise ExperimentError(f"n={n}: {failed} of {len(reps)} replications failed")
    return grouped


def _ok(reps):
    return [r for r in reps if "failed" not in r]


def fit_loglog_slope(points):
    """OLS slope of log(y) on log(n) and its standard error."""
    points = list(points)
    if len(points) < 3:
        raise ValidationError("need at least 3 points to fit a slope")
    n = np.array([p[0] for p in points], dtype=float)
    y = np.array([p[1] for p in points], dtype=float)
    if np.any(y <= 0) or np.any(n <= 0):
        raise ValidationError("log-log fit needs positive values")
    x, t = np.log(n), np.log(y)
    xc = x - x.mean()
    sxx = xc @ xc
    slope = (xc @ (t - t.mean())) / sxx
    resid = t - t.mean() - slope * xc
    dof = len(x) - 2
    se = math.sqrt((resid @ resid) / dof / sxx) if dof > 0 else 0.0
    return float(slope), float(se)


def normal_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def ks_distance(sample):
    """Sup-distance between the empirical CDF of ``sample`` and the standard normal CDF."""
    t = np.sort(np.asarray(sample, dtype=float))
    m = len(t)
    F = np.array([normal_cdf(v) for v in t])
    i = np.arange(1, m + 1)
    return float(max(np.max(i / m - F), np.max(F - (i - 1) / m)))


# -- reports -----------------------------------------------------------------


@dataclass
class Report:
    """Rows of named columns plus scalar summary fields repeated on every CSV row."""

    columns: list
    rows: list
    summary: dict = field(default_factory=dict)

    def column(self, name):
        k = self.columns.index(name)
        return [row[k] for row in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns + list(self.summary))
        for row in self.rows:
            writer.writerow([_fmt(v) for v in row] + [_fmt(v) for v in self.summary.values()])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class RateReport(Report):
    @property
    def slope(self):
        return self.summary["slope"]

    @property
    def slope_se(self):
        return self.summary["slope_se"]


class CoverageReport(Report):
    pass


def _require_reps(cfg):
    if cfg.replications < MIN_REPLICATIONS:
        raise ValidationError(f"rate and coverage runs need at least {MIN_REPLICATIONS} replications")


def run_rate_experiment(cfg: ExperimentConfig, threads: int = 1) -> RateReport:
    _require_reps(cfg)
    grouped = run_replications("rate", cfg, threads)
    rows = []
    for n, reps in grouped.items():
        ok = _ok(reps)
        err = np.array([r["err"] for r in ok])
        signed = np.array([r["signed"] for r in ok])
        rows.append(
            [
                n,
                float(err.mean()),
                float(signed.std()),
                float(np.mean([r["sigma_min_hat"] for r in ok])),
                float(np.mean([r["sup"] for r in ok])),
                len(reps) - len(ok),
            ]
        )
    columns = ["n", "mean_abs_error", "sd_error", "mean_sigma_min_hat", "mean_sup_error", "failures"]
    summary = {}
    if len(rows) >= 3:
        summary["slope"], summary["slope_se"] = fit_loglog_slope([(r[0], r[1]) for r in rows])
    return RateReport(columns, rows, summary)


def run_coverage_experiment(cfg: ExperimentConfig, threads: int = 1) -> CoverageReport:
    _require_reps(cfg)
    grouped = run_replications("coverage", cfg, threads)
    model, _ = cfg.scenario.build()
    rows = []
    for n, reps in grouped.items():
        ok = _ok(reps)
        covered = np.array([r["covered"] for r in ok], dtype=float)
        per_state = covered.mean(axis=0)
        standardized = [r["standardized"] for r in ok]
        rows.append(
            [n, float(per_state[cfg.s0]), float(np.mean([r["width"] for r in ok])), ks_distance(standardized)]
            + [float(c) for c in per_state]
            + [len(reps) - len(ok)]
        )
    columns = ["n", "coverage", "mean_width", "ks_distance"] + [f"coverage_s{s}" for s in range(model.S)] + ["failures"]
    summary = {"level": cfg.level, "replications": cfg.replications}
    if len(rows) >= 3 and all(r[2] > 0 for r in rows):
        summary["width_slope"], summary["width_slope_se"] = fit_loglog_slope([(r[0], r[2]) for r in rows])
    return CoverageReport(columns, rows, summary)


def run_bias_experiment(cfg: ExperimentConfig, threads: int = 1) -> Report:
    grouped = run_replications("bias", cfg, threads)
    rows = []
    for n, reps in grouped.items():
        ok = _ok(reps)
        two = float(np.mean([r["two_stage"] for r in ok]))
        naive = float(np.mean([r["naive"] for r in ok]))
        rows.append([n, two, naive, naive / two if two > 0 else math.inf, len(reps) - len(ok)])
    return Report(["n", "two_stage_error", "naive_error", "naive_to_two_stage", "failures"], rows)


def run_concentration_experiment(cfg: ExperimentConfig, threads: int = 1) -> Report:
    grouped = run_replications("concentration", cfg, threads)
    rows = []
    for n, reps in grouped.items():
        ok = _ok(reps)
        rows.append(
            [
                n,
                float(np.mean([r["feature_err"] for r in ok])),
                float(np.mean([r["op_norm"] for r in ok])),
                len(reps) - len(ok),
            ]
        )
    summary = {}
    if len(rows) >= 3 and all(r[1] > 0 for r in rows):
        summary["slope"], summary["slope_se"] = fit_loglog_slope([(r[0], r[1]) for r in rows])
    return Report(["n", "mean_feature_error", "sigma_op_norm", "failures"], rows, summary)


RUNNERS = {
    "rate": run_rate_experiment,
    "coverage": run_coverage_experiment,
    "bias": run_bias_experiment,
    "concentration": run_concentration_experiment,
}


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))
