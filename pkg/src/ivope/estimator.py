"""Two-stage instrumental-variable estimator of linear policy values.

Stage one estimates the conditional law of the state-action pair given the
instrument by bucket counting and averages the features under it. Stage two
regresses rewards and next-state policy features on those conditional
features and solves the resulting linear Bellman system.

All per-record sums are reduced through integer bucket counts or exactly
rounded ``math.fsum`` per bucket, so outputs do not depend on record order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .datagen import Dataset
from .errors import NumericalError, ValidationError
from .model import COND_LIMIT, Policy

log = logging.getLogger(__name__)

STAGE2_EIG_FLOOR = 1e-10
SIGMA_MIN_WARNING = 1e-6


class StageOneOutput(NamedTuple):
    rho_hat: np.ndarray  # (Z, S*A)
    phi_hat: np.ndarray  # (Z, d)
    counts: np.ndarray  # (Z,)


class Moments(NamedTuple):
    Sigma: np.ndarray
    tau: np.ndarray
    B: np.ndarray


@dataclass
class EstimatorOutput:
    stage1: StageOneOutput
    Sigma_hat: np.ndarray
    tau_hat: np.ndarray
    B_hat: np.ndarray
    w_hat: np.ndarray
    A_hat: np.ndarray
    theta_hat: np.ndarray
    V_hat: np.ndarray
    sigma_min_hat: float
    ridge_lambda: float
    gamma: float
    n: int
    policy_features: np.ndarray
    notes: list = field(default_factory=list)

    def to_dict(self):
        arr = lambda x: np.asarray(x).tolist()  # noqa: E731
        return {
            "n": self.n,
            "gamma": self.gamma,
            "ridge_lambda": self.ridge_lambda,
            "regularized": self.ridge_lambda > 0,
            "sigma_min_hat": self.sigma_min_hat,
            "rho_hat": arr(self.stage1.rho_hat),
            "phi_hat": arr(self.stage1.phi_hat),
            "counts": arr(self.stage1.counts),
            "Sigma_hat": arr(self.Sigma_hat),
            "tau_hat": arr(self.tau_hat),
            "B_hat": arr(self.B_hat),
            "w_hat": arr(self.w_hat),
            "A_hat": arr(self.A_hat),
            "theta_hat": arr(self.theta_hat),
            "V_hat": arr(self.V_hat),
            "policy_features": arr(self.policy_features),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, doc):
        a = np.asarray
        stage1 = StageOneOutput(a(doc["rho_hat"], float), a(doc["phi_hat"], float), a(doc["counts"], np.int64))
        return cls(
            stage1=stage1,
            Sigma_hat=a(doc["Sigma_hat"], float),
            tau_hat=a(doc["tau_hat"], float),
            B_hat=a(doc["B_hat"], float),
            w_hat=a(doc["w_hat"], float),
            A_hat=a(doc["A_hat"], float),
            theta_hat=a(doc["theta_hat"], float),
            V_hat=a(doc["V_hat"], float),
            sigma_min_hat=float(doc["sigma_min_hat"]),
            ridge_lambda=float(doc["ridge_lambda"]),
            gamma=float(doc["gamma"]),
            n=int(doc["n"]),
            policy_features=a(doc["policy_features"], float),
            notes=list(doc.get("notes", [])),
        )


def mix_features(Phi, pi):
    """Policy-averaged features phi_pi(s) = sum_a pi(a|s) phi(s, a), shape (S, d)."""
    pi = pi.pi if isinstance(pi, Policy) else np.asarray(pi, dtype=float)
    S, A = pi.shape
    Phi = np.asarray(Phi, dtype=float)
    if Phi.shape[0] != S * A:
        raise ValidationError(f"feature matrix has {Phi.shape[0]} rows, expected S*A = {S * A}")
    return np.einsum("sa,sak->sk", pi, Phi.reshape(S, A, -1))


def estimate_rho(dataset: Dataset):
    """Empirical conditional law count(s,a,z) / max(count(z), 1); returns ``(rho_hat, counts)``."""
    m = dataset.meta
    SA = m.S * m.A
    joint = np.bincount(dataset.z * SA + dataset.pairs, minlength=m.Z * SA).reshape(m.Z, SA)
    counts = joint.sum(axis=1)
    rho_hat = joint / np.maximum(counts, 1)[:, None]
    return rho_hat, counts


def estimated_features(rho_hat, Phi):
    return np.asarray(rho_hat) @ np.asarray(Phi)


def _bucket_moments(bucket, n_buckets, bucket_features, r, s_next, S, Fpi):
    n = len(r)
    counts = np.bincount(bucket, minlength=n_buckets).astype(float)
    Sigma = (bucket_features.T * counts) @ bucket_features / n
    Sigma = 0.5 * (Sigma + Sigma.T)
    order = np.argsort(bucket, kind="stable")
    edges = np.searchsorted(bucket[order], np.arange(n_buckets + 1))
    r_sorted = r[order]
    reward_sums = np.array([math.fsum(r_sorted[edges[k] : edges[k + 1]]) for k in range(n_buckets)])
    tau = bucket_features.T @ reward_sums / n
    transitions = np.bincount(bucket * S + s_next, minlength=n_buckets * S).reshape(n_buckets, S)
    B = bucket_features.T @ (transitions @ Fpi) / n
    return Moments(Sigma, tau, B)


def stage_two_moments(dataset: Dataset, phi_hat, policy_features) -> Moments:
    """Sigma_hat, tau_hat and B_hat averaged over the records."""
    if dataset.n < 1:
        raise ValidationError("stage two needs at least one record")
    phi_hat = np.asarray(phi_hat, dtype=float)
    return _bucket_moments(
        dataset.z, dataset.meta.Z, phi_hat, dataset.r, dataset.s_next, dataset.meta.S, np.asarray(policy_features)
    )


def solve_two_stage(moments: Moments, gamma: float, ridge_lambda: float = 0.0):
    """Return ``(w_hat, A_hat, theta_hat)``; ``ridge_lambda = 0`` is the unregularized estimator."""
    if ridge_lambda < 0:
        raise ValidationError("ridge_lambda must be nonnegative")
    Sigma, tau, B = moments
    d = len(tau)
    M = Sigma + ridge_lambda * np.eye(d)
    if not np.all(np.isfinite(M)) or np.linalg.eigvalsh(0.5 * (M + M.T))[0] <= STAGE2_EIG_FLOOR:
        raise NumericalError("stage-2 singular: increase n or λ")
    solved = np.linalg.solve(M, np.column_stack([tau, B]))
    w_hat, A_hat = solved[:, 0], solved[:, 1:]
    bellman = np.eye(d) - gamma * A_hat
    if not np.all(np.isfinite(bellman)) or np.linalg.cond(bellman) > COND_LIMIT:
        raise NumericalError("Bellman solve ill-conditioned")
    theta_hat = np.linalg.solve(bellman, w_hat)
    return w_hat, A_hat, theta_hat


def _check_dims(dataset, Phi, Fpi):
    m = dataset.meta
    if Phi.shape[0] != m.S * m.A or Fpi.shape[0] != m.S:
        raise ValidationError("features do not match the dataset's state/action dimensions")


def estimate(dataset: Dataset, Phi, policy, gamma: float, ridge_lambda: float = 0.0) -> EstimatorOutput:
    """Run both stages on ``dataset`` using only the public features and the target policy."""
    if dataset.n < 1:
        raise ValidationError("empty dataset")
    Phi = np.asarray(Phi, dtype=float)
    Fpi = mix_features(Phi, policy)
    _check_dims(dataset, Phi, Fpi)

    rho_hat, counts = estimate_rho(dataset)
    phi_hat = estimated_features(rho_hat, Phi)
    moments = stage_two_moments(dataset, phi_hat, Fpi)
    sigma_min_hat = float(np.linalg.eigvalsh(moments.Sigma)[0])
    notes = []
    if sigma_min_hat < SIGMA_MIN_WARNING:
        notes.append(f"sigma_min_hat={sigma_min_hat:.3g} below {SIGMA_MIN_WARNING:g}; instrument coverage is weak")
        log.warning(notes[-1])
    if ridge_lambda > 0:
        notes.append(f"ridge-regularized second stage with lambda={ridge_lambda:g}")
    w_hat, A_hat, theta_hat = solve_two_stage(moments, gamma, ridge_lambda)
    return EstimatorOutput(
        stage1=StageOneOutput(rho_hat, phi_hat, counts),
        Sigma_hat=moments.Sigma,
        tau_hat=moments.tau,
        B_hat=moments.B,
        w_hat=w_hat,
        A_hat=A_hat,
        theta_hat=theta_hat,
        V_hat=Fpi @ theta_hat,
        sigma_min_hat=sigma_min_hat,
        ridge_lambda=float(ridge_lambda),
        gamma=float(gamma),
        n=dataset.n,
        policy_features=Fpi,
        notes=notes,
    )


def naive_ols_baseline(dataset: Dataset, Phi, policy, gamma: float) -> np.ndarray:
    """LSTDQ that regresses on the logged pair's own features, ignoring the instrument."""
    Phi = np.asarray(Phi, dtype=float)
    Fpi = mix_features(Phi, policy)
    _check_dims(dataset, Phi, Fpi)
    m = dataset.meta
    moments = _bucket_moments(dataset.pairs, m.S * m.A, Phi, dataset.r, dataset.s_next, m.S, Fpi)
    try:
        _, _, theta = solve_two_stage(moments, gamma)
    except NumericalError as exc:
        raise NumericalError(f"naive baseline: raw-feature Gram matrix is singular ({exc})") from exc
    return Fpi @ theta
