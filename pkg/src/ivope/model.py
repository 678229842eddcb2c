"""Confounded linear MDPs, target policies and exact population quantities.

State-action pairs are flattened row-major: pair ``(s, a)`` lives at index
``s * A + a`` in every ``(S*A, ...)`` array.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import NumericalError, ValidationError

COND_LIMIT = 1e12
KERNEL_SUM_TOL = 1e-10
KERNEL_NEG_TOL = 1e-12
PROB_SUM_TOL = 1e-12
IV_TOL = 1e-10

MODEL_KEYS = ("S", "A", "Z", "d", "gamma", "phi", "nu", "w", "p_z", "rho", "mu", "noise_halfwidth")


def _frozen(x, ndim=None):
    arr = np.array(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ConfounderSpec:
    """Confounder law ``eps = mu(s, a) + U`` with ``U ~ Uniform[-b, b]``."""

    mu: np.ndarray
    noise_halfwidth: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mu", _frozen(self.mu, 1))
        object.__setattr__(self, "noise_halfwidth", float(self.noise_halfwidth))

    def second_moment(self):
        """E[eps^2 | s, a] for every pair."""
        return self.mu**2 + self.noise_halfwidth**2 / 3.0


@dataclass(frozen=True, eq=False)
class ConfoundedMDP:
    S: int
    A: int
    Z: int
    d: int
    Phi: np.ndarray
    Nu: np.ndarray
    w: np.ndarray
    gamma: float
    p_z: np.ndarray
    rho: np.ndarray
    confounder: ConfounderSpec

    def __post_init__(self):
        for name in ("S", "A", "Z", "d"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value}")
            object.__setattr__(self, name, int(value))
        object.__setattr__(self, "Phi", _frozen(self.Phi, 2))
        object.__setattr__(self, "Nu", _frozen(self.Nu, 2))
        object.__setattr__(self, "w", _frozen(self.w, 1))
        object.__setattr__(self, "p_z", _frozen(self.p_z, 1))
        object.__setattr__(self, "rho", _frozen(self.rho, 2))
        object.__setattr__(self, "gamma", float(self.gamma))
        check_dimensions(self)

    @property
    def n_pairs(self):
        return self.S * self.A

    @property
    def reward(self):
        """Mean reward R(s, a) = phi(s, a)^T w, shape (S*A,)."""
        return self.Phi @ self.w

    @property
    def kernel(self):
        """Tabular transition matrix P(s'|s, a), shape (S*A, S)."""
        return self.Phi @ self.Nu.T

    def pair_index(self, s, a):
        return s * self.A + a

    def with_changes(self, **changes) -> ConfoundedMDP:
        fields = {name: getattr(self, name) for name in self.__dataclass_fields__}
        fields.update(changes)
        return ConfoundedMDP(**fields)


@dataclass(frozen=True, eq=False)
class Policy:
    """Target policy; row ``s`` of ``pi`` is the action distribution at ``s``."""

    pi: np.ndarray

    def __post_init__(self):
        pi = _frozen(self.pi, 2)
        if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > PROB_SUM_TOL):
            raise ValidationError("policy rows must be probability vectors")
        object.__setattr__(self, "pi", pi)

    @classmethod
    def uniform(cls, S, A):
        return cls(np.full((S, A), 1.0 / A))

    @classmethod
    def deterministic(cls, actions, A):
        pi = np.zeros((len(actions), A))
        pi[np.arange(len(actions)), actions] = 1.0
        return cls(pi)


class Violation(NamedTuple):
    rule: str
    observed: float
    bound: float


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    # conditions that are reported but do not fail validation
    warnings: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def summary(self):
        if self.ok:
            lines = ["ok"]
        else:
            lines = ["invalid"] + [f"  violation {v.rule}: observed {v.observed!r}, bound {v.bound!r}" for v in self.violations]
        lines += [f"  warning {v.rule}: observed {v.observed!r}, bound {v.bound!r}" for v in self.warnings]
        return "\n".join(lines)


def check_dimensions(model: ConfoundedMDP):
    """Raise on any shape inconsistency; these are hard errors, not report entries."""
    SA = model.S * model.A
    expected = {
        "Phi": (model.Phi.shape, (SA, model.d)),
        "Nu": (model.Nu.shape, (model.S, model.d)),
        "w": (model.w.shape, (model.d,)),
        "p_z": (model.p_z.shape, (model.Z,)),
        "rho": (model.rho.shape, (model.Z, SA)),
        "mu": (model.confounder.mu.shape, (SA,)),
    }
    for name, (got, want) in expected.items():
        if got != want:
            raise ValidationError(f"dimension mismatch: {name} has shape {got}, expected {want}")


def validate_model(model: ConfoundedMDP) -> ValidationReport:
    """List every violated structural assumption of ``model``."""
    check_dimensions(model)
    report = ValidationReport()

    def check(rule, observed, bound, ok):
        if not ok:
            report.violations.append(Violation(rule, float(observed), float(bound)))

    phi_norm = np.linalg.norm(model.Phi, axis=1).max()
    check("‖φ(s,a)‖₂ ≤ 1", phi_norm, 1.0, phi_norm <= 1.0 + 1e-12)
    w_norm = np.linalg.norm(model.w)
    check("‖w‖₂ ≤ 1", w_norm, 1.0, w_norm <= 1.0 + 1e-12)
    check("0 ≤ γ < 1", model.gamma, 1.0, 0.0 <= model.gamma < 1.0)

    P = model.kernel
    check("φ(s,a)ᵀν(s′) ≥ 0", P.min(), -KERNEL_NEG_TOL, P.min() >= -KERNEL_NEG_TOL)
    row_dev = np.abs(P.sum(axis=1) - 1.0).max()
    check("Σ_s′ φ(s,a)ᵀν(s′) = 1", row_dev, KERNEL_SUM_TOL, row_dev <= KERNEL_SUM_TOL)

    check("p_z ≥ 0", model.p_z.min(), 0.0, model.p_z.min() >= 0.0)
    pz_dev = abs(model.p_z.sum() - 1.0)
    check("Σ_z p(z) = 1", pz_dev, PROB_SUM_TOL, pz_dev <= PROB_SUM_TOL)
    check("ρ(s,a|z) ≥ 0", model.rho.min(), 0.0, model.rho.min() >= 0.0)
    rho_dev = np.abs(model.rho.sum(axis=1) - 1.0).max()
    check("Σ_(s,a) ρ(s,a|z) = 1", rho_dev, PROB_SUM_TOL, rho_dev <= PROB_SUM_TOL)

    mu, b = model.confounder.mu, model.confounder.noise_halfwidth
    iv_resid = model.rho @ mu
    worst = int(np.argmax(np.abs(iv_resid)))
    check("E[ε|z]=0", iv_resid[worst], IV_TOL, abs(iv_resid[worst]) <= IV_TOL)
    check("noise halfwidth ≥ 0", b, 0.0, b >= 0.0)
    support = np.abs(mu).max() + b
    check("max|μ| + b ≤ 1", support, 1.0, support <= 1.0 + 1e-12)

    op_norm = max(
        np.linalg.norm(model.Nu.T @ model.Phi[a :: model.A], 2) for a in range(model.A)
    )
    if op_norm > 1.0 + 1e-10:
        # Unattainable for canonical tabular features with A >= 2; reported only.
        report.warnings.append(Violation("sup_a ‖Σ_s ν(s)φ(s,a)ᵀ‖ ≤ 1", float(op_norm), 1.0))
    return report


def require_valid(model: ConfoundedMDP):
    report = validate_model(model)
    if not report.ok:
        raise ValidationError("invalid model:\n" + report.summary())
    return report


def _check_policy(model, policy):
    if policy.pi.shape != (model.S, model.A):
        raise ValidationError(f"policy shape {policy.pi.shape} does not match (S, A) = ({model.S}, {model.A})")


def policy_features(model: ConfoundedMDP, policy: Policy) -> np.ndarray:
    """Policy-averaged features, row ``s`` is sum_a pi(a|s) phi(s, a); shape (S, d)."""
    _check_policy(model, policy)
    Phi = model.Phi.reshape(model.S, model.A, model.d)
    return np.einsum("sa,sak->sk", policy.pi, Phi)


def true_A_matrix(model: ConfoundedMDP, policy: Policy) -> np.ndarray:
    """A = sum_s nu(s) phi_pi(s)^T."""
    return model.Nu.T @ policy_features(model, policy)


def _solve_checked(M, rhs, message):
    if not np.all(np.isfinite(M)) or np.linalg.cond(M) > COND_LIMIT:
        raise NumericalError(message)
    return np.linalg.solve(M, rhs)


def exact_value(model: ConfoundedMDP, policy: Policy):
    """Return ``(theta, V, Q)`` with theta = (I - gamma A)^{-1} w."""
    if not model.gamma < 1.0:
        raise ValidationError("exact_value requires gamma < 1")
    Fpi = policy_features(model, policy)
    M = np.eye(model.d) - model.gamma * (model.Nu.T @ Fpi)
    theta = _solve_checked(M, model.w, "identification failed: I - γA is singular")
    return theta, Fpi @ theta, model.Phi @ theta


def _tabular_kernel(model):
    P = model.kernel
    if P.min() < -KERNEL_NEG_TOL or np.abs(P.sum(axis=1) - 1.0).max() > KERNEL_SUM_TOL:
        raise ValidationError("implied transition kernel is not stochastic")
    return P


def bellman_oracle_value(model: ConfoundedMDP, policy: Policy, tol: float = 1e-10) -> np.ndarray:
    """Policy value by fixed-point iteration on the tabular Bellman operator."""
    if not model.gamma < 1.0 or tol <= 0:
        raise ValidationError("need gamma < 1 and tol > 0")
    _check_policy(model, policy)
    P = _tabular_kernel(model).reshape(model.S, model.A, model.S)
    R = model.reward.reshape(model.S, model.A)
    R_pi = np.einsum("sa,sa->s", policy.pi, R)
    P_pi = np.einsum("sa,sat->st", policy.pi, P)
    gamma = model.gamma
    V = np.zeros(model.S)
    threshold = tol * (1.0 - gamma)
    while True:
        V_new = R_pi + gamma * (P_pi @ V)
        change = np.abs(V_new - V).max()
        V = V_new
        if change < threshold or gamma == 0.0:
            return V


class PopulationMoments(NamedTuple):
    phi_rho: np.ndarray
    Sigma: np.ndarray
    tau: np.ndarray
    B: np.ndarray
    sigma_min: float


def population_moments(model: ConfoundedMDP, policy: Policy) -> PopulationMoments:
    """Conditional features and the second-stage moments under the data law."""
    phi_rho = model.rho @ model.Phi
    weighted = phi_rho * model.p_z[:, None]
    Sigma = weighted.T @ phi_rho
    Sigma = 0.5 * (Sigma + Sigma.T)
    mean_reward_z = model.rho @ (model.reward + model.confounder.mu)
    tau = weighted.T @ mean_reward_z
    next_feature = model.rho @ (model.kernel @ policy_features(model, policy))
    B = weighted.T @ next_feature
    sigma_min = float(np.linalg.eigvalsh(Sigma)[0])
    return PopulationMoments(phi_rho, Sigma, tau, B, sigma_min)


def pair_transition(model: ConfoundedMDP, policy: Policy) -> np.ndarray:
    """Kernel on state-action pairs: T[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')."""
    P = _tabular_kernel(model)
    SA = model.n_pairs
    return (P[:, :, None] * policy.pi[None, :, :]).reshape(SA, SA)


def visitation_measure(model: ConfoundedMDP, policy: Policy, s0: int, tol: float = 1e-12) -> np.ndarray:
    """Normalized discounted occupancy of state-action pairs when starting from ``s0``."""
    _check_policy(model, policy)
    gamma = model.gamma
    x = np.zeros(model.n_pairs)
    x[s0 * model.A : (s0 + 1) * model.A] = policy.pi[s0]
    if gamma == 0.0:
        return x
    T = pair_transition(model, policy)
    total = np.zeros_like(x)
    weight = 1.0
    # remaining mass after t terms is gamma^t
    while weight >= tol:
        total += weight * x
        x = x @ T
        weight *= gamma
    return (1.0 - gamma) * total


def coverage_statistic(model: ConfoundedMDP, policy: Policy, s0: int) -> float:
    """E_{(s,a)~d_{pi,s0}} ||phi(s,a)||^2_{Sigma^{-1}}."""
    mom = population_moments(model, policy)
    if mom.sigma_min <= 0 or np.linalg.cond(mom.Sigma) > COND_LIMIT:
        raise NumericalError("insufficient instrument coverage: Σ is singular")
    occupancy = visitation_measure(model, policy, s0)
    quad = np.einsum("ik,ki->i", model.Phi, np.linalg.solve(mom.Sigma, model.Phi.T))
    return float(occupancy @ quad)


# -- serialization -----------------------------------------------------------


def model_to_dict(model: ConfoundedMDP, policy: Policy | None = None) -> dict:
    doc = {
        "S": model.S,
        "A": model.A,
        "Z": model.Z,
        "d": model.d,
        "gamma": model.gamma,
        "phi": model.Phi.tolist(),
        "nu": model.Nu.tolist(),
        "w": model.w.tolist(),
        "p_z": model.p_z.tolist(),
        "rho": model.rho.tolist(),
        "mu": model.confounder.mu.tolist(),
        "noise_halfwidth": model.confounder.noise_halfwidth,
    }
    if policy is not None:
        doc["pi"] = policy.pi.tolist()
    return doc


def model_from_dict(doc: dict):
    """Return ``(model, policy)``; ``policy`` is None when the document has no ``pi``."""
    missing = [k for k in MODEL_KEYS if k not in doc]
    if missing:
        raise ValidationError(f"model document is missing keys: {', '.join(missing)}")
    model = ConfoundedMDP(
        S=doc["S"],
        A=doc["A"],
        Z=doc["Z"],
        d=doc["d"],
        Phi=doc["phi"],
        Nu=doc["nu"],
        w=doc["w"],
        gamma=doc["gamma"],
        p_z=doc["p_z"],
        rho=doc["rho"],
        confounder=ConfounderSpec(doc["mu"], doc["noise_halfwidth"]),
    )
    policy = Policy(doc["pi"]) if doc.get("pi") is not None else None
    return model, policy


def model_hash(model: ConfoundedMDP) -> str:
    text = json.dumps(model_to_dict(model), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_model(path, model: ConfoundedMDP, policy: Policy | None = None):
    # json writes floats with repr(), which round-trips doubles exactly
    Path(path).write_text(json.dumps(model_to_dict(model, policy), indent=1) + "\n")


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
