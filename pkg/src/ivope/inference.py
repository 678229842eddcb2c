"""Plug-in asymptotic inference for the two-stage value estimator.

The influence function of ``theta_hat`` is ``h = f + J g`` where ``f`` is the
second-stage score, ``g`` the one-hot indicator of the record's
``(s, a, z)`` cell and ``J`` the chain-rule correction for having estimated
the conditional law from the same data:

    J = d E_n[f] / d rho  @  d normalizer / d x  evaluated at x = E_n[g].

The prefactor ``(I - gamma A)^{-1} (Sigma + lambda I)^{-1}`` is held fixed
when differentiating with respect to rho. All population quantities are
replaced by their estimates.

Flat cell layout: ``(s, a, z)`` maps to ``(s * A + a) * Z + z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import sparse

from .datagen import Dataset, Record
from .errors import NumericalError, ValidationError
from .estimator import EstimatorOutput
from .model import ConfoundedMDP, Policy, policy_features, population_moments

PSD_TOL = 1e-10


class InfluenceComponents(NamedTuple):
    G_factor: np.ndarray  # (d, d)
    theta: np.ndarray  # (d,)
    phi_hat: np.ndarray  # (Z, d)
    policy_features: np.ndarray  # (S, d)
    rho_hat: np.ndarray  # (Z, S*A)
    counts: np.ndarray  # (Z,)
    Phi: np.ndarray  # (S*A, d)
    gamma: float


class DatasetContext(NamedTuple):
    grad: np.ndarray  # (d, S*A*Z)
    jacobian: sparse.csr_matrix  # (S*A*Z, S*A*Z)
    correction: np.ndarray  # J, (d, S*A*Z)


@dataclass
class CovarianceEstimate:
    cov_V: np.ndarray
    cov_theta_dir: np.ndarray
    n: int
    # variance ignoring the first-stage correction, kept for diagnostics
    cov_V_f_only: np.ndarray | None = None


@dataclass(frozen=True)
class ConfidenceInterval:
    state: int
    lo: float
    hi: float
    level: float

    @property
    def width(self):
        return self.hi - self.lo


def components_from_estimate(est: EstimatorOutput, Phi) -> InfluenceComponents:
    d = len(est.theta_hat)
    ridge = est.Sigma_hat + est.ridge_lambda * np.eye(d)
    G = np.linalg.solve(np.eye(d) - est.gamma * est.A_hat, np.linalg.solve(ridge, np.eye(d)))
    if not np.all(np.isfinite(G)):
        raise NumericalError("influence prefactor is not finite")
    return InfluenceComponents(
        G_factor=G,
        theta=np.asarray(est.theta_hat, dtype=float),
        phi_hat=np.asarray(est.stage1.phi_hat, dtype=float),
        policy_features=np.asarray(est.policy_features, dtype=float),
        rho_hat=np.asarray(est.stage1.rho_hat, dtype=float),
        counts=np.asarray(est.stage1.counts),
        Phi=np.asarray(Phi, dtype=float),
        gamma=float(est.gamma),
    )


def _td_residual(r, z, s_next, comp):
    return r + comp.gamma * (comp.policy_features[s_next] @ comp.theta) - comp.phi_hat[z] @ comp.theta


def influence_f(record: Record, comp: InfluenceComponents) -> np.ndarray:
    """Second-stage score G phi_hat(z) (r + gamma phi_pi(s')^T theta - phi_hat(z)^T theta)."""
    resid = _td_residual(record.r, record.z, record.s_next, comp)
    return comp.G_factor @ (comp.phi_hat[record.z] * resid)


def influence_f_all(dataset: Dataset, comp: InfluenceComponents) -> np.ndarray:
    """``influence_f`` for every record, shape (n, d)."""
    resid = _td_residual(dataset.r, dataset.z, dataset.s_next, comp)
    return (comp.phi_hat[dataset.z] * resid[:, None]) @ comp.G_factor.T


def indicator_g(record: Record, S: int, A: int, Z: int) -> int:
    """Flat position of the one-hot cell ``(s, a, z)``."""
    if not (0 <= record.s < S and 0 <= record.a < A and 0 <= record.z < Z):
        raise ValidationError(f"record indices out of range: {record}")
    return (record.s * A + record.a) * Z + record.z


def cell_index(dataset: Dataset) -> np.ndarray:
    return dataset.pairs * dataset.meta.Z + dataset.z


def mean_indicator(dataset: Dataset) -> np.ndarray:
    """E_n[g]: empirical joint frequencies over the S*A*Z cells."""
    m = dataset.meta
    return np.bincount(cell_index(dataset), minlength=m.S * m.A * m.Z) / dataset.n


def _blocks(x, SA, Z):
    x = np.asarray(x, dtype=float)
    if x.shape != (SA * Z,):
        raise ValidationError(f"expected a vector of length {SA * Z}, got shape {x.shape}")
    return x.reshape(SA, Z)


def normalizer_d(x, S: int, A: int, Z: int) -> np.ndarray:
    """Per-instrument normalization: joint frequencies to conditional frequencies."""
    X = _blocks(x, S * A, Z)
    totals = X.sum(axis=0)
    empty = np.flatnonzero(totals <= 0)
    if empty.size:
        raise ValidationError(f"instrument never observed: {int(empty[0])}")
    return (X / totals).ravel()


def jacobian_d(x, S: int, A: int, Z: int, allow_empty: bool = False) -> sparse.csr_matrix:
    """Analytic Jacobian of ``normalizer_d``; blocks couple only cells sharing an instrument.

    With ``allow_empty`` the rows and columns of unobserved instruments are
    left at zero instead of raising.
    """
    SA = S * A
    X = _blocks(x, SA, Z)
    totals = X.sum(axis=0)
    if not allow_empty and np.any(totals <= 0):
        raise ValidationError(f"instrument never observed: {int(np.flatnonzero(totals <= 0)[0])}")
    rows, cols, vals = [], [], []
    pairs = np.arange(SA)
    for z in np.flatnonzero(totals > 0):
        T = totals[z]
        idx = pairs * Z + z
        # entry (p, q) of the block: (1{p == q} T - x_p) / T^2
        block = (np.eye(SA) * T - X[:, z][:, None]) / T**2
        rows.append(np.repeat(idx, SA))
        cols.append(np.tile(idx, SA))
        vals.append(block.ravel())
    n = SA * Z
    if not rows:
        return sparse.csr_matrix((n, n))
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def grad_rho_Ef(dataset: Dataset, comp: InfluenceComponents) -> np.ndarray:
    """Derivative of E_n[f] with respect to each rho(s, a | z), shape (d, S*A*Z).

    Both occurrences of phi_rho(z_i) inside f move with rho, the prefactor
    and theta do not.
    """
    m = dataset.meta
    SA, Z = m.S * m.A, m.Z
    n = dataset.n
    resid = _td_residual(dataset.r, dataset.z, dataset.s_next, comp)
    order = np.argsort(dataset.z, kind="stable")
    edges = np.searchsorted(dataset.z[order], np.arange(Z + 1))
    resid_sorted = resid[order]
    resid_sums = np.array([math.fsum(resid_sorted[edges[z] : edges[z + 1]]) for z in range(Z)])
    counts = np.diff(edges).astype(float)

    Phi = comp.Phi
    q = Phi @ comp.theta  # phi(s,a)^T theta
    # inner[k, p, z] = phi_k(p) * sum_{i in z} resid_i - n_z * phi_hat_k(z) * q(p)
    inner = Phi.T[:, :, None] * resid_sums[None, None, :] - (comp.phi_hat.T * counts)[:, None, :] * q[None, :, None]
    grad = np.einsum("jk,kpz->jpz", comp.G_factor, inner) / n
    return grad.reshape(len(comp.theta), SA * Z)


def dataset_context(dataset: Dataset, comp: InfluenceComponents) -> DatasetContext:
    m = dataset.meta
    grad = grad_rho_Ef(dataset, comp)
    jac = jacobian_d(mean_indicator(dataset), m.S, m.A, m.Z, allow_empty=True)
    correction = np.asarray((jac.T @ grad.T).T)
    return DatasetContext(grad, jac, correction)


def influence_h(record: Record, context: DatasetContext, comp: InfluenceComponents, dims) -> np.ndarray:
    """h = f + J g for one record; ``dims`` is ``(S, A, Z)``."""
    return influence_f(record, comp) + context.correction[:, indicator_g(record, *dims)]


def influence_h_all(dataset: Dataset, context: DatasetContext, comp: InfluenceComponents) -> np.ndarray:
    return influence_f_all(dataset, comp) + context.correction[:, cell_index(dataset)].T


def _centered_cov(H):
    Hc = H - H.mean(axis=0)
    cov = Hc.T @ Hc / H.shape[0]
    return 0.5 * (cov + cov.T)


def asymptotic_covariance(dataset: Dataset, est: EstimatorOutput, Phi) -> CovarianceEstimate:
    """Plug-in covariance of sqrt(n) (V_hat - V) from the sample covariance (divisor n) of h."""
    if dataset.n < 2:
        raise ValidationError("asymptotic covariance needs n >= 2")
    comp = components_from_estimate(est, Phi)
    context = dataset_context(dataset, comp)
    F = influence_f_all(dataset, comp)
    H = F + context.correction[:, cell_index(dataset)].T
    cov_theta = _centered_cov(H)
    Fpi = comp.policy_features
    sym = lambda M: 0.5 * (M + M.T)  # noqa: E731
    return CovarianceEstimate(
        cov_V=sym(Fpi @ cov_theta @ Fpi.T),
        cov_theta_dir=cov_theta,
        n=dataset.n,
        cov_V_f_only=sym(Fpi @ _centered_cov(F) @ Fpi.T),
    )


# Acklam's rational approximation, refined by one Halley step
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02, 1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02, 6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00, -2.549671058254225e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00, 3.754408661907416e00)
_P_LOW = 0.02425


def normal_quantile(p: float) -> float:
    """Inverse of the standard normal CDF."""
    if not 0.0 < p < 1.0:
        raise ValidationError("quantile level must lie in (0, 1)")
    if p < _P_LOW or p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log(min(p, 1.0 - p)))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
        if p > 0.5:
            x = -x
    else:
        q = p - 0.5
        t = q * q
        x = (((((_A[0] * t + _A[1]) * t + _A[2]) * t + _A[3]) * t + _A[4]) * t + _A[5]) * q / (
            ((((_B[0] * t + _B[1]) * t + _B[2]) * t + _B[3]) * t + _B[4]) * t + 1.0
        )
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def confidence_intervals(V_hat, cov, n: int, level: float = 0.95):
    """Per-state normal intervals V_hat(s) +- q((1+level)/2) sqrt(cov_V[s,s] / n)."""
    if not 0.0 < level < 1.0:
        raise ValidationError("level must lie in (0, 1)")
    cov_V = cov.cov_V if isinstance(cov, CovarianceEstimate) else np.asarray(cov, dtype=float)
    diag = np.diag(cov_V)
    if np.any(diag < -PSD_TOL):
        raise ValidationError("covariance has a negative diagonal entry")
    z = normal_quantile((1.0 + level) / 2.0)
    half = z * np.sqrt(np.clip(diag, 0.0, None) / n)
    return [
        ConfidenceInterval(s, float(v - hw), float(v + hw), level) for s, (v, hw) in enumerate(zip(np.asarray(V_hat), half))
    ]


def bandit_variance(model: ConfoundedMDP, policy: Policy) -> float:
    """Asymptotic variance of sqrt(n) (V_hat - V) for a confounded bandit (gamma = 0, one state)."""
    if model.gamma != 0.0 or model.S != 1:
        raise ValidationError("bandit_variance requires gamma = 0 and S = 1")
    mom = population_moments(model, policy)
    sigma2 = model.rho @ model.confounder.second_moment()
    weighted = mom.phi_rho * (model.p_z * sigma2)[:, None]
    meat = weighted.T @ mom.phi_rho
    phi_pi = policy_features(model, policy)[0]
    v = np.linalg.solve(mom.Sigma, phi_pi)
    return float(v @ meat @ v)
