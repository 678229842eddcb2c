"""Scenario builders, the offline data sampler and dataset CSV I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import DatasetFormatError, ValidationError
from .model import (
    ConfoundedMDP,
    ConfounderSpec,
    Policy,
    model_hash,
    population_moments,
    require_valid,
)

SIGMA_MIN_FLOOR = 1e-4
MAX_RHO_RESAMPLES = 100

HEADER = ("s", "a", "z", "r", "s_next")


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator keyed by a single 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


class Record(NamedTuple):
    s: int
    a: int
    z: int
    r: float
    s_next: int
    eps: Optional[float] = None


@dataclass(frozen=True)
class DatasetMeta:
    n: int
    S: int
    A: int
    Z: int
    seed: Optional[int] = None
    model_hash: Optional[str] = None


@dataclass(eq=False)
class Dataset:
    """Column-oriented store of ``n`` logged transitions ``(s, a, z, r, s')``.

    ``eps`` is generator-side debug output and is never read by estimators.
    """

    s: np.ndarray
    a: np.ndarray
    z: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    meta: DatasetMeta
    eps: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.int64)
        self.a = np.asarray(self.a, dtype=np.int64)
        self.z = np.asarray(self.z, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=float)
        self.s_next = np.asarray(self.s_next, dtype=np.int64)
        if self.eps is not None:
            self.eps = np.asarray(self.eps, dtype=float)
        n = self.meta.n
        for col in (self.s, self.a, self.z, self.r, self.s_next):
            if col.shape != (n,):
                raise ValidationError(f"column length {col.shape} does not match n={n}")
        m = self.meta
        for name, col, bound in (("state", self.s, m.S), ("action", self.a, m.A), ("instrument", self.z, m.Z), ("next state", self.s_next, m.S)):
            if n and (col.min() < 0 or col.max() >= bound):
                raise ValidationError(f"{name} index out of range")

    @property
    def n(self):
        return self.meta.n

    @property
    def pairs(self):
        """Flat state-action index ``s * A + a`` per record."""
        return self.s * self.meta.A + self.a

    def __len__(self):
        return self.meta.n

    def record(self, i) -> Record:
        eps = None if self.eps is None else float(self.eps[i])
        return Record(int(self.s[i]), int(self.a[i]), int(self.z[i]), float(self.r[i]), int(self.s_next[i]), eps)

    @property
    def records(self):
        return [self.record(i) for i in range(self.n)]

    def take(self, index) -> Dataset:
        """Sub-dataset (or reordering, or duplication) by integer index."""
        index = np.asarray(index)
        meta = DatasetMeta(len(index), self.meta.S, self.meta.A, self.meta.Z, self.meta.seed, self.meta.model_hash)
        eps = None if self.eps is None else self.eps[index]
        return Dataset(self.s[index], self.a[index], self.z[index], self.r[index], self.s_next[index], meta, eps)

    def with_rewards(self, r) -> Dataset:
        return Dataset(self.s, self.a, self.z, r, self.s_next, self.meta, self.eps)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        dims = lambda m: (m.n, m.S, m.A, m.Z)  # noqa: E731
        same_eps = (self.eps is None and other.eps is None) or (
            self.eps is not None and other.eps is not None and np.array_equal(self.eps, other.eps)
        )
        return (
            dims(self.meta) == dims(other.meta)
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in ("s", "a", "z", "r", "s_next"))
            and same_eps
        )

    @classmethod
    def from_records(cls, records, S, A, Z):
        records = list(records)
        cols = list(zip(*records)) if records else [[]] * 6
        eps = None
        if records and all(rec.eps is not None for rec in records):
            eps = cols[5]
        return cls(cols[0], cols[1], cols[2], cols[3], cols[4], DatasetMeta(len(records), S, A, Z), eps)


def _categorical(rng, cdf_rows, u):
    """Inverse-CDF draw; ``cdf_rows[i]`` is the cumulative distribution for draw ``i``."""
    k = (u[:, None] > cdf_rows).sum(axis=1)
    return np.minimum(k, cdf_rows.shape[1] - 1)


def sample_dataset(model: ConfoundedMDP, n: int, seed: int, emit_eps: bool = False) -> Dataset:
    """Draw ``n`` i.i.d. records: z ~ p, (s,a) ~ rho(.|z), eps ~ P_E(.|s,a), r = R + eps, s' ~ P(.|s,a)."""
    if int(n) != n or n < 1:
        raise ValidationError("n must be a positive integer")
    n = int(n)
    require_valid(model)
    rng = make_rng(seed)

    z_cdf = np.cumsum(model.p_z)[None, :]
    z = _categorical(rng, np.broadcast_to(z_cdf, (n, model.Z)), rng.random(n))
    rho_cdf = np.cumsum(model.rho, axis=1)
    pair = _categorical(rng, rho_cdf[z], rng.random(n))
    b = model.confounder.noise_halfwidth
    eps = model.confounder.mu[pair] + b * (2.0 * rng.random(n) - 1.0)
    r = model.reward[pair] + eps
    P_cdf = np.cumsum(np.clip(model.kernel, 0.0, None), axis=1)
    s_next = _categorical(rng, P_cdf[pair], rng.random(n))

    meta = DatasetMeta(n, model.S, model.A, model.Z, int(seed), model_hash(model))
    return Dataset(pair // model.A, pair % model.A, z, r, s_next, meta, eps if emit_eps else None)


def _random_policy(rng, S, A):
    return Policy(rng.dirichlet(np.ones(A), size=S))


def _unit_direction(rng, d, positive=False):
    u = rng.random(d) if positive else rng.uniform(-1.0, 1.0, d)
    return u / np.linalg.norm(u)


def build_scenario_identity(S, A, seed, *, gamma=0.5, noise_halfwidth=0.0):
    """Tabular MDP in canonical features with the instrument equal to the state-action pair."""
    if S < 1 or A < 1:
        raise ValidationError("S and A must be positive")
    rng = make_rng(seed)
    SA = S * A
    P = rng.dirichlet(np.ones(S), size=SA)
    w = _unit_direction(rng, SA, positive=True)
    p_z = rng.dirichlet(np.full(SA, 2.0))
    policy = _random_policy(rng, S, A)
    model = ConfoundedMDP(
        S=S,
        A=A,
        Z=SA,
        d=SA,
        Phi=np.eye(SA),
        Nu=P.T,
        w=w,
        gamma=gamma,
        p_z=p_z,
        rho=np.eye(SA),
        confounder=ConfounderSpec(np.zeros(SA), noise_halfwidth),
    )
    require_valid(model)
    return model, policy


def project_out_instrument_mean(rho, mu0):
    """Project ``mu0`` onto the null space of ``rho`` so every ``sum_(s,a) rho(s,a|z) mu(s,a)`` vanishes."""
    Q, R = np.linalg.qr(rho.T)
    rank = int(np.sum(np.abs(np.diag(R)) > 1e-12 * max(1.0, np.abs(R).max())))
    Q = Q[:, :rank]
    mu = mu0 - Q @ (Q.T @ mu0)
    # one refinement pass keeps the residual at rounding level
    return mu - Q @ (Q.T @ mu)


def build_scenario_confounded(
    S,
    A,
    Z,
    confound_strength,
    seed,
    *,
    d=None,
    gamma=0.5,
    noise_halfwidth=0.5,
    rho_concentration=0.5,
    phi_concentration=0.5,
):
    """Random low-rank confounded MDP whose instrument satisfies E[eps|z] = 0 exactly.

    Features are points of the probability simplex in R^d and ``nu`` stacks
    ``d`` latent next-state distributions, so ``phi^T nu`` is a valid kernel.
    The confounder mean is the projection of a random vector onto the null
    space of the instrument averaging map, rescaled so that
    ``max|mu| = confound_strength * (1 - noise_halfwidth)``.
    """
    if Z < 2:
        raise ValidationError("confounded scenarios need Z >= 2")
    if not 0.0 <= confound_strength <= 1.0:
        raise ValidationError("confound_strength must lie in [0, 1]")
    if not 0.0 <= noise_halfwidth <= 1.0:
        raise ValidationError("noise_halfwidth must lie in [0, 1]")
    SA = S * A
    d = min(Z, SA) if d is None else int(d)
    rng = make_rng(seed)

    Phi = rng.dirichlet(np.full(d, phi_concentration), size=SA)
    Nu = rng.dirichlet(np.ones(S), size=d).T
    w = _unit_direction(rng, d)
    p_z = rng.dirichlet(np.full(Z, 2.0))
    policy = _random_policy(rng, S, A)

    for _ in range(MAX_RHO_RESAMPLES):
        rho = 0.98 * rng.dirichlet(np.full(SA, rho_concentration), size=Z) + 0.02 / SA
        rho /= rho.sum(axis=1, keepdims=True)
        phi_rho = rho @ Phi
        Sigma = (phi_rho * p_z[:, None]).T @ phi_rho
        if np.linalg.eigvalsh(Sigma)[0] >= SIGMA_MIN_FLOOR:
            break
    else:
        raise ValidationError("scenario coverage failure: σ_min(Σ) < 1e-4 after 100 resamples")

    mu = project_out_instrument_mean(rho, rng.uniform(-1.0, 1.0, SA))
    peak = np.abs(mu).max()
    if peak > 1e-12 and confound_strength > 0:
        mu = mu * (confound_strength * (1.0 - noise_halfwidth) / peak)
    else:
        mu = np.zeros(SA)

    model = ConfoundedMDP(
        S=S,
        A=A,
        Z=Z,
        d=d,
        Phi=Phi,
        Nu=Nu,
        w=w,
        gamma=gamma,
        p_z=p_z,
        rho=rho,
        confounder=ConfounderSpec(mu, noise_halfwidth),
    )
    require_valid(model)
    assert population_moments(model, policy).sigma_min >= SIGMA_MIN_FLOOR * 0.5
    return model, policy


# -- CSV ---------------------------------------------------------------------


def write_dataset(dataset: Dataset, path):
    header = list(HEADER) + (["eps"] if dataset.eps is not None else [])
    lines = [",".join(header)]
    cols = (dataset.s, dataset.a, dataset.z, dataset.r, dataset.s_next)
    for i in range(dataset.n):
        row = "%d,%d,%d,%.17g,%d" % tuple(c[i] for c in cols)
        if dataset.eps is not None:
            row += ",%.17g" % dataset.eps[i]
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_index(token, name, line, bound):
    try:
        value = int(token)
    except ValueError:
        raise DatasetFormatError(f"malformed {name} index {token!r}", line) from None
    if value < 0 or (bound is not None and value >= bound):
        raise DatasetFormatError(f"{name} index out of range", line)
    return value


def read_dataset(path, S=None, A=None, Z=None) -> Dataset:
    """Parse a dataset CSV; indices are range-checked against any dims given.

    Dims not given are inferred as ``max index + 1``. Seed and model hash
    are not stored in the file and come back as ``None``.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError("missing header", 1)
    header = tuple(t.strip() for t in lines[0].split(","))
    if header not in (HEADER, HEADER + ("eps",)):
        raise DatasetFormatError(f"missing header (got {lines[0]!r})", 1)
    has_eps = len(header) == 6

    cols = [[] for _ in range(6)]
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        tokens = raw.split(",")
        if len(tokens) != len(header):
            raise DatasetFormatError(f"malformed row: expected {len(header)} fields, got {len(tokens)}", lineno)
        cols[0].append(_parse_index(tokens[0], "state", lineno, S))
        cols[1].append(_parse_index(tokens[1], "action", lineno, A))
        cols[2].append(_parse_index(tokens[2], "instrument", lineno, Z))
        try:
            cols[3].append(float(tokens[3]))
            if has_eps:
                cols[5].append(float(tokens[5]))
        except ValueError:
            raise DatasetFormatError("malformed reward", lineno) from None
        cols[4].append(_parse_index(tokens[4], "next state", lineno, S))
    if not cols[0]:
        raise DatasetFormatError("empty dataset")

    S = S if S is not None else max(max(cols[0]), max(cols[4])) + 1
    A = A if A is not None else max(cols[1]) + 1
    Z = Z if Z is not None else max(cols[2]) + 1
    meta = DatasetMeta(len(cols[0]), S, A, Z)
    return Dataset(cols[0], cols[1], cols[2], cols[3], cols[4], meta, cols[5] if has_eps else None)
