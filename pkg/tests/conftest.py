import numpy as np
import pytest

from ivope.datagen import Dataset, Record, build_scenario_confounded, build_scenario_identity, make_rng
from ivope.errors import ValidationError
from ivope.model import ConfoundedMDP, ConfounderSpec, Policy

GAMMAS = (0.0, 0.5, 0.9)


def random_valid_model(seed, gammas=GAMMAS):
    """Random valid model with S, A, Z <= 5; mixes identity and confounded scenarios."""
    rng = make_rng(10_000 + seed)
    gamma = float(gammas[seed % len(gammas)])
    S, A = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    if S * A <= 5 and seed % 4 == 0:
        return build_scenario_identity(S, A, seed, gamma=gamma, noise_halfwidth=0.3)
    Z = int(rng.integers(2, 6))
    d = int(rng.integers(1, min(Z, S * A) + 1))
    return confounded_model(S, A, Z, float(rng.random()), seed, d=d, gamma=gamma)


def confounded_model(S, A, Z, strength, seed, **kwargs):
    """``build_scenario_confounded`` retried on fresh seeds past coverage failures."""
    for attempt in range(20):
        try:
            return build_scenario_confounded(S, A, Z, strength, seed + 1000 * attempt, **kwargs)
        except ValidationError:
            continue
    raise RuntimeError("could not build a confounded model")


def scalar_chain(gamma=0.5):
    """S = A = Z = d = 1 with phi = nu = w = 1."""
    return ConfoundedMDP(
        S=1, A=1, Z=1, d=1, Phi=[[1.0]], Nu=[[1.0]], w=[1.0], gamma=gamma, p_z=[1.0], rho=[[1.0]],
        confounder=ConfounderSpec([0.0], 0.0),
    )


def dyadic_model(noise_halfwidth=0.0):
    """S=2, A=2, Z=4 unconfounded model whose probabilities are multiples of 1/8."""
    P = np.array([[0.75, 0.25], [0.5, 0.5], [0.125, 0.875], [0.25, 0.75]])
    rho = np.array(
        [
            [0.5, 0.25, 0.125, 0.125],
            [0.125, 0.5, 0.25, 0.125],
            [0.125, 0.125, 0.5, 0.25],
            [0.25, 0.125, 0.125, 0.5],
        ]
    )
    model = ConfoundedMDP(
        S=2, A=2, Z=4, d=4, Phi=np.eye(4), Nu=P.T, w=np.array([0.5, -0.25, 0.625, 0.125]), gamma=0.75,
        p_z=np.full(4, 0.25), rho=rho, confounder=ConfounderSpec(np.zeros(4), noise_halfwidth),
    )
    return model, Policy([[0.5, 0.5], [0.25, 0.75]])


def enumerated_dataset(model, N=1024, noise=()):
    """Dataset whose empirical law equals the model's exactly.

    Each cell (z, pair, s') appears N p(z) rho(pair|z) P(s'|pair) times; with
    ``noise`` values the cell is repeated once per value, rewards shifted by it.
    """
    records = []
    shifts = tuple(noise) or (0.0,)
    for z in range(model.Z):
        for p in range(model.n_pairs):
            for s_next in range(model.S):
                count = N * model.p_z[z] * model.rho[z, p] * model.kernel[p, s_next]
                assert count == int(count)
                for e in shifts:
                    records += [Record(p // model.A, p % model.A, z, float(model.reward[p] + e), s_next)] * int(count)
    return Dataset.from_records(records, model.S, model.A, model.Z)


@pytest.fixture
def identity22():
    return build_scenario_identity(2, 2, seed=3)


@pytest.fixture
def confounded333():
    return build_scenario_confounded(3, 3, 3, 1.0, seed=0)


@pytest.fixture
def uniform_policy():
    return lambda model: Policy.uniform(model.S, model.A)
