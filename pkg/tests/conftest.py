import numpy as np
import pytest

from vdpfit.model import ObservationSet, State, VdpParams, simulate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(rng, m, nonlinear=True):
    a1 = rng.uniform(0.5, 2.5, m) if nonlinear else np.zeros(m)
    alpha = np.column_stack([a1, rng.uniform(-1.5, 1.5, m)])
    coupling = rng.uniform(-0.5, 0.5, (m, m))
    return VdpParams(alpha=alpha, coupling=coupling)


def random_state(rng, m, scale=1.0):
    return State(x1=rng.normal(0, scale, m), x2=rng.normal(0, scale, m))


def simulated_obs(params, s0, n, dt, noise=0.0, seed=0):
    """Simulate and return (trajectory, observations of x1 + optional noise)."""
    traj = simulate(params, s0, n, dt)
    x1 = traj.x1
    if noise:
        x1 = x1 + np.random.default_rng(seed).normal(0.0, noise, x1.shape)
    return traj, ObservationSet(x1)
