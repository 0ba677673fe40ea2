"""Coupled van der Pol dynamics: vector field, Euler stepping, and step Jacobians.

Each component i carries an observed activity variable x1_i and a hidden
excitability variable x2_i:

    dx1_i/dt = a1_i * x1_i * (1 - x1_i^2) + a2_i * x2_i + sum_j W_ij * x1_j
    dx2_i/dt = -x1_i

Discrete trajectories use the explicit Euler map g(s) = s + dt * f(s), with an
optional substep count for stiff parameter regimes (dt/n applied n times).

Flat state vectors interleave the two variables per component: component i of
a single time sample occupies slots (2i, 2i+1) = (x1_i, x2_i).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIVERGENCE_LIMIT = 1e6


class DimensionError(ValueError):
    """Shape disagreement between parameters, states, or observations."""


class SimulationDiverged(RuntimeError):
    """Raised when a simulated state leaves the divergence guard box."""

    def __init__(self, step: int, limit: float):
        self.step = step
        self.limit = limit
        super().__init__(f"state magnitude exceeded {limit:g} at step {step}")


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class VdpParams:
    """Oscillator parameters: per-component gains `alpha` (m x 2 rows of
    (a1_i, a2_i)) and the coupling matrix `coupling` (m x m, row i = inputs
    into component i)."""

    alpha: np.ndarray
    coupling: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        coupling = np.atleast_2d(np.asarray(self.coupling, dtype=float))
        m = alpha.shape[0]
        if alpha.shape != (m, 2):
            raise DimensionError(f"alpha must be (m, 2), got {alpha.shape}")
        if coupling.shape != (m, m):
            raise DimensionError(
                f"coupling must be ({m}, {m}) to match alpha, got {coupling.shape}"
            )
        _check_finite(alpha, "alpha")
        _check_finite(coupling, "coupling")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "coupling", coupling)

    @property
    def m(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_params(self) -> int:
        return 2 * self.m + self.m * self.m

    def to_vector(self) -> np.ndarray:
        """Flatten as [a1_1..a1_m, a2_1..a2_m, W row-major]."""
        return np.concatenate(
            [self.alpha[:, 0], self.alpha[:, 1], self.coupling.ravel()]
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray, m: int) -> "VdpParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (2 * m + m * m,):
            raise DimensionError(f"expected {2 * m + m * m} entries, got {vec.shape}")
        alpha = np.stack([vec[:m], vec[m : 2 * m]], axis=1)
        coupling = vec[2 * m :].reshape(m, m)
        return cls(alpha=alpha, coupling=coupling)


@dataclass(frozen=True)
class State:
    """One time sample: activity `x1` and hidden excitability `x2`, each (m,)."""

    x1: np.ndarray
    x2: np.ndarray

    def __post_init__(self):
        x1 = np.atleast_1d(np.asarray(self.x1, dtype=float))
        x2 = np.atleast_1d(np.asarray(self.x2, dtype=float))
        if x1.shape != x2.shape or x1.ndim != 1:
            raise DimensionError(f"x1/x2 must be equal-length vectors, got {x1.shape} and {x2.shape}")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)

    @property
    def m(self) -> int:
        return self.x1.shape[0]

    def to_flat(self) -> np.ndarray:
        """Interleave as [x1_1, x2_1, x1_2, x2_2, ...]."""
        out = np.empty(2 * self.m)
        out[0::2] = self.x1
        out[1::2] = self.x2
        return out

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "State":
        flat = np.asarray(flat, dtype=float)
        if flat.ndim != 1 or flat.size % 2:
            raise DimensionError(f"flat state must have even length, got {flat.shape}")
        return cls(x1=flat[0::2].copy(), x2=flat[1::2].copy())


@dataclass(frozen=True)
class Trajectory:
    """N consecutive samples on a uniform grid: `x1` and `x2` are (N, m), plus dt."""

    x1: np.ndarray
    x2: np.ndarray
    dt: float

    def __post_init__(self):
        x1 = np.atleast_2d(np.asarray(self.x1, dtype=float))
        x2 = np.atleast_2d(np.asarray(self.x2, dtype=float))
        if x1.shape != x2.shape:
            raise DimensionError(f"x1/x2 shape mismatch: {x1.shape} vs {x2.shape}")
        if x1.shape[0] < 2:
            raise ValueError("a trajectory needs at least 2 samples")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)

    @property
    def n_steps(self) -> int:
        return self.x1.shape[0]

    @property
    def m(self) -> int:
        return self.x1.shape[1]

    def state(self, k: int) -> State:
        return State(x1=self.x1[k].copy(), x2=self.x2[k].copy())


@dataclass(frozen=True)
class ObservationSet:
    """Observed activity tracks: `values` is (N, m), one column per component.

    Only x1 is ever observed; x2 must be inferred.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.ndim != 2:
            raise DimensionError(f"values must be (N, m), got {values.shape}")
        _check_finite(values, "observations")
        object.__setattr__(self, "values", values)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


def _field_arrays(
    alpha: np.ndarray, coupling: np.ndarray, x1: np.ndarray, x2: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vector field on raw arrays; x1/x2 may be (m,) or batched (..., m)."""
    dx1 = alpha[:, 0] * x1 * (1.0 - x1 * x1) + alpha[:, 1] * x2 + x1 @ coupling.T
    return dx1, -x1


def vector_field(params: VdpParams, s: State) -> tuple[np.ndarray, np.ndarray]:
    """Time derivative (dx1, dx2) at state `s`."""
    if s.m != params.m:
        raise DimensionError(f"state has {s.m} components, params have {params.m}")
    return _field_arrays(params.alpha, params.coupling, s.x1, s.x2)


def step(params: VdpParams, s: State, dt: float, substeps: int = 1) -> State:
    """One explicit Euler sample: s + dt * f(s), optionally split into substeps."""
    if s.m != params.m:
        raise DimensionError(f"state has {s.m} components, params have {params.m}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = dt / substeps
    x1, x2 = s.x1, s.x2
    for _ in range(substeps):
        dx1, dx2 = _field_arrays(params.alpha, params.coupling, x1, x2)
        x1 = x1 + h * dx1
        x2 = x2 + h * dx2
    return State(x1=x1, x2=x2)


def simulate(
    params: VdpParams,
    s0: State,
    n_steps: int,
    dt: float = 1.0,
    substeps: int = 1,
    divergence_limit: float = DIVERGENCE_LIMIT,
) -> Trajectory:
    """Integrate `n_steps` samples starting from (and including) `s0`.

    Raises SimulationDiverged naming the first step whose state magnitude
    exceeds `divergence_limit`.
    """
    if s0.m != params.m:
        raise DimensionError(f"state has {s0.m} components, params have {params.m}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    m = params.m
    x1 = np.empty((n_steps, m))
    x2 = np.empty((n_steps, m))
    x1[0], x2[0] = s0.x1, s0.x2
    alpha, coupling = params.alpha, params.coupling
    h = dt / substeps
    cur1, cur2 = s0.x1.astype(float), s0.x2.astype(float)
    for k in range(1, n_steps):
        for _ in range(substeps):
            d1, d2 = _field_arrays(alpha, coupling, cur1, cur2)
            cur1 = cur1 + h * d1
            cur2 = cur2 + h * d2
        if not (
            np.all(np.abs(cur1) <= divergence_limit)
            and np.all(np.abs(cur2) <= divergence_limit)
        ):
            raise SimulationDiverged(step=k, limit=divergence_limit)
        x1[k], x2[k] = cur1, cur2
    return Trajectory(x1=x1, x2=x2, dt=dt)


def _euler_jacobians(
    params: VdpParams, x1: np.ndarray, x2: np.ndarray, h: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Jacobians of the single Euler substep s + h*f(s) at one state.

    Returns (d/dstate (2m x 2m), d/dalpha (2m x 2m), d/dW (2m x m^2)) in the
    interleaved state layout and the [a1 block, a2 block, W row-major]
    parameter column order.
    """
    m = params.m
    a1 = params.alpha[:, 0]
    a2 = params.alpha[:, 1]
    W = params.coupling
    r1 = 2 * np.arange(m)  # x1 rows
    r2 = r1 + 1  # x2 rows

    jx = np.zeros((2 * m, 2 * m))
    # dx1_i rows: self term, excitability term, coupling row
    jx[np.ix_(r1, r1)] = h * W
    jx[r1, r1] += 1.0 + h * a1 * (1.0 - 3.0 * x1 * x1)
    jx[r1, r2] = h * a2
    # dx2_i rows
    jx[r2, r1] = -h
    jx[r2, r2] = 1.0

    ja = np.zeros((2 * m, 2 * m))
    ja[r1, np.arange(m)] = h * x1 * (1.0 - x1 * x1)
    ja[r1, m + np.arange(m)] = h * x2

    jw = np.zeros((2 * m, m * m))
    for i in range(m):
        jw[2 * i, i * m : (i + 1) * m] = h * x1
    return jx, ja, jw


def jacobians(
    params: VdpParams, s: State, dt: float, substeps: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Jacobians of the full Euler map g at state `s`.

    For substeps > 1 the per-substep Jacobians are chained through the
    intermediate states, so the result differentiates the composed map.
    """
    if s.m != params.m:
        raise DimensionError(f"state has {s.m} components, params have {params.m}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = dt / substeps
    x1, x2 = s.x1.astype(float), s.x2.astype(float)
    jx_tot, ja_tot, jw_tot = _euler_jacobians(params, x1, x2, h)
    for _ in range(substeps - 1):
        d1, d2 = _field_arrays(params.alpha, params.coupling, x1, x2)
        x1 = x1 + h * d1
        x2 = x2 + h * d2
        jx, ja, jw = _euler_jacobians(params, x1, x2, h)
        ja_tot = jx @ ja_tot + ja
        jw_tot = jx @ jw_tot + jw
        jx_tot = jx @ jx_tot
    return jx_tot, ja_tot, jw_tot


def batch_state_jacobians(
    params: VdpParams, x1: np.ndarray, x2: np.ndarray, dt: float, substeps: int = 1
) -> np.ndarray:
    """dg/dstate at K states at once; x1/x2 are (K, m), result is (K, 2m, 2m)."""
    x1 = np.atleast_2d(x1)
    x2 = np.atleast_2d(x2)
    K, m = x1.shape
    if substeps != 1:
        out = np.empty((K, 2 * m, 2 * m))
        for k in range(K):
            out[k] = jacobians(params, State(x1=x1[k], x2=x2[k]), dt, substeps)[0]
        return out
    a1 = params.alpha[:, 0]
    a2 = params.alpha[:, 1]
    r1 = 2 * np.arange(m)
    r2 = r1 + 1
    out = np.zeros((K, 2 * m, 2 * m))
    out[:, r1[:, None], r1[None, :]] = dt * params.coupling
    out[:, r1, r1] += 1.0 + dt * a1 * (1.0 - 3.0 * x1 * x1)
    out[:, r1, r2] = dt * a2
    out[:, r2, r1] = -dt
    out[:, r2, r2] = 1.0
    return out


def batch_param_jacobians(
    params: VdpParams, x1: np.ndarray, x2: np.ndarray, dt: float, substeps: int = 1
) -> np.ndarray:
    """dg/dparams at K states at once; result is (K, 2m, 2m + m^2)."""
    x1 = np.atleast_2d(x1)
    x2 = np.atleast_2d(x2)
    K, m = x1.shape
    p = 2 * m + m * m
    if substeps != 1:
        out = np.empty((K, 2 * m, p))
        for k in range(K):
            _, ja, jw = jacobians(params, State(x1=x1[k], x2=x2[k]), dt, substeps)
            out[k] = np.hstack([ja, jw])
        return out
    r1 = 2 * np.arange(m)
    out = np.zeros((K, 2 * m, p))
    out[:, r1, np.arange(m)] = dt * x1 * (1.0 - x1 * x1)
    out[:, r1, m + np.arange(m)] = dt * x2
    for i in range(m):
        out[:, 2 * i, 2 * m + i * m : 2 * m + (i + 1) * m] = dt * x1
    return out
