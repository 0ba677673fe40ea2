"""Stacked single-step constraints linking a whole trajectory to the Euler map.

For a trajectory x^0..x^{N-1} the stacked constraint is

    G(x)[0]  = x^0 - anchor
    G(x)[k]  = x^k - g(x^{k-1})        k = 1..N-1

so G vanishes exactly on simulated trajectories whose first sample matches the
anchor. The state Jacobian dG/dx is block lower-bidiagonal with identity
diagonal blocks, which keeps Gauss-Newton normal systems block-tridiagonal and
solvable in O(N).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import (
    DimensionError,
    State,
    Trajectory,
    VdpParams,
    batch_param_jacobians,
    batch_state_jacobians,
    step,
)

DENSE_GUARD = 4096  # refuse to densify block operators past this side length


@dataclass(frozen=True)
class StackedState:
    """All N samples of a trajectory as one flat vector of length 2*m*N.

    Time blocks are contiguous; within a block component i occupies
    (2i, 2i+1) = (x1_i, x2_i), matching the single-sample layout.
    """

    flat: np.ndarray
    m: int
    n_steps: int

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=float)
        if flat.shape != (2 * self.m * self.n_steps,):
            raise DimensionError(
                f"flat must have length {2 * self.m * self.n_steps}, got {flat.shape}"
            )
        if not np.all(np.isfinite(flat)):
            raise ValueError("stacked state must be finite")
        object.__setattr__(self, "flat", flat)

    @classmethod
    def from_arrays(cls, x1: np.ndarray, x2: np.ndarray) -> "StackedState":
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        x2 = np.atleast_2d(np.asarray(x2, dtype=float))
        if x1.shape != x2.shape:
            raise DimensionError(f"x1/x2 shape mismatch: {x1.shape} vs {x2.shape}")
        n, m = x1.shape
        blocks = np.empty((n, 2 * m))
        blocks[:, 0::2] = x1
        blocks[:, 1::2] = x2
        return cls(flat=blocks.ravel(), m=m, n_steps=n)

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "StackedState":
        return cls.from_arrays(traj.x1, traj.x2)

    def blocks(self) -> np.ndarray:
        """View as (N, 2m) time blocks."""
        return self.flat.reshape(self.n_steps, 2 * self.m)

    def x1(self) -> np.ndarray:
        return self.blocks()[:, 0::2]

    def x2(self) -> np.ndarray:
        return self.blocks()[:, 1::2]

    def state(self, k: int) -> State:
        block = self.blocks()[k]
        return State(x1=block[0::2].copy(), x2=block[1::2].copy())

    def to_trajectory(self, dt: float) -> Trajectory:
        return Trajectory(x1=self.x1().copy(), x2=self.x2().copy(), dt=dt)

    def replace_flat(self, flat: np.ndarray) -> "StackedState":
        return StackedState(flat=flat, m=self.m, n_steps=self.n_steps)


@dataclass(frozen=True)
class InitAnchor:
    """Initial-state anchor x^0; the constraint target is eta0 = [anchor, 0, ..., 0]."""

    x0: State

    @property
    def m(self) -> int:
        return self.x0.m

    def flat(self) -> np.ndarray:
        return self.x0.to_flat()


def residual(
    x: StackedState,
    params: VdpParams,
    anchor: InitAnchor,
    dt: float,
    substeps: int = 1,
) -> np.ndarray:
    """G(x) - eta0 as a flat (2*m*N,) vector."""
    if x.m != params.m or anchor.m != params.m:
        raise DimensionError("component count mismatch between state, params, anchor")
    x1 = x.x1()
    x2 = x.x2()
    n, m = x1.shape
    out = np.empty((n, 2 * m))
    out[0, 0::2] = x1[0] - anchor.x0.x1
    out[0, 1::2] = x2[0] - anchor.x0.x2
    if substeps == 1:
        a1 = params.alpha[:, 0]
        a2 = params.alpha[:, 1]
        prev1, prev2 = x1[:-1], x2[:-1]
        g1 = prev1 + dt * (
            a1 * prev1 * (1.0 - prev1 * prev1) + a2 * prev2 + prev1 @ params.coupling.T
        )
        g2 = prev2 - dt * prev1
        out[1:, 0::2] = x1[1:] - g1
        out[1:, 1::2] = x2[1:] - g2
    else:
        for k in range(1, n):
            nxt = step(params, State(x1=x1[k - 1], x2=x2[k - 1]), dt, substeps)
            out[k, 0::2] = x1[k] - nxt.x1
            out[k, 1::2] = x2[k] - nxt.x2
    return out.ravel()


class BlockBidiagonal:
    """dG/dx: identity diagonal blocks plus subdiagonal blocks sub[k] at (k+1, k).

    Never materializes the dense matrix unless the side length stays under a
    guard threshold; matvec/rmatvec work blockwise.
    """

    def __init__(self, sub: np.ndarray, m: int, n_steps: int):
        sub = np.asarray(sub, dtype=float)
        if sub.shape != (n_steps - 1, 2 * m, 2 * m):
            raise DimensionError(
                f"sub blocks must be ({n_steps - 1}, {2 * m}, {2 * m}), got {sub.shape}"
            )
        self.sub = sub
        self.m = m
        self.n_steps = n_steps

    @property
    def shape(self) -> tuple[int, int]:
        side = 2 * self.m * self.n_steps
        return (side, side)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float).reshape(self.n_steps, 2 * self.m)
        out = v.copy()
        out[1:] += np.einsum("kij,kj->ki", self.sub, v[:-1])
        return out.ravel()

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float).reshape(self.n_steps, 2 * self.m)
        out = v.copy()
        out[:-1] += np.einsum("kji,kj->ki", self.sub, v[1:])
        return out.ravel()

    def to_dense(self, guard: int = DENSE_GUARD) -> np.ndarray:
        side = self.shape[0]
        if side > guard:
            raise ValueError(
                f"refusing to densify a {side}x{side} block operator (guard={guard})"
            )
        b = 2 * self.m
        dense = np.eye(side)
        for k in range(self.n_steps - 1):
            dense[(k + 1) * b : (k + 2) * b, k * b : (k + 1) * b] = self.sub[k]
        return dense


def residual_jacobian_x(
    x: StackedState, params: VdpParams, dt: float, substeps: int = 1
) -> BlockBidiagonal:
    """dG/dx at x; subdiagonal block k is -dg/dstate evaluated at x^k."""
    if x.m != params.m:
        raise DimensionError("component count mismatch between state and params")
    x1 = x.x1()
    x2 = x.x2()
    sub = -batch_state_jacobians(params, x1[:-1], x2[:-1], dt, substeps)
    return BlockBidiagonal(sub=sub, m=x.m, n_steps=x.n_steps)


def residual_jacobian_params(
    x: StackedState, params: VdpParams, dt: float, substeps: int = 1
) -> np.ndarray:
    """dG/dparams at x, dense (2*m*N, 2m + m^2); the anchor block rows are zero.

    Columns follow VdpParams.to_vector: [a1 all, a2 all, W row-major].
    """
    if x.m != params.m:
        raise DimensionError("component count mismatch between state and params")
    x1 = x.x1()
    x2 = x.x2()
    n, m = x1.shape
    p = 2 * m + m * m
    out = np.zeros((n, 2 * m, p))
    out[1:] = -batch_param_jacobians(params, x1[:-1], x2[:-1], dt, substeps)
    return out.reshape(n * 2 * m, p)


def solve_block_tridiagonal(
    diag: np.ndarray, sub: np.ndarray, rhs: np.ndarray
) -> np.ndarray:
    """Solve a symmetric positive-definite block-tridiagonal system in O(N).

    diag: (N, b, b) diagonal blocks; sub: (N-1, b, b) blocks at (k+1, k); the
    (k, k+1) blocks are their transposes. rhs: (N, b). Block Cholesky forward
    elimination followed by back substitution.
    """
    diag = np.asarray(diag, dtype=float)
    sub = np.asarray(sub, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    n = diag.shape[0]
    factors = []
    # forward: factor Schur complements and eliminate sub blocks
    c = diag[0]
    v = np.empty_like(rhs)
    gains = np.empty_like(sub)  # gains[k] = C_k^{-1} sub_k^T
    fac = cho_factor(c, lower=True)
    factors.append(fac)
    v[0] = cho_solve(fac, rhs[0])
    for k in range(1, n):
        gains[k - 1] = cho_solve(factors[k - 1], sub[k - 1].T)
        c = diag[k] - sub[k - 1] @ gains[k - 1]
        fac = cho_factor(c, lower=True)
        factors.append(fac)
        v[k] = cho_solve(fac, rhs[k] - sub[k - 1] @ v[k - 1])
    out = np.empty_like(rhs)
    out[n - 1] = v[n - 1]
    for k in range(n - 2, -1, -1):
        out[k] = v[k] - gains[k] @ out[k + 1]
    return out
