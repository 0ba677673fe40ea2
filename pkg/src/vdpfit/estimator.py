"""Variable-projection estimation of oscillator parameters and hidden states.

The penalty objective over a stacked trajectory x is

    f_lam(x, params) = 1/2 ||z - Hx||^2 + lam/2 ||G(x, params) - eta0||^2

where H masks out everything but the observed x1 coordinates. The inner solve
minimizes over x with Gauss-Newton steps on the block-tridiagonal normal
equations (H'H + lam G_x'G_x) d = -grad; the outer loop is projected gradient
over (alpha, W) using the value-function gradient lam * G_params' (G - eta0),
which is exact at an exact inner minimizer.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .constraints import (
    InitAnchor,
    StackedState,
    residual,
    residual_jacobian_params,
    residual_jacobian_x,
    solve_block_tridiagonal,
)
from .model import DimensionError, ObservationSet, State, Trajectory, VdpParams

_MAX_HALVINGS = 48


class FitError(RuntimeError):
    """Estimation could not proceed (non-finite objective, bad init, ...)."""


@dataclass(frozen=True)
class ParamBounds:
    """Box constraints per parameter group, as (lo, hi) pairs."""

    alpha1: tuple[float, float] = (0.0, 5.0)
    alpha2: tuple[float, float] = (-5.0, 5.0)
    coupling: tuple[float, float] = (-2.0, 2.0)

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "coupling"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ValueError(f"bounds.{name} must be a finite (lo, hi) with lo <= hi")

    def lower(self, m: int) -> np.ndarray:
        return np.concatenate(
            [
                np.full(m, self.alpha1[0]),
                np.full(m, self.alpha2[0]),
                np.full(m * m, self.coupling[0]),
            ]
        )

    def upper(self, m: int) -> np.ndarray:
        return np.concatenate(
            [
                np.full(m, self.alpha1[1]),
                np.full(m, self.alpha2[1]),
                np.full(m * m, self.coupling[1]),
            ]
        )

    def clip_params(self, params: VdpParams) -> VdpParams:
        vec = np.clip(params.to_vector(), self.lower(params.m), self.upper(params.m))
        return VdpParams.from_vector(vec, params.m)

    def contains(self, params: VdpParams, atol: float = 0.0) -> bool:
        vec = params.to_vector()
        m = params.m
        return bool(
            np.all(vec >= self.lower(m) - atol) and np.all(vec <= self.upper(m) + atol)
        )


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty weights, inner/outer solver tolerances, and parameter bounds.

    When `lam_schedule` is set the fit sweeps it in order, warm-starting states
    and params, while the inner tolerance tightens from `inner_tol_start` to
    `inner_tol` and the Gauss-Newton cap grows from `inner_max_iter_start` to
    `inner_max_iter`.
    """

    lam: float = 1000.0
    lam_schedule: Optional[tuple[float, ...]] = (10.0, 100.0, 1000.0)
    inner_tol: float = 1e-8
    inner_tol_start: float = 1e-4
    inner_max_iter: int = 200
    inner_max_iter_start: int = 50
    outer_step: float = 0.1
    outer_max_iter: int = 100
    outer_ftol: float = 1e-8
    outer_gtol: float = 1e-6
    armijo_c: float = 1e-4
    bounds: ParamBounds = field(default_factory=ParamBounds)

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.lam_schedule is not None:
            sched = tuple(float(v) for v in self.lam_schedule)
            if len(sched) == 0 or any(v <= 0 for v in sched):
                raise ValueError("lam_schedule values must be positive")
            if any(b <= a for a, b in zip(sched, sched[1:])):
                raise ValueError("lam_schedule must be strictly increasing")
            object.__setattr__(self, "lam_schedule", sched)
        for name in ("inner_tol", "inner_tol_start", "outer_step", "outer_ftol", "outer_gtol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("inner_max_iter", "inner_max_iter_start", "outer_max_iter"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def stages(self) -> list[tuple[float, float, int]]:
        """Per-stage (lam, inner_tol, inner_max_iter) triples."""
        lams = list(self.lam_schedule) if self.lam_schedule else [self.lam]
        n = len(lams)
        if n == 1:
            return [(lams[0], self.inner_tol, self.inner_max_iter)]
        tols = np.geomspace(self.inner_tol_start, self.inner_tol, n)
        caps = np.linspace(self.inner_max_iter_start, self.inner_max_iter, n)
        return [(lams[i], float(tols[i]), int(round(caps[i]))) for i in range(n)]

    def echo(self) -> dict:
        d = asdict(self)
        d["lam_schedule"] = list(d["lam_schedule"]) if d["lam_schedule"] else None
        d["bounds"] = {
            "alpha1": list(self.bounds.alpha1),
            "alpha2": list(self.bounds.alpha2),
            "coupling": list(self.bounds.coupling),
        }
        return d


@dataclass(frozen=True)
class InnerResult:
    """Inner Gauss-Newton outcome: the state estimate plus convergence info."""

    x: StackedState
    converged: bool
    iterations: int
    grad_inf: float
    objective: float


@dataclass(frozen=True)
class ValueGradient:
    """Value function f_tilde and its (alpha, W) gradient at fixed params."""

    value: float
    gradient: np.ndarray
    x: StackedState
    inner: InnerResult

    @property
    def low_accuracy(self) -> bool:
        return not self.inner.converged


@dataclass
class FitResult:
    params: VdpParams
    states: Trajectory
    objective_history: list[tuple[int, float, float]]  # (outer iter, lam, f_tilde)
    per_component_stats: list[dict]
    converged: bool
    reason: str
    config_echo: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "alpha": self.params.alpha.tolist(),
            "W": self.params.coupling.tolist(),
            "states": {
                "x1": self.states.x1.tolist(),
                "x2": self.states.x2.tolist(),
            },
            "stats": self.per_component_stats,
            "objective_history": [
                [int(i), float(lam), float(f)] for i, lam, f in self.objective_history
            ],
            "converged": {"flag": bool(self.converged), "reason": self.reason},
            "config_echo": self.config_echo,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "FitResult":
        params = VdpParams(alpha=np.array(doc["alpha"]), coupling=np.array(doc["W"]))
        echo = doc.get("config_echo", {})
        dt = float(echo.get("dt", 1.0))
        states = Trajectory(
            x1=np.array(doc["states"]["x1"]),
            x2=np.array(doc["states"]["x2"]),
            dt=dt,
        )
        conv = doc.get("converged", {})
        return cls(
            params=params,
            states=states,
            objective_history=[tuple(e) for e in doc.get("objective_history", [])],
            per_component_stats=list(doc.get("stats", [])),
            converged=bool(conv.get("flag", False)),
            reason=str(conv.get("reason", "")),
            config_echo=echo,
        )


def _obs_mask(m: int, n: int) -> np.ndarray:
    """(N, 2m) mask, 1.0 at x1 slots."""
    mask = np.zeros((n, 2 * m))
    mask[:, 0::2] = 1.0
    return mask


def hidden_x2_estimate(z_values: np.ndarray, dt: float) -> np.ndarray:
    """Initial guess for the hidden track from dx2/dt = -x1.

    Integrates -x1 cumulatively and removes each component's mean (the
    integration constant is unidentified at this point). Falls back to zeros
    if the estimate is not finite.
    """
    z_values = np.atleast_2d(np.asarray(z_values, dtype=float))
    n = z_values.shape[0]
    x2 = np.zeros_like(z_values)
    x2[1:] = -dt * np.cumsum(z_values[:-1], axis=0)
    x2 -= x2.mean(axis=0, keepdims=True)
    if not np.all(np.isfinite(x2)):
        return np.zeros_like(z_values)
    return x2


def default_x_init(z: ObservationSet, dt: float) -> StackedState:
    """Stacked init: observed x1 track plus the hidden-state heuristic for x2."""
    return StackedState.from_arrays(z.values, hidden_x2_estimate(z.values, dt))


def objective(
    x: StackedState,
    params: VdpParams,
    anchor: InitAnchor,
    z: ObservationSet,
    cfg: PenaltyConfig,
    *,
    dt: float = 1.0,
    substeps: int = 1,
    lam: Optional[float] = None,
) -> float:
    """Penalty objective f_lam(x, params); `lam` overrides cfg.lam (0 allowed
    for diagnostics, reducing to the pure data misfit)."""
    if z.n_steps != x.n_steps or z.m != x.m:
        raise DimensionError(
            f"observations are {z.n_steps}x{z.m}, state is {x.n_steps}x{x.m}"
        )
    lam_eff = cfg.lam if lam is None else float(lam)
    misfit = x.x1() - z.values
    val = 0.5 * float(np.sum(misfit * misfit))
    if lam_eff != 0.0:
        r = residual(x, params, anchor, dt, substeps)
        val += 0.5 * lam_eff * float(r @ r)
    return val


def _objective_parts(x_blocks, z_values, r, lam):
    misfit = x_blocks[:, 0::2] - z_values
    return 0.5 * float(np.sum(misfit * misfit)) + 0.5 * lam * float(r @ r)


def inner_solve(
    params: VdpParams,
    anchor: InitAnchor,
    z: ObservationSet,
    cfg: PenaltyConfig,
    x_init: StackedState,
    *,
    dt: float = 1.0,
    substeps: int = 1,
    lam: Optional[float] = None,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> InnerResult:
    """Gauss-Newton minimization of f_lam over the stacked state.

    Stops when the gradient infinity-norm drops to `tol` or the iteration cap
    is hit. Steps solve the block-tridiagonal normal equations exactly, then
    halve under an Armijo test; a step that underflows returns the current
    iterate flagged not-converged.
    """
    if z.n_steps != x_init.n_steps or z.m != x_init.m:
        raise DimensionError(
            f"observations are {z.n_steps}x{z.m}, init is {x_init.n_steps}x{x_init.m}"
        )
    lam_eff = cfg.lam if lam is None else float(lam)
    if lam_eff <= 0:
        raise ValueError("inner solve requires lam > 0")
    tol_eff = cfg.inner_tol if tol is None else float(tol)
    cap = cfg.inner_max_iter if max_iter is None else int(max_iter)
    m, n = x_init.m, x_init.n_steps
    b = 2 * m
    mask = _obs_mask(m, n)
    eye = np.eye(b)

    cur = x_init
    r = residual(cur, params, anchor, dt, substeps)
    f_cur = _objective_parts(cur.blocks(), z.values, r, lam_eff)
    converged = False
    grad_inf = math.inf
    iterations = 0
    for iterations in range(cap + 1):
        jac = residual_jacobian_x(cur, params, dt, substeps)
        grad_blocks = mask * (cur.blocks() - _embed_obs(z.values, m))
        grad_blocks = grad_blocks + lam_eff * jac.rmatvec(r).reshape(n, b)
        grad_inf = float(np.max(np.abs(grad_blocks)))
        if grad_inf <= tol_eff:
            converged = True
            break
        if iterations == cap:
            break
        sub = jac.sub
        diag = np.empty((n, b, b))
        diag[:] = lam_eff * eye
        diag[:, np.arange(b), np.arange(b)] += mask[0]
        diag[:-1] += lam_eff * np.einsum("kji,kjl->kil", sub, sub)
        delta = solve_block_tridiagonal(diag, lam_eff * sub, -grad_blocks)
        dirderiv = float(np.sum(grad_blocks * delta))
        t = 1.0
        accepted = False
        for _ in range(_MAX_HALVINGS):
            try:
                trial = cur.replace_flat((cur.blocks() + t * delta).ravel())
            except ValueError:  # overflowed to non-finite: reject and halve
                t *= 0.5
                continue
            r_trial = residual(trial, params, anchor, dt, substeps)
            f_trial = _objective_parts(trial.blocks(), z.values, r_trial, lam_eff)
            if math.isfinite(f_trial) and f_trial <= f_cur + cfg.armijo_c * t * dirderiv:
                cur, r, f_cur = trial, r_trial, f_trial
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return InnerResult(
                x=cur, converged=False, iterations=iterations + 1,
                grad_inf=grad_inf, objective=f_cur,
            )
    return InnerResult(
        x=cur, converged=converged, iterations=iterations,
        grad_inf=grad_inf, objective=f_cur,
    )


def _embed_obs(z_values: np.ndarray, m: int) -> np.ndarray:
    """Observations placed at their x1 slots of (N, 2m) blocks, zeros elsewhere."""
    n = z_values.shape[0]
    out = np.zeros((n, 2 * m))
    out[:, 0::2] = z_values
    return out


def value_gradient(
    params: VdpParams,
    anchor: InitAnchor,
    z: ObservationSet,
    cfg: PenaltyConfig,
    x_init: Optional[StackedState] = None,
    *,
    dt: float = 1.0,
    substeps: int = 1,
    lam: Optional[float] = None,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> ValueGradient:
    """f_tilde(params) = min_x f_lam and its gradient lam * G_params'(G - eta0).

    The gradient is exact at an exact inner minimizer; when the inner solve
    stops early the result is still returned with `low_accuracy` set.
    """
    if x_init is None:
        x_init = default_x_init(z, dt)
    lam_eff = cfg.lam if lam is None else float(lam)
    inner = inner_solve(
        params, anchor, z, cfg, x_init,
        dt=dt, substeps=substeps, lam=lam_eff, tol=tol, max_iter=max_iter,
    )
    r = residual(inner.x, params, anchor, dt, substeps)
    jp = residual_jacobian_params(inner.x, params, dt, substeps)
    grad = lam_eff * (jp.T @ r)
    return ValueGradient(value=inner.objective, gradient=grad, x=inner.x, inner=inner)


def _component_stats(z_values: np.ndarray, x1_fit: np.ndarray) -> list[dict]:
    stats = []
    for i in range(z_values.shape[1]):
        stats.append(
            {
                "component": i,
                "pearson": metrics.pearson(z_values[:, i], x1_fit[:, i]),
                "r_squared": metrics.r_squared(z_values[:, i], x1_fit[:, i]),
            }
        )
    return stats


def _name_bad_component(x: StackedState, r: np.ndarray) -> int:
    bad = ~np.isfinite(x.blocks()) | ~np.isfinite(r.reshape(x.n_steps, 2 * x.m))
    per_comp = bad.reshape(x.n_steps, x.m, 2).any(axis=(0, 2))
    idx = np.nonzero(per_comp)[0]
    return int(idx[0]) if idx.size else 0


def fit(
    z: ObservationSet,
    cfg: PenaltyConfig,
    init: VdpParams,
    x_init: Optional[StackedState] = None,
    *,
    dt: float = 1.0,
    substeps: int = 1,
    anchor: Optional[InitAnchor] = None,
) -> FitResult:
    """Projected-gradient outer loop over (alpha, W) with inner state solves.

    Sweeps the lam schedule with warm starts, takes Barzilai-Borwein trial
    steps clipped to the bounds with Armijo backtracking on f_tilde, and stops
    each stage on a parameter-space gradient norm below outer_gtol, a relative
    objective change below outer_ftol, or outer_max_iter.
    """
    m = z.m
    if init.m != m:
        raise DimensionError(f"init has {init.m} components, observations have {m}")
    if not cfg.bounds.contains(init, atol=1e-12):
        raise FitError("init violates parameter bounds")
    if x_init is None:
        x_init = default_x_init(z, dt)
    if anchor is None:
        anchor = InitAnchor(x0=x_init.state(0))

    with np.errstate(over="ignore", invalid="ignore"):
        r0 = residual(x_init, init, anchor, dt, substeps)
        f0 = objective(x_init, init, anchor, z, cfg, dt=dt, substeps=substeps,
                       lam=cfg.stages()[0][0])
    if not math.isfinite(f0):
        comp = _name_bad_component(x_init, r0)
        raise FitError(
            f"non-finite objective at initial evaluation (component {comp})"
        )

    lo = cfg.bounds.lower(m)
    hi = cfg.bounds.upper(m)
    p = np.clip(init.to_vector(), lo, hi)
    x_cur = x_init
    history: list[tuple[int, float, float]] = []
    outer_count = 0
    reason = "max outer iterations"
    converged = False

    for lam_s, tol_s, cap_s in cfg.stages():
        vg = value_gradient(
            VdpParams.from_vector(p, m), anchor, z, cfg, x_cur,
            dt=dt, substeps=substeps, lam=lam_s, tol=tol_s, max_iter=cap_s,
        )
        if not math.isfinite(vg.value):
            r = residual(vg.x, VdpParams.from_vector(p, m), anchor, dt, substeps)
            comp = _name_bad_component(vg.x, r)
            raise FitError(
                f"non-finite objective at initial evaluation (component {comp})"
            )
        f, g, x_cur = vg.value, vg.gradient, vg.x
        history.append((outer_count, lam_s, f))
        outer_count += 1
        reason = "max outer iterations"
        converged = False
        t_bb: Optional[float] = None
        for _ in range(cfg.outer_max_iter):
            proj_grad = p - np.clip(p - g, lo, hi)
            if float(np.max(np.abs(proj_grad))) < cfg.outer_gtol:
                reason = "projected gradient below tolerance"
                converged = True
                break
            t = t_bb if t_bb is not None else cfg.outer_step / max(
                float(np.max(np.abs(g))), 1e-12
            )
            accepted = False
            vg_new = None
            for _ in range(_MAX_HALVINGS):
                p_new = np.clip(p - t * g, lo, hi)
                move = p_new - p
                if not np.any(move):
                    break
                vg_new = value_gradient(
                    VdpParams.from_vector(p_new, m), anchor, z, cfg, x_cur,
                    dt=dt, substeps=substeps, lam=lam_s, tol=tol_s, max_iter=cap_s,
                )
                if math.isfinite(vg_new.value) and vg_new.value <= f + cfg.armijo_c * float(
                    g @ move
                ):
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                reason = "line search stalled"
                converged = False
                break
            s_vec = p_new - p
            y_vec = vg_new.gradient - g
            sy = float(s_vec @ y_vec)
            t_bb = float(s_vec @ s_vec) / sy if sy > 1e-18 else None
            if t_bb is not None:
                t_bb = min(max(t_bb, 1e-12), 1e6)
            df = f - vg_new.value
            p, f, g, x_cur = p_new, vg_new.value, vg_new.gradient, vg_new.x
            history.append((outer_count, lam_s, f))
            outer_count += 1
            if abs(df) < cfg.outer_ftol * (1.0 + abs(f)):
                reason = "objective change below tolerance"
                converged = True
                break

    params_hat = VdpParams.from_vector(p, m)
    states = x_cur.to_trajectory(dt)
    echo = cfg.echo()
    echo["dt"] = float(dt)
    echo["substeps"] = int(substeps)
    return FitResult(
        params=params_hat,
        states=states,
        objective_history=history,
        per_component_stats=_component_stats(z.values, states.x1),
        converged=converged,
        reason=reason,
        config_echo=echo,
    )
