"""Greedy random-walk search over parameters and initial hidden states.

Candidates are scored by simulating forward from (x1 = first observation,
x2 = candidate x2_init) and taking the fitness

    f = min_i (c_i + gamma * R2_i)

over components, where c_i is the Pearson correlation and R2_i the coefficient
of determination between observed and simulated activity. Proposals perturb a
single randomly chosen group (one alpha row, one W entry, or one x2_init
entry); only strictly better fitness replaces the incumbent. Every `vp_every`
rounds the incumbent seeds a variable-projection fit and the better of the two
survives.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Optional

import numpy as np

from . import metrics
from .constraints import StackedState
from .estimator import (
    FitError,
    FitResult,
    ParamBounds,
    PenaltyConfig,
    _component_stats,
    fit,
)
from .model import (
    DimensionError,
    ObservationSet,
    SimulationDiverged,
    State,
    Trajectory,
    VdpParams,
    simulate,
)


@dataclass(frozen=True)
class StepScales:
    """Proposal standard deviations per perturbation group."""

    alpha: float = 0.2
    coupling: float = 0.1
    x2: float = 0.5

    def __post_init__(self):
        if min(self.alpha, self.coupling, self.x2) <= 0:
            raise ValueError("step scales must be positive")

    def halved(self) -> "StepScales":
        return StepScales(self.alpha / 2, self.coupling / 2, self.x2 / 2)


@dataclass(frozen=True)
class SearchConfig:
    gamma: float = 1.0
    step_scales: StepScales = field(default_factory=StepScales)
    max_rounds: int = 50
    proposals_per_round: int = 50
    vp_every: int = 5
    seed: int = 0
    patience: int = 20
    bounds: ParamBounds = field(default_factory=ParamBounds)
    x2_bounds: tuple[float, float] = (-5.0, 5.0)
    plateau_tol: float = 1e-6

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.max_rounds < 0 or self.proposals_per_round < 1:
            raise ValueError("max_rounds must be >= 0, proposals_per_round >= 1")
        if self.vp_every < 1 or self.patience < 1:
            raise ValueError("vp_every and patience must be >= 1")

    def echo(self) -> dict:
        return {
            "gamma": self.gamma,
            "step_scales": {
                "alpha": self.step_scales.alpha,
                "coupling": self.step_scales.coupling,
                "x2": self.step_scales.x2,
            },
            "max_rounds": self.max_rounds,
            "proposals_per_round": self.proposals_per_round,
            "vp_every": self.vp_every,
            "seed": self.seed,
            "patience": self.patience,
            "x2_bounds": list(self.x2_bounds),
            "plateau_tol": self.plateau_tol,
        }


@dataclass(frozen=True)
class Candidate:
    """A scored point in (params, x2_init) space.

    `provenance` is (round, proposal index, accepted-from tag); fitness is
    -inf for invalid candidates (diverged simulation or degenerate tracks).
    """

    params: VdpParams
    x2_init: np.ndarray
    fitness: float
    provenance: tuple[int, int, str] = (0, 0, "init")

    @property
    def valid(self) -> bool:
        return math.isfinite(self.fitness)


def score_components(
    z_values: np.ndarray, sim_x1: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-component (pearson, r_squared) arrays; NaN marks undefined entries."""
    z_values = np.atleast_2d(z_values)
    sim_x1 = np.atleast_2d(sim_x1)
    if z_values.shape != sim_x1.shape:
        raise DimensionError(
            f"observed {z_values.shape} vs simulated {sim_x1.shape} tracks"
        )
    m = z_values.shape[1]
    c = np.empty(m)
    r2 = np.empty(m)
    for i in range(m):
        c[i] = metrics.pearson(z_values[:, i], sim_x1[:, i])
        r2[i] = metrics.r_squared(z_values[:, i], sim_x1[:, i])
    return c, r2


def combine_scores(c: np.ndarray, r2: np.ndarray, gamma: float) -> float:
    """min_i (c_i + gamma * R2_i); any undefined component makes it -inf."""
    vals = np.asarray(c, dtype=float) + gamma * np.asarray(r2, dtype=float)
    if np.any(~np.isfinite(vals)):
        return -math.inf
    return float(np.min(vals))


def fitness(z: ObservationSet, sim: Trajectory, gamma: float) -> float:
    """Fitness of a simulated trajectory against observations.

    A zero-variance track on either side leaves that component's correlation
    undefined and the whole candidate scores -inf.
    """
    if sim.n_steps != z.n_steps or sim.m != z.m:
        raise DimensionError(
            f"simulation is {sim.n_steps}x{sim.m}, observations {z.n_steps}x{z.m}"
        )
    c, r2 = score_components(z.values, sim.x1)
    return combine_scores(c, r2, gamma)


def _simulate_candidate(
    z: ObservationSet, params: VdpParams, x2_init: np.ndarray, dt: float
) -> Optional[Trajectory]:
    s0 = State(x1=z.values[0].copy(), x2=np.asarray(x2_init, dtype=float))
    try:
        return simulate(params, s0, z.n_steps, dt)
    except SimulationDiverged:
        return None


def score_candidate(
    z: ObservationSet,
    params: VdpParams,
    x2_init: np.ndarray,
    gamma: float,
    dt: float,
) -> float:
    sim = _simulate_candidate(z, params, x2_init, dt)
    if sim is None:
        return -math.inf
    return fitness(z, sim, gamma)


def propose(
    current: Candidate,
    z: ObservationSet,
    cfg: SearchConfig,
    rng: np.random.Generator,
    *,
    dt: float = 1.0,
    scales: Optional[StepScales] = None,
) -> Candidate:
    """One Gaussian perturbation of a uniformly chosen group, clipped and scored."""
    sc = scales or cfg.step_scales
    m = current.params.m
    alpha = current.params.alpha.copy()
    coupling = current.params.coupling.copy()
    x2_init = np.asarray(current.x2_init, dtype=float).copy()
    # groups: m alpha rows, m^2 coupling entries, m x2 entries
    pick = int(rng.integers(0, m + m * m + m))
    if pick < m:
        alpha[pick] += rng.normal(0.0, sc.alpha, size=2)
        alpha[pick, 0] = np.clip(alpha[pick, 0], *cfg.bounds.alpha1)
        alpha[pick, 1] = np.clip(alpha[pick, 1], *cfg.bounds.alpha2)
    elif pick < m + m * m:
        flat_idx = pick - m
        i, j = divmod(flat_idx, m)
        coupling[i, j] = np.clip(
            coupling[i, j] + rng.normal(0.0, sc.coupling), *cfg.bounds.coupling
        )
    else:
        i = pick - m - m * m
        x2_init[i] = np.clip(x2_init[i] + rng.normal(0.0, sc.x2), *cfg.x2_bounds)
    params = VdpParams(alpha=alpha, coupling=coupling)
    f = score_candidate(z, params, x2_init, cfg.gamma, dt)
    return Candidate(params=params, x2_init=x2_init, fitness=f)


class _TraceWriter:
    def __init__(self, sink: Optional[IO[str]]):
        self.sink = sink

    def write(self, round_idx: int, proposal: int, fitness_val: float, accepted: bool):
        if self.sink is None:
            return
        rec = {
            "round": round_idx,
            "proposal": proposal,
            "fitness": None if not math.isfinite(fitness_val) else fitness_val,
            "accepted": accepted,
        }
        self.sink.write(json.dumps(rec) + "\n")


def search_and_refine(
    z: ObservationSet,
    search_cfg: SearchConfig,
    vp_cfg: PenaltyConfig,
    *,
    dt: float = 1.0,
    init: Optional[VdpParams] = None,
    x2_init: Optional[np.ndarray] = None,
    trace: Optional[IO[str]] = None,
) -> FitResult:
    """Alternate greedy random-walk rounds with VP refinement.

    Stops on max_rounds or when the best fitness has improved by less than
    plateau_tol for `patience` consecutive rounds. With max_rounds=0 this is
    exactly a single VP fit from the initial parameters.
    """
    m = z.m
    if init is None:
        init = VdpParams(alpha=np.ones((m, 2)), coupling=np.zeros((m, m)))
    if x2_init is None:
        x2_init = np.zeros(m)
    x2_init = np.asarray(x2_init, dtype=float)
    if init.m != m or x2_init.shape != (m,):
        raise DimensionError("init/x2_init dimensions must match observations")

    writer = _TraceWriter(trace)
    gamma = search_cfg.gamma
    rng = np.random.default_rng(search_cfg.seed)

    if search_cfg.max_rounds == 0:
        return fit(z, vp_cfg, vp_cfg.bounds.clip_params(init), dt=dt)

    init_params = search_cfg.bounds.clip_params(init)
    init_x2 = np.clip(x2_init, *search_cfg.x2_bounds)
    best = Candidate(
        params=init_params,
        x2_init=init_x2,
        fitness=score_candidate(z, init_params, init_x2, gamma, dt),
        provenance=(0, 0, "init"),
    )
    best_fit_result: Optional[FitResult] = None
    scales = search_cfg.step_scales
    halved_once = False
    all_invalid_rounds = 0
    invalid_candidates = 0
    no_improve = 0
    stop_reason = "max rounds"
    rounds_run = 0

    for round_idx in range(1, search_cfg.max_rounds + 1):
        rounds_run = round_idx
        round_start_fitness = best.fitness
        any_valid = False
        for j in range(search_cfg.proposals_per_round):
            cand = propose(best, z, search_cfg, rng, dt=dt, scales=scales)
            if cand.valid:
                any_valid = True
            else:
                invalid_candidates += 1
            accepted = cand.fitness > best.fitness
            writer.write(round_idx, j, cand.fitness, accepted)
            if accepted:
                best = Candidate(
                    params=cand.params,
                    x2_init=cand.x2_init,
                    fitness=cand.fitness,
                    provenance=(round_idx, j, "proposal"),
                )
                best_fit_result = None
        if not any_valid:
            all_invalid_rounds += 1
            if not halved_once:
                scales = scales.halved()
                halved_once = True
        if round_idx % search_cfg.vp_every == 0 or round_idx == search_cfg.max_rounds:
            vp_candidate, vp_result = _run_vp(z, best, vp_cfg, gamma, dt, round_idx)
            accepted = vp_candidate is not None and vp_candidate.fitness > best.fitness
            if vp_candidate is not None:
                writer.write(round_idx, -1, vp_candidate.fitness, accepted)
            if accepted:
                best = vp_candidate
                best_fit_result = vp_result
        improvement = best.fitness - round_start_fitness
        if math.isfinite(improvement) and improvement > search_cfg.plateau_tol:
            no_improve = 0
        elif not math.isfinite(round_start_fitness) and best.fitness > round_start_fitness:
            no_improve = 0
        else:
            no_improve += 1
        if no_improve >= search_cfg.patience:
            stop_reason = "fitness plateau"
            break

    return _finalize(
        z, best, best_fit_result, search_cfg, vp_cfg, dt, gamma,
        stop_reason, rounds_run, invalid_candidates, all_invalid_rounds, halved_once,
    )


def _run_vp(
    z: ObservationSet,
    best: Candidate,
    vp_cfg: PenaltyConfig,
    gamma: float,
    dt: float,
    round_idx: int,
) -> tuple[Optional[Candidate], Optional[FitResult]]:
    try:
        seed_params = vp_cfg.bounds.clip_params(best.params)
        sim = _simulate_candidate(z, seed_params, best.x2_init, dt)
        x_init = StackedState.from_trajectory(sim) if sim is not None else None
        result = fit(z, vp_cfg, seed_params, x_init, dt=dt)
    except (FitError, SimulationDiverged, ValueError, np.linalg.LinAlgError):
        return None, None
    x2_hat = result.states.x2[0]
    f_vp = score_candidate(z, result.params, x2_hat, gamma, dt)
    cand = Candidate(
        params=result.params,
        x2_init=np.asarray(x2_hat, dtype=float),
        fitness=f_vp,
        provenance=(round_idx, -1, "vp"),
    )
    return cand, result


def _finalize(
    z, best, best_fit_result, search_cfg, vp_cfg, dt, gamma,
    stop_reason, rounds_run, invalid_candidates, all_invalid_rounds, halved_once,
) -> FitResult:
    diagnostics = {
        "stop_reason": stop_reason,
        "rounds": rounds_run,
        "best_fitness": best.fitness if math.isfinite(best.fitness) else None,
        "best_provenance": list(best.provenance),
        "invalid_candidates": invalid_candidates,
        "all_invalid_rounds": all_invalid_rounds,
        "scales_halved": halved_once,
    }
    if best_fit_result is not None:
        result = best_fit_result
        result.config_echo = dict(result.config_echo)
        result.config_echo["search"] = {**search_cfg.echo(), **diagnostics}
        return result
    sim = _simulate_candidate(z, best.params, best.x2_init, dt)
    if sim is None:
        raise RuntimeError(
            "best candidate no longer simulates without divergence; "
            f"stop_reason={stop_reason}"
        )
    echo = vp_cfg.echo()
    echo["dt"] = float(dt)
    echo["substeps"] = 1
    echo["search"] = {**search_cfg.echo(), **diagnostics}
    return FitResult(
        params=best.params,
        states=sim,
        objective_history=[],
        per_component_stats=_component_stats(z.values, sim.x1),
        converged=stop_reason == "fitness plateau",
        reason=f"search stopped: {stop_reason}",
        config_echo=echo,
    )
