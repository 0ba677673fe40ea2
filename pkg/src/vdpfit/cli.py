"""Command-line front end.

Subcommands: svd (decompose and normalize a recording), fit (estimate
oscillator parameters for one series), forecast (sliding-window benchmark),
connectivity (project coupling matrices to pixel edges), export-sim
(simulation corpus generation).

Exit codes: 0 success, 1 data or runtime failure, 2 usage or config error.
Primary outputs carry no timestamps, so a fixed seed reproduces them
byte for byte. The VDPFIT_OUT environment variable supplies the default
output root when -o/--out is omitted.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import (
    CsvFormatError,
    load_components,
    load_csv,
    normalize_components,
    save_components,
    save_edges,
    connectivity_projection,
    split_segments,
    svd_components,
)
from .estimator import FitError, FitResult, ParamBounds, PenaltyConfig
from .forecast import VarMethod, VdpMethod, evaluate, export_simulations, write_corpus
from .model import DimensionError, ObservationSet, SimulationDiverged, VdpParams
from .search import SearchConfig, StepScales, search_and_refine

OUT_ENV = "VDPFIT_OUT"


class ConfigError(Exception):
    """Usage-class problem (bad flag combination, bad config); exits with 2."""


def _resolve_out(args) -> Path:
    root = args.out if args.out else os.environ.get(OUT_ENV, ".")
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_json(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def _reject_unknown(doc: dict, allowed: set[str], where: str):
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown config key {where}{key!r}")


_BOUND_KEYS = {"alpha1", "alpha2", "coupling"}
_SCALE_KEYS = {"alpha", "coupling", "x2"}
_PENALTY_KEYS = {
    "lam",
    "lam_schedule",
    "inner_tol",
    "inner_tol_start",
    "inner_max_iter",
    "inner_max_iter_start",
    "outer_step",
    "outer_max_iter",
    "outer_ftol",
    "outer_gtol",
    "armijo_c",
    "bounds",
}
_SEARCH_KEYS = {
    "gamma",
    "max_rounds",
    "proposals_per_round",
    "vp_every",
    "patience",
    "plateau_tol",
    "x2_bounds",
    "step_scales",
}
_FIT_KEYS = {"dt", "substeps", "init_alpha", "init_coupling", "init_x2", "penalty", "search"}


def _bounds_from(doc: dict) -> ParamBounds:
    _reject_unknown(doc, _BOUND_KEYS, "penalty.bounds.")
    kwargs = {k: tuple(float(v) for v in doc[k]) for k in doc}
    try:
        return ParamBounds(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad bounds: {exc}")


def _penalty_from(doc: dict) -> PenaltyConfig:
    _reject_unknown(doc, _PENALTY_KEYS, "penalty.")
    kwargs = dict(doc)
    if "bounds" in kwargs:
        kwargs["bounds"] = _bounds_from(kwargs["bounds"])
    if "lam_schedule" in kwargs and kwargs["lam_schedule"] is not None:
        kwargs["lam_schedule"] = tuple(kwargs["lam_schedule"])
    try:
        return PenaltyConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad penalty config: {exc}")


def _search_from(doc: dict, seed: int, bounds: ParamBounds) -> SearchConfig:
    _reject_unknown(doc, _SEARCH_KEYS, "search.")
    kwargs = dict(doc)
    if "step_scales" in kwargs:
        _reject_unknown(kwargs["step_scales"], _SCALE_KEYS, "search.step_scales.")
        kwargs["step_scales"] = StepScales(**kwargs["step_scales"])
    if "x2_bounds" in kwargs:
        kwargs["x2_bounds"] = tuple(float(v) for v in kwargs["x2_bounds"])
    try:
        return SearchConfig(seed=seed, bounds=bounds, **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad search config: {exc}")


def _fit_configs(path: str, seed: int) -> tuple[float, int, PenaltyConfig, SearchConfig, dict]:
    doc = _load_json(path)
    if "dt" not in doc:
        raise ConfigError("missing required config key 'dt'")
    _reject_unknown(doc, _FIT_KEYS, "")
    dt = float(doc["dt"])
    if not dt > 0:
        raise ConfigError("dt must be positive")
    substeps = int(doc.get("substeps", 1))
    p_cfg = _penalty_from(doc.get("penalty", {}))
    s_cfg = _search_from(doc.get("search", {}), seed, p_cfg.bounds)
    return dt, substeps, p_cfg, s_cfg, doc


def _init_params(doc: dict, m: int) -> Optional[VdpParams]:
    if "init_alpha" not in doc and "init_coupling" not in doc:
        return None
    alpha = np.asarray(doc.get("init_alpha", [1.0, 1.0]), dtype=float)
    if alpha.shape == (2,):
        alpha = np.tile(alpha, (m, 1))
    coupling = np.asarray(doc.get("init_coupling", np.zeros((m, m))), dtype=float)
    if coupling.ndim == 0:
        coupling = np.full((m, m), float(coupling))
    try:
        return VdpParams(alpha=alpha, coupling=coupling)
    except (ValueError, DimensionError) as exc:
        raise ConfigError(f"bad initial parameters: {exc}")


def _load_series(path: str, layout: str) -> np.ndarray:
    """Return observations as (n_samples, m); directories hold components."""
    p = Path(path)
    if p.is_dir():
        return load_components(p).temporal.T
    return load_csv(p, layout=layout).values.T


def cmd_svd(args) -> int:
    data = load_csv(args.input, layout=args.layout)
    limit = min(data.values.shape)
    if args.components > limit:
        raise ConfigError(
            f"m={args.components} exceeds min(locations, samples)={limit}"
        )
    comps = svd_components(data, args.components)
    if not args.raw:
        comps = normalize_components(comps)
    out = _resolve_out(args)
    extra = {"normalized": not args.raw, "layout": args.layout}
    save_components(comps, out, extra_meta=extra)
    print(f"wrote {args.components} components ({data.values.shape[0]} locations, "
          f"{comps.n_samples} samples) to {out}")
    return 0


def cmd_fit(args) -> int:
    dt, substeps, p_cfg, s_cfg, doc = _fit_configs(args.config, args.seed)
    if args.vp_only:
        s_cfg = replace(s_cfg, max_rounds=0)
    z_values = _load_series(args.input, args.layout)
    z = ObservationSet(z_values)
    init = _init_params(doc, z.m)
    x2_init = None
    if "init_x2" in doc:
        x2_init = np.asarray(doc["init_x2"], dtype=float)
        if x2_init.shape != (z.m,):
            raise ConfigError(f"init_x2 must have length {z.m}")
    out = _resolve_out(args)
    with (out / "trace.ndjson").open("w") as trace:
        result = search_and_refine(
            z, s_cfg, p_cfg, dt=dt, init=init, x2_init=x2_init, trace=trace
        )
    result.config_echo["seed"] = args.seed
    result.config_echo["substeps"] = substeps
    (out / "fit.json").write_text(json.dumps(result.to_json_dict(), indent=2) + "\n")
    print(f"fit: converged={result.converged} ({result.reason}); wrote {out / 'fit.json'}")
    return 0


_KNOWN_METHODS = ("var", "vdp")


def cmd_forecast(args) -> int:
    names = [n.strip() for n in args.methods.split(",") if n.strip()]
    for n in names:
        if n not in _KNOWN_METHODS:
            raise ConfigError(
                f"unknown method {n!r}; valid methods: {', '.join(_KNOWN_METHODS)}"
            )
    data = _load_series(args.input, args.layout).T  # (m, T)
    split = split_segments(data.shape[1], args.train_len, args.test_len, args.segments)
    methods = []
    for n in names:
        if n == "var":
            methods.append(VarMethod(order=args.var_order, refit_per_window=args.var_refit))
        else:
            if not args.config or args.seed is None:
                raise ConfigError("the vdp method needs --config and --seed")
            dt, substeps, p_cfg, s_cfg, doc = _fit_configs(args.config, args.seed)
            if args.vp_only:
                s_cfg = replace(s_cfg, max_rounds=0)
            fits = []
            for s_idx, seg in enumerate(split.segments):
                z = ObservationSet(data[:, seg.train[0] : seg.train[1]].T)
                fits.append(
                    search_and_refine(
                        z,
                        replace(s_cfg, seed=args.seed + s_idx),
                        p_cfg,
                        dt=dt,
                        init=_init_params(doc, z.m),
                    )
                )
            methods.append(VdpMethod(fits))
    report = evaluate(methods, split, data, horizon=args.horizon, protocol=args.protocol)
    report.metadata["cli"] = {
        "methods": names,
        "horizon": args.horizon,
        "protocol": args.protocol,
        "var_order": args.var_order,
    }
    out = _resolve_out(args)
    report.save_json(out / "report.json")
    report.save_csv(out / "report.csv")
    for name, st in report.methods.items():
        print(f"{name}: median rmse at h={args.horizon}: {st.rmse_median[-1]:.6g} "
              f"({st.n_windows} windows, {st.skipped_windows} skipped)")
    return 0


def _load_fits(paths) -> list[FitResult]:
    fits = []
    for p in paths:
        doc = _load_json(p)
        try:
            fits.append(FitResult.from_json_dict(doc))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{p}: not a fit result ({exc})")
    return fits


def cmd_connectivity(args) -> int:
    comps = load_components(args.components)
    fits = _load_fits(args.fits)
    for p, f in zip(args.fits, fits):
        if f.params.m != comps.m:
            raise ConfigError(
                f"{p}: coupling is {f.params.m}x{f.params.m}, components have m={comps.m}"
            )
    edges = connectivity_projection(
        comps.spatial,
        comps.singular_values,
        [f.params.coupling for f in fits],
        args.top_k,
    )
    out = _resolve_out(args)
    save_edges(edges, out / "edges.csv")
    n_exc = sum(1 for e in edges if e.polarity == "excitatory")
    print(f"wrote {n_exc} excitatory + {len(edges) - n_exc} inhibitory edges "
          f"to {out / 'edges.csv'}")
    return 0


def cmd_export_sim(args) -> int:
    fits = _load_fits(args.fits)
    real = None
    if args.real:
        real = [_load_series(args.real, args.layout)]
    result = export_simulations(
        fits,
        n_series=args.n_series,
        length=args.length,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        real_series=real,
    )
    out = _resolve_out(args)
    write_corpus(result, out)
    print(f"wrote {len(result.simulated.series)} simulated "
          f"(+{result.simulated.skipped} skipped) and {len(result.noisy_real.series)} "
          f"noisy-real series to {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vdpfit",
        description="Coupled-oscillator fitting, forecasting, and connectivity tools.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("-o", "--out", help=f"output directory (default ${OUT_ENV} or '.')")
        p.add_argument(
            "--layout",
            choices=["rows=space", "rows=time"],
            default="rows=space",
            help="what the input CSV's rows mean",
        )

    p = sub.add_parser("svd", help="decompose a recording into temporal components")
    p.add_argument("input")
    p.add_argument("-m", "--components", type=int, required=True)
    p.add_argument("--raw", action="store_true", help="skip variance normalization")
    add_common(p)
    p.set_defaults(func=cmd_svd)

    p = sub.add_parser("fit", help="fit oscillator parameters to one series")
    p.add_argument("input", help="series CSV or a components directory")
    p.add_argument("--config", required=True, help="JSON config (requires 'dt')")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--vp-only", action="store_true", help="skip the stochastic search")
    add_common(p)
    p.set_defaults(func=cmd_fit, layout="rows=time")

    p = sub.add_parser("forecast", help="sliding-window forecast benchmark")
    p.add_argument("input", help="series CSV or a components directory")
    p.add_argument("--methods", default="var,vdp")
    p.add_argument("--train-len", type=int, required=True)
    p.add_argument("--test-len", type=int, required=True)
    p.add_argument("--segments", type=int, required=True)
    p.add_argument("--horizon", type=int, default=9)
    p.add_argument("--protocol", choices=["short", "long"], default="short")
    p.add_argument("--var-order", type=int, default=6)
    p.add_argument("--var-refit", action="store_true")
    p.add_argument("--config", help="fit config for the vdp method")
    p.add_argument("--seed", type=int)
    p.add_argument("--vp-only", action="store_true", help="skip the stochastic search")
    add_common(p)
    p.set_defaults(func=cmd_forecast, layout="rows=time")

    p = sub.add_parser("connectivity", help="project coupling matrices to pixel edges")
    p.add_argument("components", help="components directory from `vdpfit svd`")
    p.add_argument("fits", nargs="+", help="fit.json files to sum")
    p.add_argument("--top-k", type=int, default=200)
    add_common(p)
    p.set_defaults(func=cmd_connectivity)

    p = sub.add_parser("export-sim", help="generate a simulation corpus")
    p.add_argument("fits", nargs="+", help="fit.json files to draw from")
    p.add_argument("--n-series", type=int, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--real", help="optional real series (CSV or components dir)")
    add_common(p)
    p.set_defaults(func=cmd_export_sim, layout="rows=time")

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CsvFormatError, FitError, SimulationDiverged, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
