"""Data ingestion, SVD preprocessing, segment layout, and connectivity maps.

Raw recordings arrive as P x T matrices (spatial locations by time). The
modeled time series are truncated-SVD temporal components of the row-centered
matrix, carrying sigma_i * v_i so that component amplitudes reflect their
energy; a single scalar (the mean of the component standard deviations)
normalizes all temporal rows at once. Fitted coupling matrices project back to
pixel space through outer products of the spatial components scaled by
sqrt(sigma_i * sigma_j).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import DimensionError


class CsvFormatError(ValueError):
    """Malformed CSV input; the message carries the offending location."""


@dataclass(frozen=True)
class DataMatrix:
    """P x T recording: rows are spatial locations (pixels/cells), columns time."""

    values: np.ndarray
    spatial_shape: Optional[tuple[int, int]] = None
    sample_rate_hz: Optional[float] = None
    names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(values)):
            raise ValueError("data matrix contains non-finite entries")
        if self.spatial_shape is not None:
            r, c = self.spatial_shape
            if r * c != values.shape[0]:
                raise DimensionError(
                    f"spatial_shape {self.spatial_shape} does not cover {values.shape[0]} rows"
                )
        object.__setattr__(self, "values", values)

    @property
    def n_locations(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SvdComponents:
    """Truncated SVD of the row-centered data.

    temporal rows are sigma_i * v_i (scaled right singular vectors), spatial
    rows are the left singular vectors; norm_scale records the scalar divisor
    applied by normalize_components (1.0 when unnormalized).
    """

    temporal: np.ndarray
    spatial: np.ndarray
    singular_values: np.ndarray
    mean_removed: bool = True
    norm_scale: float = 1.0

    def __post_init__(self):
        temporal = np.atleast_2d(np.asarray(self.temporal, dtype=float))
        spatial = np.atleast_2d(np.asarray(self.spatial, dtype=float))
        sigma = np.atleast_1d(np.asarray(self.singular_values, dtype=float))
        m = temporal.shape[0]
        if spatial.shape[0] != m or sigma.shape != (m,):
            raise DimensionError("temporal/spatial/singular_values row counts differ")
        if np.any(sigma < 0) or np.any(np.diff(sigma) > 1e-12):
            raise ValueError("singular values must be nonnegative and nonincreasing")
        object.__setattr__(self, "temporal", temporal)
        object.__setattr__(self, "spatial", spatial)
        object.__setattr__(self, "singular_values", sigma)

    @property
    def m(self) -> int:
        return self.temporal.shape[0]

    @property
    def n_samples(self) -> int:
        return self.temporal.shape[1]


@dataclass(frozen=True)
class Segment:
    train: tuple[int, int]  # half-open [start, stop)
    test: tuple[int, int]

    @property
    def offset(self) -> int:
        return self.train[0]


@dataclass(frozen=True)
class SegmentSplit:
    segments: tuple[Segment, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        prev_end = -1
        for seg in self.segments:
            t0, t1 = seg.train
            s0, s1 = seg.test
            if not (t0 < t1 <= s0 < s1):
                raise ValueError(f"segment ranges out of order: {seg}")
            if t0 <= prev_end:
                raise ValueError("segments overlap or are unordered")
            prev_end = s1 - 1

    @property
    def n_segments(self) -> int:
        return len(self.segments)


def _parse_float(token: str, row: int, col: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise CsvFormatError(
            f"non-numeric value {token!r} at row {row}, column {col}"
        ) from None


def load_csv(path: str | Path, layout: str = "rows=space") -> DataMatrix:
    """Read a comma-separated matrix; `layout` says what the file's rows mean.

    layout="rows=space" stores the file as-is (P x T); layout="rows=time"
    transposes so rows of the result are again spatial locations. A first row
    with any non-numeric token is treated as a header of names. Blank lines
    are skipped; ragged or non-numeric rows raise CsvFormatError with the
    offending location (1-based, counting data rows).
    """
    if layout not in ("rows=space", "rows=time"):
        raise ValueError(f"layout must be 'rows=space' or 'rows=time', got {layout!r}")
    path = Path(path)
    rows: list[list[float]] = []
    names: Optional[tuple[str, ...]] = None
    width = None
    data_row = 0
    with path.open(newline="") as fh:
        for line_no, record in enumerate(csv.reader(fh), start=1):
            if not record or all(tok.strip() == "" for tok in record):
                continue
            tokens = [tok.strip() for tok in record]
            if data_row == 0 and names is None:
                numeric = True
                for tok in tokens:
                    try:
                        float(tok)
                    except ValueError:
                        numeric = False
                        break
                if not numeric:
                    names = tuple(tokens)
                    width = len(tokens)
                    continue
            data_row += 1
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise CsvFormatError(
                    f"line {line_no}: expected {width} fields, got {len(tokens)}"
                )
            rows.append(
                [_parse_float(tok, data_row, c + 1) for c, tok in enumerate(tokens)]
            )
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    values = np.array(rows, dtype=float)
    if layout == "rows=time":
        values = values.T
    return DataMatrix(values=values, names=names)


def save_csv(values: np.ndarray, path: str | Path, names: Optional[Sequence[str]] = None):
    """Write a matrix with 17-significant-digit floats (round-trip exact)."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    path = Path(path)
    with path.open("w", newline="") as fh:
        if names is not None:
            fh.write(",".join(str(n) for n in names) + "\n")
        for row in values:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def svd_components(data: DataMatrix, m: int) -> SvdComponents:
    """Rank-m truncated SVD of the row-centered matrix.

    Temporal rows carry sigma_i * v_i; each spatial component is flipped (with
    its temporal partner) so its largest-magnitude entry is positive.
    """
    p, t = data.values.shape
    if not 1 <= m <= min(p, t):
        raise ValueError(f"m must be in [1, {min(p, t)}] for a {p}x{t} matrix, got {m}")
    centered = data.values - data.values.mean(axis=1, keepdims=True)
    u, sigma, vt = np.linalg.svd(centered, full_matrices=False)
    u = u[:, :m].T  # (m, P)
    sigma = sigma[:m]
    vt = vt[:m]  # (m, T)
    for i in range(m):
        j = int(np.argmax(np.abs(u[i])))
        if u[i, j] < 0:
            u[i] = -u[i]
            vt[i] = -vt[i]
    temporal = sigma[:, None] * vt
    return SvdComponents(
        temporal=temporal, spatial=u, singular_values=sigma, mean_removed=True
    )


def normalize_components(comps: SvdComponents) -> SvdComponents:
    """Divide every temporal row by the mean of the per-component stds.

    The scalar accumulates into norm_scale so the original scale can be
    restored; renormalizing an already normalized result is a no-op up to
    floating point.
    """
    stds = comps.temporal.std(axis=1)
    scale = float(stds.mean())
    if scale == 0.0 or not math.isfinite(scale):
        raise ValueError("mean of component standard deviations is zero; cannot normalize")
    return SvdComponents(
        temporal=comps.temporal / scale,
        spatial=comps.spatial,
        singular_values=comps.singular_values,
        mean_removed=comps.mean_removed,
        norm_scale=comps.norm_scale * scale,
    )


@dataclass(frozen=True)
class Edge:
    source: int
    target: int
    weight: float
    polarity: str  # "excitatory" | "inhibitory"


def _edges_from_matrix(weights: np.ndarray, row_offset: int) -> list[tuple[float, int, int]]:
    out = []
    targets, sources = np.nonzero(weights)
    for t_idx, s_idx in zip(targets, sources):
        out.append((float(weights[t_idx, s_idx]), int(t_idx) + row_offset, int(s_idx)))
    return out


def connectivity_projection(
    spatial: np.ndarray,
    singular_values: np.ndarray,
    w_models: Sequence[np.ndarray],
    top_k: int,
    *,
    streaming_threshold: int = 4096,
    chunk_rows: int = 512,
) -> list[Edge]:
    """Project summed coupling matrices to pixel-to-pixel edges.

    The pixel weight matrix is F = S' (sum W) S with S = diag(sqrt(sigma)) @
    spatial, so F[p, q] is the net strength of the directed connection q -> p.
    Returns the top_k strictly positive entries as excitatory edges (weight
    descending) followed by the top_k strictly negative entries as inhibitory
    edges (weight ascending). Ties break on (target, source) ascending. Above
    `streaming_threshold` pixels the P x P matrix is processed in row chunks.
    """
    spatial = np.atleast_2d(np.asarray(spatial, dtype=float))
    sigma = np.atleast_1d(np.asarray(singular_values, dtype=float))
    m, p = spatial.shape
    if sigma.shape != (m,):
        raise DimensionError("singular_values must have one entry per spatial row")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if not w_models:
        raise ValueError("need at least one coupling matrix")
    w_sum = np.zeros((m, m))
    for w in w_models:
        w = np.asarray(w, dtype=float)
        if w.shape != (m, m):
            raise DimensionError(f"coupling matrix shape {w.shape}, expected {(m, m)}")
        w_sum = w_sum + w
    scaled = np.sqrt(sigma)[:, None] * spatial  # (m, P)
    left = scaled.T @ w_sum  # (P, m); rows = target pixels

    pos: list[tuple[float, int, int]] = []
    neg: list[tuple[float, int, int]] = []
    step = p if p <= streaming_threshold else chunk_rows
    for start in range(0, p, step):
        block = left[start : start + step] @ scaled  # (rows, P)
        pos.extend(_edges_from_matrix(np.where(block > 0, block, 0.0), start))
        neg.extend(_edges_from_matrix(np.where(block < 0, block, 0.0), start))
        # keep only plausible survivors to bound memory on huge P
        if len(pos) > 4 * top_k:
            pos.sort(key=lambda e: (-e[0], e[1], e[2]))
            del pos[4 * top_k :]
        if len(neg) > 4 * top_k:
            neg.sort(key=lambda e: (e[0], e[1], e[2]))
            del neg[4 * top_k :]
    pos.sort(key=lambda e: (-e[0], e[1], e[2]))
    neg.sort(key=lambda e: (e[0], e[1], e[2]))
    edges = [
        Edge(source=s, target=t, weight=w, polarity="excitatory")
        for w, t, s in pos[:top_k]
    ]
    edges.extend(
        Edge(source=s, target=t, weight=w, polarity="inhibitory")
        for w, t, s in neg[:top_k]
    )
    return edges


def save_edges(edges: Sequence[Edge], path: str | Path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", "weight", "polarity"])
        for e in edges:
            writer.writerow([e.source, e.target, format(e.weight, ".17g"), e.polarity])


def split_segments(
    comps: SvdComponents | int, train_len: int, test_len: int, n_segments: int
) -> SegmentSplit:
    """Contiguous non-overlapping (train, test) pairs laid end to end from t=0."""
    t = comps if isinstance(comps, int) else comps.n_samples
    if train_len < 1 or test_len < 1 or n_segments < 1:
        raise ValueError("train_len, test_len, n_segments must all be >= 1")
    needed = n_segments * (train_len + test_len)
    if needed > t:
        raise ValueError(
            f"need {needed} samples for {n_segments} x ({train_len}+{test_len}) segments, have {t}"
        )
    segments = []
    for s in range(n_segments):
        off = s * (train_len + test_len)
        segments.append(
            Segment(train=(off, off + train_len), test=(off + train_len, off + train_len + test_len))
        )
    return SegmentSplit(
        segments=tuple(segments),
        provenance={"train_len": train_len, "test_len": test_len, "n_segments": n_segments},
    )


def save_components(comps: SvdComponents, out_dir: str | Path, extra_meta: Optional[dict] = None):
    """Persist as a directory of temporal.csv, spatial.csv, sigma.csv, meta.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(comps.temporal, out / "temporal.csv")
    save_csv(comps.spatial, out / "spatial.csv")
    save_csv(comps.singular_values[None, :], out / "sigma.csv")
    meta = {
        "m": comps.m,
        "n_samples": comps.n_samples,
        "n_locations": comps.spatial.shape[1],
        "mean_removed": comps.mean_removed,
        "norm_scale": comps.norm_scale,
    }
    if extra_meta:
        meta.update(extra_meta)
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_components(in_dir: str | Path) -> SvdComponents:
    src = Path(in_dir)
    temporal = load_csv(src / "temporal.csv").values
    spatial = load_csv(src / "spatial.csv").values
    sigma = load_csv(src / "sigma.csv").values.ravel()
    meta = json.loads((src / "meta.json").read_text())
    return SvdComponents(
        temporal=temporal,
        spatial=spatial,
        singular_values=sigma,
        mean_removed=bool(meta.get("mean_removed", True)),
        norm_scale=float(meta.get("norm_scale", 1.0)),
    )
