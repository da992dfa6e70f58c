"""BMO seminorm and norm of grid tensor fields, plus interpolation constants.

The seminorm is the largest mean oscillation over the cubes of the grid.
:func:`bmo_seminorm` is the fast engine: it bounds every cube's oscillation
from prefix tables, visits cubes in order of decreasing bound and stops as
soon as no remaining bound can beat the running maximum.
:func:`bmo_seminorm_bruteforce` evaluates every cube directly and serves as
its oracle.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DomainError, ResourceError
from .grid import (
    CUBE_MODES,
    Cube,
    Grid,
    TensorField,
    _cube_layers,
    count_cubes,
    cube_oscillation,
    linf_norm,
    lp_norm,
)

__all__ = [
    "NormReport",
    "InterpolationReport",
    "bmo_seminorm",
    "bmo_seminorm_bruteforce",
    "bmo_norm",
    "linf_domination_check",
    "interpolation_ratio",
    "embedding_ratio",
    "calibrate_j2",
    "calibrate_j1",
    "calibration_family",
]

# elements materialised per vectorised oscillation evaluation
_CHUNK_ELEMENTS = 1 << 21
_CANDIDATE_BATCH = 256


@dataclass(frozen=True)
class NormReport:
    seminorm: float
    mean_abs: float
    bmo_norm: float
    argmax_cube: Cube
    mode: str
    cubes_examined: int

    def to_dict(self) -> dict:
        return {
            "seminorm": self.seminorm,
            "mean_abs": self.mean_abs,
            "bmo_norm": self.bmo_norm,
            "argmax_cube": self.argmax_cube.to_dict(),
            "mode": self.mode,
            "cubes_examined": self.cubes_examined,
        }


@dataclass(frozen=True)
class InterpolationReport:
    p: float
    q: float
    lhs: float
    rhs_factor: float
    ratio: float
    j2_estimate: float

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "q": self.q,
            "lhs": self.lhs,
            "rhs_factor": self.rhs_factor,
            "ratio": self.ratio,
            "j2_estimate": self.j2_estimate,
        }


def _mean_abs(field: TensorField) -> float:
    return float(np.linalg.norm(field.mean()))


def _report(field, mode, seminorm, cube, examined) -> NormReport:
    mean_abs = _mean_abs(field)
    return NormReport(seminorm, mean_abs, seminorm + mean_abs, cube, mode, examined)


def _layer_table(grid: Grid, mode: str):
    """Per layer: (side, origin counts, first enumeration index)."""
    layers, start = [], 0
    for side, counts in _cube_layers(grid, mode):
        layers.append((side, counts, start))
        start += int(np.prod(counts))
    return layers, start


def _cube_at(layer, local: int, mode: str) -> Cube:
    side, counts, _ = layer
    origin = np.unravel_index(local, counts)
    step = side if mode == "dyadic" else 1
    return Cube(tuple(int(o) * step for o in origin), side)


def _window_oscillations(values, dim, side, origins, means) -> np.ndarray:
    """Mean oscillation of the cubes of ``side`` at ``origins`` (tuple of index arrays)."""
    win_axes = tuple(range(dim))
    windows = sliding_window_view(values, (side,) * dim, axis=win_axes)
    per = int(np.prod(values.shape[dim:])) * side**dim
    step = max(1, _CHUNK_ELEMENTS // per)
    k = len(origins[0])
    out = np.empty(k)
    expand = (slice(None),) * 3 + (None,) * dim
    for lo in range(0, k, step):
        sel = tuple(o[lo : lo + step] for o in origins)
        dev = windows[sel] - means[sel][expand]
        norms = np.sqrt(np.einsum("kij...,kij...->k...", dev, dev))
        out[lo : lo + step] = norms.reshape(norms.shape[0], -1).mean(axis=1)
    return out


def bmo_seminorm(field: TensorField, mode: str = "all") -> NormReport:
    """Supremum of the mean oscillation over the grid's cubes.

    Cubes whose prefix-table bound cannot reach the running maximum are never
    scanned, so the result coincides with the exhaustive sweep; ties go to the
    first cube in enumeration order.
    """
    if mode not in CUBE_MODES:
        raise DomainError(f"unknown cube mode {mode!r}")
    grid, dim = field.grid, field.grid.dim
    table = field.table
    layers, total = _layer_table(grid, mode)

    dev = field.values - field.mean()
    cap = 2.0 * float(np.sqrt(np.einsum("...ij,...ij->...", dev, dev)).max())
    cap = cap * (1 + 1e-12) + 1e-300

    bounds = np.zeros(total)
    for side, counts, start in layers:
        if side == 1:
            continue
        b = table.window_bounds(side)
        if mode == "dyadic":
            b = b[tuple(slice(0, c * side, side) for c in counts)]
        bounds[start : start + b.size] = np.minimum(b.ravel(), cap)

    order = np.argsort(-bounds, kind="stable")
    starts = np.array([start for _, _, start in layers])
    best, best_index, examined = 0.0, 0, 0
    mean_cache: dict[int, np.ndarray] = {}

    for pos in range(0, total, _CANDIDATE_BATCH):
        batch = order[pos : pos + _CANDIDATE_BATCH]
        if bounds[batch[0]] < best or bounds[batch[0]] == 0.0:
            break
        batch = batch[bounds[batch] >= best]
        layer_of = np.searchsorted(starts, batch, side="right") - 1
        for li in np.unique(layer_of):
            side, counts, start = layers[li]
            idx = batch[layer_of == li]
            origins = np.unravel_index(idx - start, counts)
            if mode == "dyadic":
                origins = tuple(o * side for o in origins)
            if side not in mean_cache:
                mean_cache[side] = table.window_means(side)
            vals = _window_oscillations(field.values, dim, side, origins, mean_cache[side])
            examined += idx.size
            top = vals.max()
            if top >= best:
                winner = idx[vals == top].min()
                if top > best or winner < best_index:
                    best, best_index = float(top), int(winner)

    li = int(np.searchsorted(starts, best_index, side="right") - 1)
    cube = _cube_at(layers[li], best_index - layers[li][2], mode)
    seminorm = cube_oscillation(field, cube)
    return _report(field, mode, seminorm, cube, examined)


def bmo_seminorm_bruteforce(
    field: TensorField, mode: str = "all", budget: int = 10**7
) -> NormReport:
    """Exhaustive two-pass evaluation of every cube, no tables and no pruning."""
    if mode not in CUBE_MODES:
        raise DomainError(f"unknown cube mode {mode!r}")
    grid, dim = field.grid, field.grid.dim
    total = count_cubes(grid, mode)
    if total > budget:
        raise ResourceError(f"{total} cubes exceed the brute-force budget of {budget}")
    values = field.values
    win_axes = tuple(range(dim))
    comp = values.shape[dim:]
    best, best_cube = -1.0, None
    for side, counts in _cube_layers(grid, mode):
        windows = sliding_window_view(values, (side,) * dim, axis=win_axes)
        if mode == "dyadic":
            windows = windows[tuple(slice(0, c * side, side) for c in counts)]
        inner = tuple(range(dim + 2, 2 * dim + 2))
        per = int(np.prod(counts[1:])) * int(np.prod(comp)) * side**dim
        step = max(1, _CHUNK_ELEMENTS // max(per, 1))
        layer = np.empty(counts)
        for lo in range(0, counts[0], step):
            w = windows[lo : lo + step]
            mean = w.mean(axis=inner, dtype=np.longdouble).astype(float)
            d = w - mean[(Ellipsis,) + (None,) * dim]
            norms = np.sqrt((d * d).sum(axis=(dim, dim + 1)))
            layer[lo : lo + step] = norms.mean(axis=tuple(range(dim, 2 * dim)))
        flat = layer.ravel()
        i = int(np.argmax(flat))
        if flat[i] > best:
            step_o = side if mode == "dyadic" else 1
            origin = tuple(int(o) * step_o for o in np.unravel_index(i, counts))
            best, best_cube = float(flat[i]), Cube(origin, side)
    return _report(field, mode, best, best_cube, total)


def bmo_norm(field: TensorField, mode: str = "all") -> float:
    """Seminorm plus ``|<F>_Omega|``."""
    return bmo_seminorm(field, mode).bmo_norm


def linf_domination_check(field: TensorField, mode: str = "all") -> tuple[bool, float]:
    """Check that the seminorm is at most twice the sup norm; returns (ok, margin)."""
    margin = 2.0 * linf_norm(field) - bmo_seminorm(field, mode).seminorm
    return margin >= 0, margin


def _check_exponents(p: float, q: float):
    if not (1 <= p < q < np.inf):
        raise DomainError(f"need 1 <= p < q < inf, got p={p}, q={q}")


def interpolation_ratio(
    field: TensorField, p: float, q: float, mode: str = "all", bmo: float | None = None
) -> InterpolationReport:
    """``||F||_q / (||F||_BMO^(1-p/q) ||F||_p^(p/q))`` for one field.

    ``bmo`` may be passed when the BMO norm is already known.
    """
    p, q = float(p), float(q)
    _check_exponents(p, q)
    lp = lp_norm(field, p)
    if lp == 0:
        raise DomainError("interpolation ratio is undefined for the zero field")
    if bmo is None:
        bmo = bmo_norm(field, mode)
    lhs = lp_norm(field, q)
    rhs = bmo ** (1 - p / q) * lp ** (p / q)
    ratio = lhs / rhs
    return InterpolationReport(p, q, lhs, rhs, ratio, ratio)


def embedding_ratio(field: TensorField, q: float, mode: str = "all") -> float:
    """``(avg |F|^q)^(1/q) / ||F||_BMO``, the quantity bounded by J1."""
    q = float(q)
    if not 1 <= q < np.inf:
        raise DomainError(f"need 1 <= q < inf, got {q}")
    bmo = bmo_norm(field, mode)
    if bmo == 0:
        raise DomainError("embedding ratio is undefined for the zero field")
    return lp_norm(field, q) / field.grid.measure ** (1 / q) / bmo


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def calibrate_j2(
    family: Iterable[TensorField], p: float, q: float, mode: str = "all", workers: int = 1
) -> float:
    """Largest interpolation ratio over ``family`` (zero fields are skipped)."""
    _check_exponents(float(p), float(q))
    fields = [f for f in family if lp_norm(f, p) > 0]
    if not fields:
        raise DomainError("calibration family has no nonzero field")
    ratios = _map(lambda f: interpolation_ratio(f, p, q, mode).ratio, fields, workers)
    return float(max(ratios))


def calibrate_j1(family: Iterable[TensorField], q: float, mode: str = "all") -> float:
    fields = [f for f in family if lp_norm(f, 1) > 0]
    if not fields:
        raise DomainError("calibration family has no nonzero field")
    return float(max(embedding_ratio(f, q, mode) for f in fields))


def calibration_family(
    grid: Grid, rows: int = 1, seed: int = 0, n_random: int = 8
) -> list[TensorField]:
    """Generator family for interpolation constants.

    Constants, axis-aligned steps, logarithmic profiles ``log|x - x0|`` (the
    model unbounded BMO function, with ``x0`` a third of a cell away from a
    centre so no sample hits the singularity) and seeded Gaussian fields.
    """
    rng = np.random.default_rng(seed)
    n, h = grid.dim, grid.spacing
    x = grid.centers()
    direction = np.ones((rows, n)) / np.sqrt(rows * n)
    fields = [TensorField.constant(grid, direction)]
    fields.append(TensorField.constant(grid, rng.normal(size=(rows, n))))

    lower = np.array(grid.origin) - h / 2
    extent = h * np.array(grid.shape)
    for axis in range(n):
        for frac in (0.25, 0.5):
            cut = lower[axis] + frac * extent[axis]
            profile = np.where(x[..., axis] < cut, 1.0, -1.0)
            fields.append(TensorField(grid, profile[..., None, None] * direction))
    for frac in (0.5, 0.0):
        centre = lower + frac * extent
        idx = np.clip(np.round((centre - np.array(grid.origin)) / h), 0, np.array(grid.shape) - 1)
        x0 = np.array(grid.origin) + idx * h + h / 3
        r = np.linalg.norm(x - x0, axis=-1)
        profile = np.log(r)
        fields.append(TensorField(grid, profile[..., None, None] * direction))
        fields.append(TensorField(grid, (profile - profile.mean())[..., None, None] * direction))
    for _ in range(n_random):
        fields.append(TensorField(grid, rng.normal(size=grid.shape + (rows, n))))
    return fields
