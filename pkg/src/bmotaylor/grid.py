"""Box grids, cell-sampled fields, cubes and prefix-sum tables.

Fields are sampled at cell centres of a uniform axis-aligned grid and every
integral is a midpoint sum over cells.  Tensor fields store one ``N x n``
matrix per cell in an array of shape ``(*grid.shape, N, n)``; scalar grid
functions store ``N`` components per cell in ``(*grid.shape, N)``.  Both are
read-only once built.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .exceptions import DomainError

__all__ = [
    "Grid",
    "TensorField",
    "ScalarGridFunction",
    "Cube",
    "PrefixTable",
    "cube_mean",
    "cube_oscillation",
    "enumerate_cubes",
    "count_cubes",
    "lp_norm",
    "linf_norm",
    "gradient",
    "gradient_array",
    "gradient_transpose",
    "read_gf1",
    "write_gf1",
]

CUBE_MODES = ("all", "dyadic")


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid on an axis-aligned box.

    ``origin`` is the physical coordinate of the centre of cell ``(0, ..., 0)``;
    it defaults to ``h/2`` on every axis so the box starts at 0.
    """

    shape: tuple[int, ...]
    spacing: float = 1.0
    origin: tuple[float, ...] | None = None

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if not 1 <= len(shape) <= 3:
            raise DomainError(f"grid dimension must be 1, 2 or 3, got {len(shape)}")
        if any(s < 2 for s in shape):
            raise DomainError(f"every axis needs at least 2 cells, got shape {shape}")
        h = float(self.spacing)
        if not (np.isfinite(h) and h > 0):
            raise DomainError(f"spacing must be positive and finite, got {self.spacing}")
        origin = self.origin
        if origin is None:
            origin = (0.5 * h,) * len(shape)
        origin = tuple(float(o) for o in origin)
        if len(origin) != len(shape):
            raise DomainError("origin and shape have different lengths")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", h)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def unit(cls, shape: Sequence[int] | int) -> "Grid":
        """Grid with spacing ``1/shape[0]`` so a cubic grid has unit measure."""
        if isinstance(shape, (int, np.integer)):
            shape = (int(shape),)
        h = 1.0 / shape[0]
        return cls(tuple(shape), h)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def measure(self) -> float:
        return self.cell_volume * self.cells

    def centers(self) -> np.ndarray:
        """Cell-centre coordinates, shape ``(*shape, dim)``."""
        axes = [o + self.spacing * np.arange(s) for o, s in zip(self.origin, self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "spacing": self.spacing, "origin": list(self.origin)}


def _safe_norm(v: np.ndarray) -> np.ndarray:
    """Euclidean norm over the last axis without squaring into under- or overflow."""
    m = float(np.abs(v).max()) if v.size else 0.0
    if m == 0 or 1e-150 < m < 1e150:
        return np.sqrt(np.einsum("...i,...i->...", v, v))
    w = v / m
    return m * np.sqrt(np.einsum("...i,...i->...", w, w))


def _frozen_array(values, expected_shape: tuple[int, ...], what: str) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    if arr.shape != expected_shape:
        raise DomainError(f"{what} values have shape {arr.shape}, expected {expected_shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TensorField:
    """Matrix-valued grid function, one ``rows x grid.dim`` matrix per cell."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim != self.grid.dim + 2:
            raise DomainError(
                f"tensor field needs {self.grid.dim + 2} array axes, got {arr.ndim}"
            )
        expected = self.grid.shape + (arr.shape[-2], self.grid.dim)
        if arr.shape[-2] < 1:
            raise DomainError("tensor field needs at least one row")
        object.__setattr__(self, "values", _frozen_array(arr, expected, "tensor field"))

    @classmethod
    def constant(cls, grid: Grid, matrix) -> "TensorField":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(grid, np.broadcast_to(matrix, grid.shape + matrix.shape))

    @classmethod
    def zeros(cls, grid: Grid, rows: int = 1) -> "TensorField":
        return cls(grid, np.zeros(grid.shape + (rows, grid.dim)))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> "TensorField":
        """Sample ``fn`` at cell centres; ``fn`` maps ``(..., dim)`` to ``(..., N, dim)``."""
        return cls(grid, fn(grid.centers()))

    @property
    def rows(self) -> int:
        return self.values.shape[-2]

    @property
    def cols(self) -> int:
        return self.values.shape[-1]

    def pointwise_norm(self) -> np.ndarray:
        """Frobenius norm in each cell."""
        return _safe_norm(self.values.reshape(self.values.shape[:-2] + (-1,)))

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=tuple(range(self.grid.dim)))

    @cached_property
    def table(self) -> "PrefixTable":
        return PrefixTable(self.values, self.grid.dim)

    def _check_compatible(self, other: "TensorField"):
        if other.grid != self.grid or other.values.shape != self.values.shape:
            raise DomainError("tensor fields live on different grids or have different shapes")

    def __add__(self, other: "TensorField") -> "TensorField":
        self._check_compatible(other)
        return TensorField(self.grid, self.values + other.values)

    def __sub__(self, other: "TensorField") -> "TensorField":
        self._check_compatible(other)
        return TensorField(self.grid, self.values - other.values)

    def __mul__(self, alpha: float) -> "TensorField":
        return TensorField(self.grid, float(alpha) * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "TensorField":
        return TensorField(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class ScalarGridFunction:
    """``R^N``-valued grid function (displacements, boundary data, loads)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim == self.grid.dim:
            arr = arr[..., None]
        if arr.ndim != self.grid.dim + 1 or arr.shape[-1] < 1:
            raise DomainError("scalar grid function needs shape (*grid.shape, N)")
        expected = self.grid.shape + (arr.shape[-1],)
        object.__setattr__(self, "values", _frozen_array(arr, expected, "grid function"))

    @classmethod
    def zeros(cls, grid: Grid, components: int = 1) -> "ScalarGridFunction":
        return cls(grid, np.zeros(grid.shape + (components,)))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> "ScalarGridFunction":
        """Sample ``fn`` at cell centres; ``fn`` maps ``(..., dim)`` to ``(..., N)``."""
        return cls(grid, fn(grid.centers()))

    @classmethod
    def affine(cls, grid: Grid, matrix, offset=None) -> "ScalarGridFunction":
        """``u(x) = A x + b`` sampled at cell centres."""
        A = np.atleast_2d(np.asarray(matrix, dtype=float))
        b = np.zeros(A.shape[0]) if offset is None else np.asarray(offset, dtype=float)
        return cls.from_function(grid, lambda x: x @ A.T + b)

    @property
    def components(self) -> int:
        return self.values.shape[-1]

    def pointwise_norm(self) -> np.ndarray:
        return _safe_norm(self.values)

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=tuple(range(self.grid.dim)))

    def _check_compatible(self, other: "ScalarGridFunction"):
        if other.grid != self.grid or other.values.shape != self.values.shape:
            raise DomainError("grid functions live on different grids or have different shapes")

    def __add__(self, other: "ScalarGridFunction") -> "ScalarGridFunction":
        self._check_compatible(other)
        return ScalarGridFunction(self.grid, self.values + other.values)

    def __sub__(self, other: "ScalarGridFunction") -> "ScalarGridFunction":
        self._check_compatible(other)
        return ScalarGridFunction(self.grid, self.values - other.values)

    def __mul__(self, alpha: float) -> "ScalarGridFunction":
        return ScalarGridFunction(self.grid, float(alpha) * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "ScalarGridFunction":
        return ScalarGridFunction(self.grid, -self.values)


@dataclass(frozen=True)
class Cube:
    """Axis-aligned hypercube made of ``side**n`` whole cells."""

    origin: tuple[int, ...]
    side: int

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))
        object.__setattr__(self, "side", int(self.side))
        if self.side < 1 or any(o < 0 for o in self.origin):
            raise DomainError(f"invalid cube {self.origin} side {self.side}")

    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(o, o + self.side) for o in self.origin)

    def contained_in(self, grid: Grid) -> bool:
        return len(self.origin) == grid.dim and all(
            o + self.side <= s for o, s in zip(self.origin, grid.shape)
        )

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "side": self.side}


def _check_cube(grid: Grid, q: Cube):
    if not q.contained_in(grid):
        raise DomainError(f"cube {q.origin} of side {q.side} is not inside grid {grid.shape}")


class PrefixTable:
    """Summed-area table over the leading ``dim`` axes of an array.

    Sums are accumulated in extended precision after subtracting the global
    mean of each component, which keeps rectangle queries accurate even when
    the field has a large constant part.  A second table holds the squared
    pointwise norm of the shifted values; together they give, for any cube,
    the variance-type bound ``sqrt(<|F|^2> - |<F>|^2)`` on the mean
    oscillation.
    """

    def __init__(self, values: np.ndarray, dim: int):
        values = np.asarray(values, dtype=float)
        self.dim = dim
        self.shape = values.shape[:dim]
        spatial = tuple(range(dim))
        self.shift = values.mean(axis=spatial)
        centred = values.astype(np.longdouble) - self.shift
        sq = (centred**2).reshape(self.shape + (-1,)).sum(axis=-1)
        self.sums = self._accumulate(centred)
        self.sq_sums = self._accumulate(sq)
        # worst-case rounding of a box query, for the bound slack
        grow = 2**dim * max(1, int(np.prod(self.shape))) * float(np.finfo(np.longdouble).eps)
        self._err_sum = grow * float(np.abs(centred).sum())
        self._err_sq = grow * float(sq.sum())

    def _accumulate(self, arr: np.ndarray) -> np.ndarray:
        pad = [(1, 0)] * self.dim + [(0, 0)] * (arr.ndim - self.dim)
        out = np.pad(arr, pad)
        for axis in range(self.dim):
            np.cumsum(out, axis=axis, out=out)
        return out

    def _boxes(self, table: np.ndarray, side: int) -> np.ndarray:
        total = None
        for corner in itertools.product((0, 1), repeat=self.dim):
            index = tuple(
                slice(side, None) if c else slice(0, n + 1 - side)
                for c, n in zip(corner, self.shape)
            )
            sign = (-1) ** (self.dim - sum(corner))
            term = table[index]
            total = sign * term if total is None else total + sign * term
        return total

    def window_sums(self, side: int) -> np.ndarray:
        """Sums of the shifted values over every cube of ``side``, indexed by origin."""
        return self._boxes(self.sums, side)

    def window_means(self, side: int) -> np.ndarray:
        means = self._boxes(self.sums, side) / side**self.dim + self.shift
        return means.astype(float)

    def window_bounds(self, side: int) -> np.ndarray:
        """Upper bound on the mean oscillation of every cube of ``side``.

        Uses ``mean |F - <F>| <= sqrt(mean |F|^2 - |mean F|^2)``; a relative
        slack is added so roundoff can only loosen the bound.
        """
        vol = side**self.dim
        sq_mean = self._boxes(self.sq_sums, side) / vol
        m = self._boxes(self.sums, side) / vol
        m2 = (m**2).reshape(m.shape[: self.dim] + (-1,)).sum(axis=-1)
        err_m = self._err_sum / vol
        slack = self._err_sq / vol + 2 * np.sqrt(m2) * err_m + err_m**2
        var = np.maximum(sq_mean - m2, 0) + 1e-12 * np.abs(sq_mean) + slack
        return np.sqrt(var.astype(float)) * (1 + 1e-12)

    def cube_sum(self, q: Cube) -> np.ndarray:
        s = self._boxes_at(q)
        return (s + q.side**self.dim * self.shift.astype(np.longdouble)).astype(float)

    def _boxes_at(self, q: Cube) -> np.ndarray:
        total = np.zeros(self.sums.shape[self.dim :], dtype=np.longdouble)
        for corner in itertools.product((0, 1), repeat=self.dim):
            idx = tuple(o + c * q.side for o, c in zip(q.origin, corner))
            sign = (-1) ** (self.dim - sum(corner))
            total = total + sign * self.sums[idx]
        return total

    def cube_mean(self, q: Cube) -> np.ndarray:
        return (self._boxes_at(q) / q.side**self.dim + self.shift).astype(float)


def cube_mean(field: TensorField, q: Cube) -> np.ndarray:
    """Average of ``field`` over ``q`` as an ``N x n`` matrix."""
    _check_cube(field.grid, q)
    return field.table.cube_mean(q)


def cube_oscillation(field: TensorField, q: Cube) -> float:
    """Mean of ``|F - <F>_Q|`` over the cells of ``q``."""
    _check_cube(field.grid, q)
    if q.side == 1:
        return 0.0
    dev = field.values[q.slices()] - field.table.cube_mean(q)
    return float(np.sqrt(np.einsum("...ij,...ij->...", dev, dev)).mean())


def count_cubes(grid: Grid, mode: str = "all") -> int:
    if mode not in CUBE_MODES:
        raise DomainError(f"unknown cube mode {mode!r}")
    return sum(int(np.prod(n)) for _, n in _cube_layers(grid, mode))


def _cube_layers(grid: Grid, mode: str) -> Iterator[tuple[int, tuple[int, ...]]]:
    """(side, number of origins per axis) in enumeration order."""
    largest = min(grid.shape)
    if mode == "all":
        for s in range(1, largest + 1):
            yield s, tuple(n - s + 1 for n in grid.shape)
    else:
        s = 1
        while s <= largest:
            yield s, tuple(n // s for n in grid.shape)
            s *= 2


def enumerate_cubes(grid: Grid, mode: str = "all") -> list[Cube]:
    """Every cube of the grid, side ascending then origin lexicographic.

    ``mode="dyadic"`` keeps sides ``1, 2, 4, ...`` at origins that are
    multiples of the side.
    """
    if mode not in CUBE_MODES:
        raise DomainError(f"unknown cube mode {mode!r}")
    stride_of = (lambda s: s) if mode == "dyadic" else (lambda s: 1)
    cubes = []
    for s, counts in _cube_layers(grid, mode):
        step = stride_of(s)
        for origin in itertools.product(*(range(0, c * step, step) for c in counts)):
            cubes.append(Cube(origin, s))
    return cubes


def lp_norm(field: TensorField | ScalarGridFunction, p: float) -> float:
    """Midpoint-rule ``L^p`` norm with the pointwise Frobenius norm."""
    p = float(p)
    if not p >= 1 or not np.isfinite(p):
        raise DomainError(f"lp_norm needs 1 <= p < inf, got {p}")
    a = field.pointwise_norm()
    m = a.max()
    if m == 0:
        return 0.0
    # scale out the maximum so large p does not overflow
    return float(m * (np.sum((a / m) ** p) * field.grid.cell_volume) ** (1.0 / p))


def linf_norm(field: TensorField | ScalarGridFunction) -> float:
    return float(field.pointwise_norm().max())


def gradient(u: ScalarGridFunction) -> TensorField:
    """Forward differences per axis, the last cell repeating the last difference."""
    return TensorField(u.grid, gradient_array(u.grid, u.values))


def gradient_array(grid: Grid, values: np.ndarray) -> np.ndarray:
    """:func:`gradient` on a raw ``(*shape, N)`` array, returning ``(*shape, N, n)``."""
    h = grid.spacing
    parts = []
    for axis in range(grid.dim):
        d = np.diff(values, axis=axis) / h
        last = np.take(d, [-1], axis=axis)
        parts.append(np.concatenate([d, last], axis=axis))
    return np.stack(parts, axis=-1)


def gradient_transpose(grid: Grid, stress: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`gradient` w.r.t. the plain cell-sum inner product.

    ``stress`` has shape ``(*grid.shape, N, n)``; the result ``(*grid.shape, N)``
    satisfies ``sum(stress * grad u) == sum(result * u)`` for every ``u``.
    """
    h = grid.spacing
    out = np.zeros(stress.shape[:-1])
    for axis in range(grid.dim):
        s = np.moveaxis(stress[..., axis], axis, 0)
        t = np.moveaxis(out, axis, 0)
        t[1:] += s[:-1] / h
        t[:-1] -= s[:-1] / h
        t[-1] += s[-1] / h
        t[-2] -= s[-1] / h
    return out


def write_gf1(path: str | Path, field: TensorField) -> None:
    """Write a tensor field in the GF1 text format."""
    g = field.grid
    head = ["GF1", str(g.dim), str(field.rows)]
    head += [str(s) for s in g.shape]
    head += [repr(g.spacing)] + [repr(o) for o in g.origin]
    rows = field.values.reshape(g.cells, -1)
    lines = [" ".join(head)]
    lines += [" ".join(format(v, ".17g") for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_gf1(path: str | Path) -> TensorField:
    """Read a GF1 file written by :func:`write_gf1` (or by hand)."""
    text = Path(path).read_text()
    header, _, body = text.partition("\n")
    tok = header.split()
    if not tok or tok[0] != "GF1":
        raise DomainError(f"{path}: not a GF1 file")
    try:
        n, N = int(tok[1]), int(tok[2])
        shape = tuple(int(t) for t in tok[3 : 3 + n])
        h = float(tok[3 + n])
        origin = tuple(float(t) for t in tok[4 + n : 4 + 2 * n])
    except (IndexError, ValueError) as exc:
        raise DomainError(f"{path}: malformed GF1 header") from exc
    if len(origin) != n or len(tok) != 4 + 2 * n:
        raise DomainError(f"{path}: malformed GF1 header")
    grid = Grid(shape, h, origin)
    data = np.array([float(t) for t in body.split()])
    if data.size != grid.cells * N * n:
        raise DomainError(
            f"{path}: expected {grid.cells * N * n} values, found {data.size}"
        )
    return TensorField(grid, data.reshape(shape + (N, n)))
