"""Stored-energy integrands ``W(x, K)`` with closed-form derivatives.

The j-th derivative in ``K`` is exposed as a multilinear form: ``eval(j, x, K,
dirs)`` returns ``D^j W(x, K)[dirs[0], ..., dirs[j-1]]``.  Every argument may
carry leading batch axes (one per grid cell, say) which broadcast against
each other; matrices occupy the last two axes and points the last axis.

Built-in families:

* ``quadratic``: ``W = 1/2 K:A[K]`` for a symmetric positive operator ``A``
* ``double_well``: ``W = (|K|^2 - 1)^2``
* ``p_growth``: ``W = (1 + |K|^2)^(m/2)``

each optionally multiplied by a smooth positive weight ``omega(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigurationError, DomainError

__all__ = [
    "Weight",
    "Integrand",
    "QuadraticIntegrand",
    "RadialIntegrand",
    "double_well",
    "p_growth",
    "quadratic",
    "integrand_from_config",
    "FAMILIES",
    "GrowthReport",
    "check_growth",
    "FDCheck",
    "fd_derivative_check",
]

FAMILIES = ("quadratic", "double_well", "p_growth")


def _frob(a, b):
    return np.einsum("...ij,...ij->...", a, b)


@dataclass(frozen=True)
class Weight:
    """``omega(x) = scale * (1 + amplitude * prod_i sin(2 pi frequency x_i))``."""

    scale: float = 1.0
    amplitude: float = 0.0
    frequency: float = 1.0

    def __post_init__(self):
        if self.scale <= 0 or not 0 <= self.amplitude < 1:
            raise DomainError("weight needs scale > 0 and 0 <= amplitude < 1")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        wave = np.prod(np.sin(2 * np.pi * self.frequency * x), axis=-1)
        return self.scale * (1 + self.amplitude * wave)

    @property
    def bounds(self) -> tuple[float, float]:
        return self.scale * (1 - self.amplitude), self.scale * (1 + self.amplitude)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "amplitude": self.amplitude, "frequency": self.frequency}


def _growth_constant(terms, exponent: float) -> float | None:
    """Smallest convenient ``c`` with ``sum a_i rho^d_i <= c (1 + rho^exponent)``.

    Valid when every degree is at most ``exponent``; returns None otherwise.
    """
    if not terms:
        return 0.0
    if any(d > exponent + 1e-12 for _, d in terms):
        return None
    const = sum(a for a, d in terms if d == 0)
    powers = [(a, d) for a, d in terms if d != 0]
    if not powers:
        return const
    if len(powers) == 1 and abs(powers[0][1] - exponent) < 1e-12:
        return max(const, powers[0][0])
    return const + sum(a for a, _ in powers)


class Integrand:
    """Common machinery; subclasses provide ``_derivative`` and growth data."""

    family = "abstract"

    def __init__(self, rows: int, cols: int, k: int, r: float | None, c_k: float | None,
                 weight: Weight | None = None):
        if k < 2:
            raise DomainError(f"derivative order k must be >= 2, got {k}")
        self.rows, self.cols, self.k = int(rows), int(cols), int(k)
        self.weight = weight
        if r is None or c_k is None:
            default_r, default_c = self._default_growth()
            r = default_r if r is None else r
            c_k = default_c if c_k is None else c_k
        self.r, self.c_k = float(r), float(c_k)
        if self.r <= 0 or self.c_k <= 0:
            raise DomainError("growth data needs r > 0 and c_k > 0")

    @property
    def x_dependent(self) -> bool:
        return self.weight is not None

    @property
    def polynomial_degree(self) -> int | None:
        return None

    def _weight(self, x) -> np.ndarray | float:
        if self.weight is None:
            return 1.0
        return self.weight(x)

    def _wmax(self) -> float:
        return 1.0 if self.weight is None else self.weight.bounds[1]

    def eval(self, j: int, x, K, dirs: Sequence = ()) -> np.ndarray:
        """``D^j W(x, K)[dirs...]``."""
        if not 0 <= j <= self.k:
            raise DomainError(f"derivative order {j} outside 0..{self.k}")
        if len(dirs) != j:
            raise DomainError(f"order {j} needs {j} directions, got {len(dirs)}")
        K = np.asarray(K, dtype=float)
        dirs = [np.asarray(d, dtype=float) for d in dirs]
        return self._weight(x) * self._derivative(j, K, dirs)

    def gradient(self, x, K) -> np.ndarray:
        """Matrix representing ``DW(x, K)``."""
        return np.asarray(self._weight(x))[..., None, None] * self._gradient(np.asarray(K, float))

    def hessian_apply(self, x, K, H) -> np.ndarray:
        """Matrix representing ``D^2 W(x, K)[H, .]``."""
        w = np.asarray(self._weight(x))[..., None, None]
        return w * self._hessian_apply(np.asarray(K, float), np.asarray(H, float))

    def difference(self, x, K, H) -> np.ndarray:
        """``W(x, K + H) - W(x, K)``; summed Taylor terms for polynomial W."""
        deg = self.polynomial_degree
        if deg is None:
            return self.eval(0, x, K + H) - self.eval(0, x, K)
        K = np.asarray(K, dtype=float)
        H = np.asarray(H, dtype=float)
        total = 0.0
        for j in range(1, deg + 1):
            total = total + self._derivative(j, K, [H] * j) / math.factorial(j)
        return self._weight(x) * total

    # growth data ----------------------------------------------------------
    def norm_bound_terms(self, j: int):
        """Terms ``(a, d)`` with ``|D^j W(x, K)| <= sum a |K|^d``, or None if unknown."""
        base = self._norm_terms(j)
        if base is None:
            return None
        return [(a * self._wmax(), d) for a, d in base]

    def propagated_constant(self, j: int) -> float | None:
        """Constant ``c_j`` with ``|D^j W| <= c_j (1 + |K|^(r + k - j))``."""
        if j == self.k:
            return self.c_k
        terms = self.norm_bound_terms(j)
        if terms is None:
            return None
        return _growth_constant(terms, self.r + self.k - j)

    def _default_growth(self) -> tuple[float, float]:
        terms = self._norm_terms(self.k)
        if terms is None:
            raise ConfigurationError(
                f"{self.family}: no closed-form growth data for k={self.k}; give r and c_k"
            )
        terms = [(a * self._wmax(), d) for a, d in terms]
        if not terms:
            return 1.0, 1.0
        r = max(d for _, d in terms) or 1.0
        return float(r), float(_growth_constant(terms, r))

    # subclass hooks -------------------------------------------------------
    def _derivative(self, j, K, dirs):
        raise NotImplementedError

    def _gradient(self, K):
        basis = _basis(self.rows, self.cols)
        out = np.zeros(K.shape)
        for (a, b), E in basis:
            out[..., a, b] = self._derivative(1, K, [E])
        return out

    def _hessian_apply(self, K, H):
        basis = _basis(self.rows, self.cols)
        out = np.zeros(np.broadcast_shapes(K.shape, H.shape))
        for (a, b), E in basis:
            out[..., a, b] = self._derivative(2, K, [H, E])
        return out

    def _norm_terms(self, j):
        return None

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "parameters": self._parameters(),
            "k": self.k,
            "r": self.r,
            "c_k": self.c_k,
            "weight": None if self.weight is None else self.weight.to_dict(),
            "N": self.rows,
            "n": self.cols,
        }

    def _parameters(self) -> dict:
        return {}

    def __repr__(self):
        return f"{type(self).__name__}({self.family}, N={self.rows}, n={self.cols}, k={self.k})"


def _basis(rows, cols):
    out = []
    for a in range(rows):
        for b in range(cols):
            E = np.zeros((rows, cols))
            E[a, b] = 1.0
            out.append(((a, b), E))
    return out


class QuadraticIntegrand(Integrand):
    """``W = 1/2 K:A[K]``; ``A`` acts on ``K`` flattened row-major."""

    family = "quadratic"

    def __init__(self, A, rows: int, cols: int, k: int = 2, r=None, c_k=None, weight=None):
        A = np.asarray(A, dtype=float)
        size = rows * cols
        if A.shape != (size, size) or not np.allclose(A, A.T, rtol=0, atol=1e-14 * np.abs(A).max()):
            raise DomainError(f"A must be a symmetric {size}x{size} matrix")
        eig = np.linalg.eigvalsh(A)
        if eig.min() <= 0:
            raise DomainError("A must be positive definite")
        self.A = A
        self._norm = float(eig.max())
        super().__init__(rows, cols, k, r, c_k, weight)

    @property
    def polynomial_degree(self):
        return 2

    def _flat(self, M):
        return M.reshape(M.shape[:-2] + (-1,))

    def _derivative(self, j, K, dirs):
        A = self.A
        if j == 0:
            k = self._flat(K)
            return 0.5 * np.einsum("...a,ab,...b->...", k, A, k)
        if j == 1:
            return np.einsum("...a,ab,...b->...", self._flat(K), A, self._flat(dirs[0]))
        if j == 2:
            return np.einsum("...a,ab,...b->...", self._flat(dirs[0]), A, self._flat(dirs[1]))
        shape = np.broadcast_shapes(K.shape[:-2], *(d.shape[:-2] for d in dirs))
        return np.zeros(shape)

    def _gradient(self, K):
        return (self._flat(K) @ self.A).reshape(K.shape)

    def _hessian_apply(self, K, H):
        out = (self._flat(H) @ self.A).reshape(H.shape)
        return np.broadcast_to(out, np.broadcast_shapes(K.shape, H.shape))

    def _norm_terms(self, j):
        lam = self._norm
        return {0: [(lam / 2, 2)], 1: [(lam, 1)], 2: [(lam, 0)]}.get(j, [])

    def _parameters(self):
        return {"A": self.A.tolist()}


@lru_cache(maxsize=None)
def _pairings(j: int) -> tuple:
    """Partitions of ``range(j)`` into singletons and pairs, as (singles, pairs)."""
    if j == 0:
        return (((), ()),)
    out = []
    first, rest = 0, list(range(1, j))

    def relabel(part, mapping):
        singles, pairs = part
        return (
            tuple(mapping[s] for s in singles),
            tuple((mapping[a], mapping[b]) for a, b in pairs),
        )

    for singles, pairs in _pairings(j - 1):
        mapping = {i: i + 1 for i in range(j - 1)}
        s, p = relabel((singles, pairs), mapping)
        out.append(((first,) + s, p))
    for partner in rest:
        remaining = [i for i in rest if i != partner]
        for part in _pairings(j - 2):
            mapping = dict(enumerate(remaining))
            s, p = relabel(part, mapping)
            out.append((s, ((first, partner),) + p))
    return tuple(out)


class RadialIntegrand(Integrand):
    """``W = f(|K|^2)`` for a smooth scalar profile ``f``.

    Derivatives follow from the chain rule for ``s = K:K``, whose only
    nonzero derivatives are ``2 K:H`` and ``2 H:H'``: ``D^j W[H_1..H_j]`` sums,
    over all ways of splitting the slots into singletons and pairs,
    ``f^(blocks)(s)`` times the product of the block factors.
    """

    def __init__(self, family: str, profile: Callable[[int, np.ndarray], np.ndarray],
                 rows: int, cols: int, k: int, r=None, c_k=None, weight=None,
                 norm_terms: dict | None = None, degree: int | None = None,
                 parameters: dict | None = None):
        self.family = family
        self.profile = profile
        self._terms = norm_terms
        self._degree = degree
        self._params = parameters or {}
        super().__init__(rows, cols, k, r, c_k, weight)

    @property
    def polynomial_degree(self):
        return self._degree

    def _derivative(self, j, K, dirs):
        s = _frob(K, K)
        kh = [_frob(K, d) for d in dirs]
        total = 0.0
        for singles, pairs in _pairings(j):
            blocks = len(singles) + len(pairs)
            term = self.profile(blocks, s)
            for i in singles:
                term = term * (2 * kh[i])
            for a, b in pairs:
                term = term * (2 * _frob(dirs[a], dirs[b]))
            total = total + term
        shape = np.broadcast_shapes(K.shape[:-2], *(d.shape[:-2] for d in dirs))
        return np.broadcast_to(total, shape) if np.ndim(total) < len(shape) else total

    def _gradient(self, K):
        s = _frob(K, K)
        return 2 * self.profile(1, s)[..., None, None] * K

    def _hessian_apply(self, K, H):
        s = _frob(K, K)
        return (4 * self.profile(2, s) * _frob(K, H))[..., None, None] * K + 2 * self.profile(1, s)[..., None, None] * H

    def _norm_terms(self, j):
        if self._terms is None:
            return None
        return self._terms.get(j, [])

    def _parameters(self):
        return dict(self._params)


def _double_well_profile(m: int, s):
    s = np.asarray(s, dtype=float)
    if m == 0:
        return (s - 1) ** 2
    if m == 1:
        return 2 * (s - 1)
    if m == 2:
        return np.full_like(s, 2.0)
    return np.zeros_like(s)


_DOUBLE_WELL_TERMS = {
    0: [(1, 0), (1, 4)],
    1: [(4, 1), (4, 3)],
    2: [(4, 0), (12, 2)],
    3: [(24, 1)],
    4: [(24, 0)],
}


def double_well(rows: int, cols: int, k: int = 3, r=None, c_k=None, weight=None) -> RadialIntegrand:
    """``W = (|K|^2 - 1)^2``."""
    return RadialIntegrand("double_well", _double_well_profile, rows, cols, k, r, c_k, weight,
                           norm_terms=_DOUBLE_WELL_TERMS, degree=4)


def p_growth(rows: int, cols: int, m: float = 4, k: int = 3, r=None, c_k=None, weight=None) -> RadialIntegrand:
    """``W = (1 + |K|^2)^(m/2)``."""
    a = m / 2

    def profile(order, s):
        coeff = 1.0
        for i in range(order):
            coeff *= a - i
        return coeff * (1 + np.asarray(s, dtype=float)) ** (a - order)

    terms = degree = None
    if m == 4:
        terms = {0: [(1, 0), (2, 2), (1, 4)], 1: [(4, 1), (4, 3)], 2: [(4, 0), (12, 2)],
                 3: [(24, 1)], 4: [(24, 0)]}
        degree = 4
    elif m == 2:
        terms = {0: [(1, 0), (1, 2)], 1: [(2, 1)], 2: [(2, 0)]}
        degree = 2
    return RadialIntegrand("p_growth", profile, rows, cols, k, r, c_k, weight,
                           norm_terms=terms, degree=degree, parameters={"m": m})


def quadratic(rows: int, cols: int, A=None, mu=None, k: int = 2, r=None, c_k=None,
              weight=None) -> QuadraticIntegrand:
    """``W = 1/2 K:A[K]``; identity by default, ``mu`` scales each row of ``K``."""
    size = rows * cols
    if A is None:
        A = np.eye(size) if mu is None else np.diag(np.repeat(np.asarray(mu, float), cols))
    return QuadraticIntegrand(A, rows, cols, k, r, c_k, weight)


def integrand_from_config(cfg: dict, rows: int | None = None, cols: int | None = None) -> Integrand:
    """Build an integrand from ``{family, parameters, k, r, c_k, weight}``."""
    if not isinstance(cfg, dict):
        raise ConfigurationError("integrand config must be an object")
    family = cfg.get("family")
    if family not in FAMILIES:
        raise ConfigurationError(
            f"unknown integrand family {family!r}; known families: {', '.join(FAMILIES)}"
        )
    params = dict(cfg.get("parameters") or {})
    rows = params.pop("N", rows)
    cols = params.pop("n", cols)
    if rows is None or cols is None:
        raise ConfigurationError("integrand needs matrix dimensions N and n")
    weight = cfg.get("weight")
    if weight is not None:
        try:
            weight = Weight(**weight)
        except (TypeError, DomainError) as exc:
            raise ConfigurationError(f"bad weight: {exc}") from exc
    common = dict(k=int(cfg.get("k", 3 if family != "quadratic" else 2)),
                  r=cfg.get("r"), c_k=cfg.get("c_k"), weight=weight)
    try:
        if family == "quadratic":
            return quadratic(rows, cols, A=params.get("A"), mu=params.get("mu"), **common)
        if family == "double_well":
            return double_well(rows, cols, **common)
        return p_growth(rows, cols, m=float(params.get("m", 4)), **common)
    except DomainError as exc:
        raise ConfigurationError(str(exc)) from exc


@dataclass
class GrowthReport:
    """Sampled check of ``|D^k W| <= c_k (1 + |K|^r)`` and of the lower orders."""

    k: int
    r: float
    c_k: float
    radius: float
    samples: int
    max_ratio: float
    passed: bool
    propagated: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "k": self.k, "r": self.r, "c_k": self.c_k, "radius": self.radius,
            "samples": self.samples, "max_ratio": self.max_ratio,
            "passed": self.passed, "propagated": self.propagated,
            "norm_estimate": "sampled operator norm",
        }


def _sampled_norm(W: Integrand, j: int, x, K, rng, n_dirs: int) -> float:
    """Lower estimate of the operator norm of ``D^j W(x, K)``."""
    if j == 0:
        return float(abs(W.eval(0, x, K)))
    shape = (n_dirs, j, W.rows, W.cols)
    dirs = rng.normal(size=shape)
    # diagonal tuples and the K-aligned tuple make symmetric forms easy to saturate
    dirs[: n_dirs // 2, 1:] = dirs[: n_dirs // 2, :1]
    nK = np.linalg.norm(K)
    if nK > 0:
        dirs[0] = K / nK
    dirs /= np.linalg.norm(dirs, axis=(-2, -1), keepdims=True)
    vals = W.eval(j, x, K, [dirs[:, i] for i in range(j)])
    return float(np.max(np.abs(vals)))


def check_growth(W: Integrand, sample_count: int, radius: float, seed: int = 0,
                 n_dirs: int = 100, c_k: float | None = None, r: float | None = None) -> GrowthReport:
    """Sample ``(x, K)`` with ``|K| <= radius`` and test the growth bounds.

    Half of the samples sit on the sphere ``|K| = radius``.  ``c_k`` and ``r``
    default to the integrand's own values.
    """
    if sample_count < 1:
        raise DomainError("sample_count must be >= 1")
    c_k = W.c_k if c_k is None else float(c_k)
    r = W.r if r is None else float(r)
    rng = np.random.default_rng(seed)
    size = W.rows * W.cols
    worst = 0.0
    prop_worst = {j: 0.0 for j in range(W.k)}
    prop_const = {j: W.propagated_constant(j) for j in range(W.k)}
    for i in range(sample_count):
        x = rng.uniform(0, 1, size=W.cols)
        K = rng.normal(size=(W.rows, W.cols))
        rho = radius if i % 2 == 0 else radius * rng.uniform() ** (1 / size)
        K *= rho / np.linalg.norm(K)
        nK = np.linalg.norm(K)
        worst = max(worst, _sampled_norm(W, W.k, x, K, rng, n_dirs) / (1 + nK**r))
        for j in range(W.k):
            if prop_const[j]:
                bound = prop_const[j] * (1 + nK ** (W.r + W.k - j))
                prop_worst[j] = max(prop_worst[j], _sampled_norm(W, j, x, K, rng, n_dirs) / bound)
    propagated = {
        str(j): {
            "c_j": prop_const[j],
            "exponent": W.r + W.k - j,
            "max_ratio": float(prop_worst[j]) if prop_const[j] else None,
            "passed": None if not prop_const[j] else bool(prop_worst[j] <= 1 + 1e-12),
        }
        for j in range(W.k)
    }
    return GrowthReport(W.k, r, c_k, float(radius), sample_count, float(worst),
                        bool(worst <= c_k * (1 + 1e-12)), propagated)


@dataclass
class FDCheck:
    """Finite-difference check of one derivative slot."""

    steps: list
    errors: list
    orders: list
    observed_order: float
    max_error: float


def fd_derivative_check(W: Integrand, j: int, x, K, dirs: Sequence, h_sequence: Sequence[float]) -> FDCheck:
    """Compare ``D^j W`` with central differences of ``D^(j-1) W`` along ``dirs[-1]``.

    ``observed_order`` is the smallest order between consecutive steps whose
    errors are both above roundoff; NaN when the differences are exact.
    """
    if not 1 <= j <= W.k:
        raise DomainError(f"derivative order must lie in 1..{W.k}")
    K = np.asarray(K, dtype=float)
    dirs = [np.asarray(d, dtype=float) for d in dirs]
    exact = float(W.eval(j, x, K, dirs))
    head, last = dirs[:-1], dirs[-1]
    errors = []
    for h in h_sequence:
        fp = W.eval(j - 1, x, K + h * last, head)
        fm = W.eval(j - 1, x, K - h * last, head)
        errors.append(float(abs((fp - fm) / (2 * h) - exact)))
    scale = max(1.0, abs(exact), float(abs(W.eval(j - 1, x, K, head))))
    floor = 1e-11 * scale
    orders = []
    for (h0, e0), (h1, e1) in zip(zip(h_sequence, errors), zip(h_sequence[1:], errors[1:])):
        if e0 > floor and e1 > floor:
            orders.append(math.log(e0 / e1) / math.log(h0 / h1))
    observed = min(orders) if orders else float("nan")
    return FDCheck(list(map(float, h_sequence)), errors, orders, observed, max(errors))
