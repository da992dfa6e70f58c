"""Functional Taylor expansion of ``G -> int W(x, G)`` with explicit remainder bounds.

For ``H = G - F`` the integrated energy splits exactly into the expansion
terms ``(1/j!) int D^j W(F)[H, ..., H]`` for ``j < k`` plus the integral
remainder ``int_0^1 (1-t)^(k-1)/(k-1)! D^k W(F + tH)[H, ..., H] dt``.  The
growth hypothesis on ``D^k W`` bounds the remainder by
``C1 int|H|^k + C2 int|H|^(k+r)``, and the interpolation inequality with
constant ``J2`` turns that into ``(C1 + C2 J2^(k+r) ||H||_BMO^r) int|H|^k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bmo import bmo_norm, interpolation_ratio
from .exceptions import DomainError, PreconditionError
from .grid import TensorField, linf_norm
from .integrand import Integrand

__all__ = [
    "TaylorReport",
    "expansion_terms",
    "remainder_quadrature",
    "remainder_integrand",
    "pointwise_remainder_bound",
    "bound_constants",
    "verify_taylor_inequality",
    "summary_table",
]

DEFAULT_NODES = 8


def _check_pair(W: Integrand, F: TensorField, H: TensorField):
    if F.grid != H.grid or F.values.shape != H.values.shape:
        raise DomainError("F and H must share grid and matrix shape")
    if (F.rows, F.cols) != (W.rows, W.cols):
        raise DomainError(
            f"integrand acts on {W.rows}x{W.cols} matrices, fields are {F.rows}x{F.cols}"
        )


def _integrate(grid, cellwise) -> float:
    return float(np.sum(cellwise) * grid.cell_volume)


def expansion_terms(W: Integrand, F: TensorField, H: TensorField) -> list[float]:
    """``[int W(F), int DW(F)[H], ..., 1/(k-1)! int D^(k-1)W(F)[H..H]]``."""
    _check_pair(W, F, H)
    x = F.grid.centers()
    return [
        _integrate(F.grid, W.eval(j, x, F.values, [H.values] * j)) / math.factorial(j)
        for j in range(W.k)
    ]


def _gauss_legendre(nodes: int):
    if nodes < 2:
        raise DomainError("remainder quadrature needs at least 2 nodes")
    xi, wi = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (xi + 1), 0.5 * wi


def remainder_integrand(W: Integrand, F: TensorField, H: TensorField, nodes: int = DEFAULT_NODES):
    """Nodes, weights and ``(1-t)^(k-1)/(k-1)! D^k W(F+tH)[H..H]`` per node and cell."""
    _check_pair(W, F, H)
    t, w = _gauss_legendre(nodes)
    x = F.grid.centers()
    k = W.k
    vals = np.stack([
        (1 - ti) ** (k - 1) / math.factorial(k - 1)
        * W.eval(k, x, F.values + ti * H.values, [H.values] * k)
        for ti in t
    ])
    return t, w, vals


def remainder_quadrature(W: Integrand, F: TensorField, H: TensorField, nodes: int = DEFAULT_NODES) -> float:
    """Gauss-Legendre value of the integrated Taylor remainder."""
    _, w, vals = remainder_integrand(W, F, H, nodes)
    return _integrate(F.grid, np.tensordot(w, vals, axes=1))


def bound_constants(W: Integrand, F: TensorField) -> tuple[float, float, float]:
    """``(c_r, C1, C2)`` for the remainder bound at base field ``F``."""
    c_r = max(1.0, 2.0 ** (W.r - 1))
    fact = math.factorial(W.k - 1)
    f_inf = linf_norm(F)
    C1 = W.c_k * (1 + c_r * f_inf**W.r) / fact
    C2 = W.c_k * c_r / fact
    return c_r, C1, C2


def pointwise_remainder_bound(W: Integrand, F: TensorField, H: TensorField,
                              nodes: int = DEFAULT_NODES) -> tuple[bool, float]:
    """Check the per-cell bound on the remainder integrand at every node.

    Returns ``(ok, worst ratio of |integrand| to bound)``.
    """
    c_r, _, _ = bound_constants(W, F)
    _, _, vals = remainder_integrand(W, F, H, nodes)
    h = H.pointwise_norm()
    f_inf = linf_norm(F)
    bound = W.c_k / math.factorial(W.k - 1) * (
        h**W.k * (1 + c_r * f_inf**W.r) + c_r * h ** (W.k + W.r)
    )
    slack = 1e-12 * (bound + np.abs(vals).max(axis=0)) + 1e-300
    ok = bool(np.all(np.abs(vals) <= bound + slack))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, np.abs(vals) / bound, 0.0)
    return ok, float(ratio.max())


@dataclass
class TaylorReport:
    lhs: float
    expansion_terms: list
    remainder_quadrature: float
    identity_gap: float
    M: float
    h_bmo: float
    h_k: float
    h_k_plus_r: float
    C1: float
    C2: float
    c_bound: float
    inequality_margin: float
    # constants and the separate checks
    k: int
    r: float
    c_k: float
    c_r: float
    J2: float
    f_inf: float
    nodes: int
    integrated_bound: float
    integrated_bound_ok: bool
    full_bound_ok: bool
    j2_required: float
    j2_valid: bool
    pointwise_ok: bool
    pointwise_max_ratio: float
    inequality_ok: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verify_taylor_inequality(W: Integrand, F: TensorField, G: TensorField, M: float, J2: float,
                             nodes: int = DEFAULT_NODES, mode: str = "all") -> TaylorReport:
    """Evaluate every term of the Taylor inequality for the pair ``(F, G)``.

    ``J2`` is the interpolation constant for exponents ``(k, k+r)``; the
    report flags whether it actually bounds ``H = G - F``.  The integrated
    bound with ``C1, C2`` needs no ``J2`` and is always checked.
    """
    H = G - F
    _check_pair(W, F, H)
    h_bmo = bmo_norm(H, mode)
    if not h_bmo < M:
        raise PreconditionError(f"||G - F||_BMO = {h_bmo!r} is not below M = {M!r}")
    if not J2 > 0:
        raise DomainError(f"J2 must be positive, got {J2}")
    k, r = W.k, W.r
    x = F.grid.centers()
    lhs = _integrate(F.grid, W.eval(0, x, G.values))
    terms = expansion_terms(W, F, H)
    rem = remainder_quadrature(W, F, H, nodes)
    gap = abs(lhs - sum(terms) - rem)

    c_r, C1, C2 = bound_constants(W, F)
    hn = H.pointwise_norm()
    h_k = _integrate(F.grid, hn**k)
    h_kr = _integrate(F.grid, hn ** (k + r))
    integrated = C1 * h_k + C2 * h_kr
    c_bound = C1 + C2 * J2 ** (k + r) * h_bmo**r
    margin = lhs - (sum(terms) - c_bound * h_k)

    if h_k > 0:
        j2_required = interpolation_ratio(H, k, k + r, mode, bmo=h_bmo).ratio
    else:
        j2_required = 0.0
    j2_valid = j2_required <= J2 * (1 + 1e-12)
    scale = 1 + abs(lhs) + sum(abs(t) for t in terms) + c_bound * h_k
    tol = 1e-10 * scale
    pw_ok, pw_ratio = pointwise_remainder_bound(W, F, H, nodes)
    return TaylorReport(
        lhs=lhs, expansion_terms=terms, remainder_quadrature=rem, identity_gap=gap, M=float(M),
        h_bmo=h_bmo, h_k=h_k, h_k_plus_r=h_kr, C1=C1, C2=C2, c_bound=c_bound,
        inequality_margin=margin, k=k, r=r, c_k=W.c_k, c_r=c_r, J2=float(J2),
        f_inf=linf_norm(F), nodes=nodes, integrated_bound=integrated,
        integrated_bound_ok=bool(abs(rem) <= integrated + tol),
        full_bound_ok=bool(abs(rem) <= c_bound * h_k + tol),
        j2_required=float(j2_required), j2_valid=bool(j2_valid),
        pointwise_ok=pw_ok, pointwise_max_ratio=pw_ratio,
        inequality_ok=bool(margin >= -tol) if j2_valid else True,
    )


def summary_table(report: TaylorReport) -> str:
    rows = [
        ("int W(G)", report.lhs),
        ("sum of terms", sum(report.expansion_terms)),
        ("remainder", report.remainder_quadrature),
        ("identity gap", report.identity_gap),
        ("C1 h_k + C2 h_k+r", report.integrated_bound),
        ("c_bound", report.c_bound),
        ("inequality margin", report.inequality_margin),
    ]
    width = max(len(name) for name, _ in rows)
    lines = [f"{name:<{width}}  {value: .10e}" for name, value in rows]
    flags = (f"integrated_bound_ok={report.integrated_bound_ok} "
             f"j2_valid={report.j2_valid} inequality_ok={report.inequality_ok}")
    return "\n".join(lines + [flags])
