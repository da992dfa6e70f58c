"""Discrete energies ``E(u) = int W(x, grad u)`` on box grids.

Covers boundary conditions (Dirichlet, Neumann with zero mean, mixed), the
first variation and Euler-Lagrange residual, a line-search solver for
equilibria, the second variation with its smallest Rayleigh quotient, and a
randomized stress test of the strict local-minimizer inequality
``E(v) >= E(u_e) + a int |grad v - grad u_e|^2`` on BMO balls.

Dirichlet faces are whole faces of the box.  On a ``-`` face the first cell
layer carries the data; on a ``+`` face the last two layers do, because the
last cell's gradient repeats the difference between them.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.ndimage import uniform_filter

from .bmo import bmo_norm, calibrate_j2, calibration_family
from .exceptions import DomainError, PreconditionError
from .grid import Grid, ScalarGridFunction, TensorField, gradient_array, gradient_transpose
from .integrand import Integrand

log = logging.getLogger(__name__)

__all__ = [
    "BoundaryCondition",
    "Equilibrium",
    "StressReport",
    "QVariantReport",
    "energy",
    "first_variation",
    "el_residual",
    "solve_el",
    "second_variation",
    "rayleigh_quotient",
    "second_variation_lambda_min",
    "minimizer_stress_test",
    "remark_q_variant",
    "GENERATORS",
    "stiffness_matrix",
]

AXES = "xyz"
BC_KINDS = ("dirichlet", "neumann", "mixed")


def all_faces(dim: int) -> tuple[str, ...]:
    return tuple(f"{AXES[d]}{s}" for d in range(dim) for s in "-+")


def _parse_face(face: str, dim: int) -> tuple[int, str]:
    if len(face) != 2 or face[0] not in AXES[:dim] or face[1] not in "-+":
        raise DomainError(f"unknown face {face!r} for a {dim}-D grid")
    return AXES.index(face[0]), face[1]


@dataclass(frozen=True, eq=False)
class BoundaryCondition:
    """Which faces carry Dirichlet data, the data itself, and optional loads.

    ``data`` only matters on Dirichlet cells.  ``body_load`` is a constant
    vector ``b``; ``surface_load`` maps faces outside the Dirichlet set to a
    constant traction ``s``.  Both enter the energy as ``-int b.u - int_S s.u``.
    """

    grid: Grid
    components: int
    kind: str
    dirichlet_faces: frozenset = frozenset()
    data: ScalarGridFunction | None = None
    body_load: np.ndarray | None = None
    surface_load: dict = field(default_factory=dict)

    def __post_init__(self):
        faces = frozenset(self.dirichlet_faces)
        object.__setattr__(self, "dirichlet_faces", faces)
        every = set(all_faces(self.grid.dim))
        for f in faces:
            _parse_face(f, self.grid.dim)
        if self.kind not in BC_KINDS:
            raise DomainError(f"boundary kind must be one of {BC_KINDS}")
        if self.kind == "dirichlet" and faces != every:
            raise DomainError("dirichlet kind prescribes data on every face")
        if self.kind == "neumann" and faces:
            raise DomainError("neumann kind has no Dirichlet faces")
        if self.kind == "mixed" and (not faces or faces == every):
            raise DomainError("mixed kind needs a nonempty proper subset of faces")
        if faces:
            if self.data is None:
                raise DomainError("Dirichlet faces need boundary data")
            if self.data.grid != self.grid or self.data.components != self.components:
                raise DomainError("boundary data does not match grid or component count")
        for f in self.surface_load:
            if f in faces:
                raise DomainError(f"surface load on Dirichlet face {f}")
            _parse_face(f, self.grid.dim)

    @classmethod
    def dirichlet(cls, data: ScalarGridFunction, **loads) -> "BoundaryCondition":
        g = data.grid
        return cls(g, data.components, "dirichlet", frozenset(all_faces(g.dim)), data, **loads)

    @classmethod
    def neumann(cls, grid: Grid, components: int = 1, **loads) -> "BoundaryCondition":
        return cls(grid, components, "neumann", **loads)

    @classmethod
    def mixed(cls, data: ScalarGridFunction, faces: Sequence[str], **loads) -> "BoundaryCondition":
        return cls(data.grid, data.components, "mixed", frozenset(faces), data, **loads)

    @property
    def mean_zero(self) -> bool:
        return not self.dirichlet_faces

    def dirichlet_mask(self) -> np.ndarray:
        mask = np.zeros(self.grid.shape, dtype=bool)
        for f in self.dirichlet_faces:
            axis, side = _parse_face(f, self.grid.dim)
            view = np.moveaxis(mask, axis, 0)
            if side == "-":
                view[0] = True
            else:
                view[-2:] = True
        return mask

    def free_mask(self) -> np.ndarray:
        return ~self.dirichlet_mask()

    def admissible(self, values: np.ndarray) -> np.ndarray:
        """Copy of ``values`` with Dirichlet data imposed, or the mean removed."""
        v = np.array(values, dtype=float)
        if self.mean_zero:
            return v - v.mean(axis=tuple(range(self.grid.dim)))
        mask = self.dirichlet_mask()
        v[mask] = self.data.values[mask]
        return v

    def project_variation(self, values: np.ndarray) -> np.ndarray:
        """Orthogonal projection onto variations (zero on Dirichlet cells or zero mean)."""
        v = np.array(values, dtype=float)
        if self.mean_zero:
            return v - v.mean(axis=tuple(range(self.grid.dim)))
        v[self.dirichlet_mask()] = 0.0
        return v

    def check_variation(self, w: ScalarGridFunction, tol: float = 1e-12):
        scale = max(1.0, float(np.abs(w.values).max()))
        if self.mean_zero:
            bad = float(np.abs(w.mean()).max())
            what = "mean"
        else:
            bad = float(np.abs(w.values[self.dirichlet_mask()]).max(initial=0.0))
            what = "value on Dirichlet cells"
        if bad > tol * scale:
            raise PreconditionError(f"variation violates its constraint: {what} is {bad:.3e}")

    def check_admissible(self, u: ScalarGridFunction, tol: float = 1e-10):
        scale = max(1.0, float(np.abs(u.values).max()))
        if self.mean_zero:
            bad = float(np.abs(u.mean()).max())
        else:
            mask = self.dirichlet_mask()
            bad = float(np.abs(u.values[mask] - self.data.values[mask]).max(initial=0.0))
        if bad > tol * scale:
            raise PreconditionError(f"state violates the boundary condition by {bad:.3e}")

    def load_array(self) -> np.ndarray:
        """``L`` with ``int b.u + int_S s.u == sum(L * u)``."""
        g = self.grid
        out = np.zeros(g.shape + (self.components,))
        if self.body_load is not None:
            out += np.asarray(self.body_load, dtype=float) * g.cell_volume
        for f, s in self.surface_load.items():
            axis, side = _parse_face(f, g.dim)
            view = np.moveaxis(out, axis, 0)
            view[0 if side == "-" else -1] += np.asarray(s, dtype=float) * g.spacing ** (g.dim - 1)
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dirichlet_faces": sorted(self.dirichlet_faces),
            "components": self.components,
            "body_load": None if self.body_load is None else np.asarray(self.body_load).tolist(),
            "surface_load": {f: np.asarray(s).tolist() for f, s in sorted(self.surface_load.items())},
        }


# energy and its derivatives --------------------------------------------------

def _loads(bc: BoundaryCondition | None, values: np.ndarray) -> float:
    if bc is None or (bc.body_load is None and not bc.surface_load):
        return 0.0
    return float(np.sum(bc.load_array() * values))


def energy(W: Integrand, u: ScalarGridFunction, bc: BoundaryCondition | None = None) -> float:
    """Midpoint value of ``int W(x, grad u)`` minus any loads carried by ``bc``."""
    g = u.grid
    K = gradient_array(g, u.values)
    return float(np.sum(W.eval(0, g.centers(), K)) * g.cell_volume) - _loads(bc, u.values)


def energy_difference(W: Integrand, u: ScalarGridFunction, w: ScalarGridFunction,
                      bc: BoundaryCondition | None = None) -> float:
    """``E(u + w) - E(u)`` computed cell by cell to avoid cancellation."""
    g = u.grid
    K = gradient_array(g, u.values)
    dK = gradient_array(g, w.values)
    return float(np.sum(W.difference(g.centers(), K, dK)) * g.cell_volume) - _loads(bc, w.values)


def first_variation(W: Integrand, u: ScalarGridFunction, w: ScalarGridFunction,
                    bc: BoundaryCondition | None = None) -> float:
    """``int DW(x, grad u)[grad w]`` minus loads applied to ``w``."""
    if bc is not None:
        bc.check_variation(w)
    g = u.grid
    K = gradient_array(g, u.values)
    dK = gradient_array(g, w.values)
    return float(np.sum(W.eval(1, g.centers(), K, [dK])) * g.cell_volume) - _loads(bc, w.values)


def _energy_gradient(W: Integrand, grid: Grid, values: np.ndarray, bc: BoundaryCondition | None):
    """Derivative of the discrete energy with respect to every cell value."""
    K = gradient_array(grid, values)
    stress = W.gradient(grid.centers(), K)
    out = gradient_transpose(grid, stress) * grid.cell_volume
    if bc is not None and (bc.body_load is not None or bc.surface_load):
        out = out - bc.load_array()
    return out


def el_residual(W: Integrand, u: ScalarGridFunction, bc: BoundaryCondition):
    """Euler-Lagrange residual field and its discrete ``L^2`` norm.

    The field is the energy gradient divided by the cell volume, restricted
    to admissible variations (zero on Dirichlet cells, mean-free otherwise).
    """
    g = u.grid
    r = bc.project_variation(_energy_gradient(W, g, u.values, bc) / g.cell_volume)
    norm = float(np.sqrt(np.sum(r * r) * g.cell_volume))
    return ScalarGridFunction(g, r), norm


# linear algebra on the free degrees of freedom ------------------------------

def _difference_1d(n: int, h: float) -> sp.csr_matrix:
    rows = np.r_[np.arange(n - 1), np.arange(n - 1), n - 1, n - 1]
    cols = np.r_[np.arange(n - 1), np.arange(1, n), n - 2, n - 1]
    vals = np.r_[-np.ones(n - 1), np.ones(n - 1), -1.0, 1.0] / h
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def gradient_matrices(grid: Grid) -> list[sp.csr_matrix]:
    """Sparse per-axis difference operators on C-ordered cell vectors."""
    mats = []
    for axis in range(grid.dim):
        factors = [sp.identity(n, format="csr") for n in grid.shape]
        factors[axis] = _difference_1d(grid.shape[axis], grid.spacing)
        m = factors[0]
        for f in factors[1:]:
            m = sp.kron(m, f, format="csr")
        mats.append(m)
    return mats


def stiffness_matrix(grid: Grid) -> sp.csr_matrix:
    """Matrix of ``int grad u . grad v`` for scalar cell functions."""
    return sum(D.T @ D for D in gradient_matrices(grid)).tocsc() * grid.cell_volume


class _Metric:
    """Inverse of the ``int |grad z|^2`` form on admissible variations."""

    def __init__(self, bc: BoundaryCondition):
        self.bc = bc
        grid = bc.grid
        L = stiffness_matrix(grid)
        free = bc.free_mask().ravel()
        if bc.mean_zero:
            free = np.ones(grid.cells, dtype=bool)
            free[0] = False  # pin one cell; mean is restored afterwards
        self.free = np.flatnonzero(free)
        self.lu = spla.splu(L[self.free][:, self.free].tocsc())

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        grid = self.bc.grid
        b = self.bc.project_variation(rhs).reshape(grid.cells, -1)
        x = np.zeros_like(b)
        x[self.free] = self.lu.solve(b[self.free])
        return self.bc.project_variation(x.reshape(rhs.shape))


# solver ------------------------------------------------------------------------

@dataclass
class Equilibrium:
    u_e: ScalarGridFunction
    el_residual_norm: float
    coercivity_4a: float
    solver_iterations: int
    converged: bool
    status: str
    energy: float
    lambda_history: list = field(default_factory=list, repr=False)

    @property
    def a(self) -> float:
        return self.coercivity_4a / 4

    def to_dict(self, include_state: bool = True) -> dict:
        out = {
            "el_residual_norm": self.el_residual_norm,
            "coercivity_4a": self.coercivity_4a,
            "a": self.a,
            "solver_iterations": self.solver_iterations,
            "converged": self.converged,
            "status": self.status,
            "energy": self.energy,
            "lambda_iterations": len(self.lambda_history),
        }
        if include_state:
            out["u_e"] = self.u_e.values.tolist()
        return out


def solve_el(W: Integrand, bc: BoundaryCondition, init: ScalarGridFunction | None = None,
             tol: float = 1e-10, max_iter: int = 500, precondition: bool = True,
             lambda_iters: int = 200, seed: int = 0) -> Equilibrium:
    """Minimise the discrete energy by gradient descent with backtracking.

    With ``precondition`` the descent direction is the gradient in the
    ``int |grad z|^2`` inner product, which makes the iteration independent
    of the mesh size.  Non-convergence is reported in ``status``.
    """
    grid = bc.grid
    x = grid.centers()
    h_n = grid.cell_volume
    if init is None:
        base = bc.data.values if bc.data is not None else np.zeros(grid.shape + (bc.components,))
        init = ScalarGridFunction(grid, base)
    u = bc.admissible(init.values)
    metric = _Metric(bc) if precondition else None
    exact_diff = W.polynomial_degree is not None
    step = 1.0
    status, it = "max_iter", 0
    for it in range(max_iter + 1):
        g = bc.project_variation(_energy_gradient(W, grid, u, bc))
        rnorm = float(np.sqrt(np.sum(g * g) / h_n))
        if rnorm <= tol:
            status = "converged"
            break
        if it == max_iter:
            break
        d = -metric.solve(g) if metric is not None else -g / h_n
        slope = float(np.sum(g * d))
        K = gradient_array(grid, u)
        dK = gradient_array(grid, d)
        load_d = _loads(bc, d)
        slack = 0.0
        if not exact_diff:
            slack = 16 * np.finfo(float).eps * float(np.sum(np.abs(W.eval(0, x, K))) * h_n)
        t = 1.0 if metric is not None else min(1.0, 2 * step)
        while True:
            drop = float(np.sum(W.difference(x, K, t * dK)) * h_n) - t * load_d
            if drop <= 1e-4 * t * slope + slack:
                break
            t *= 0.5
            if t < 1e-14:
                break
        if t < 1e-14:
            status = "stalled"
            break
        step = t
        u = u + t * d
    u_e = ScalarGridFunction(grid, u)
    _, rnorm = el_residual(W, u_e, bc)
    lam, history = _lambda_min(W, u_e, bc, lambda_iters, seed)
    return Equilibrium(u_e, rnorm, lam, it, status == "converged", status,
                       energy(W, u_e, bc), history)


# second variation ----------------------------------------------------------------

def second_variation(W: Integrand, u_e: ScalarGridFunction, z1: ScalarGridFunction,
                     z2: ScalarGridFunction) -> float:
    """``int D^2 W(x, grad u_e)[grad z1, grad z2]``."""
    g = u_e.grid
    K = gradient_array(g, u_e.values)
    return float(np.sum(W.eval(2, g.centers(), K, [gradient_array(g, z1.values),
                                                   gradient_array(g, z2.values)])) * g.cell_volume)


def rayleigh_quotient(W: Integrand, u_e: ScalarGridFunction, z: ScalarGridFunction) -> float:
    g = u_e.grid
    dz = gradient_array(g, z.values)
    denom = float(np.sum(dz * dz) * g.cell_volume)
    if denom == 0:
        raise DomainError("int |grad z|^2 vanishes; the quotient is undefined")
    return second_variation(W, u_e, z, z) / denom


def _hessian_operator(W, u_e, bc):
    g = u_e.grid
    x = g.centers()
    K = gradient_array(g, u_e.values)

    def S(z):
        stress = W.hessian_apply(x, K, gradient_array(g, z))
        return bc.project_variation(gradient_transpose(g, stress) * g.cell_volume)

    def L(z):
        return bc.project_variation(gradient_transpose(g, gradient_array(g, z)) * g.cell_volume)

    return S, L


def _lambda_min(W, u_e, bc, iters=200, seed=0, tol=1e-13):
    """Smallest ``delta^2 E(z) / int |grad z|^2`` over variations.

    Locally optimal preconditioned iteration (one-vector LOBPCG) with the
    inverse of the ``int |grad z|^2`` form as preconditioner.  Each step takes
    the best Ritz value over a subspace containing the previous iterate, so
    the recorded quotients never increase.
    """
    grid = bc.grid
    S, L = _hessian_operator(W, u_e, bc)
    metric = _Metric(bc)
    rng = np.random.default_rng(seed)
    z = bc.project_variation(rng.normal(size=grid.shape + (bc.components,)))
    z = metric.solve(L(z))  # smooth the random start
    z /= math.sqrt(float(np.sum(z * L(z))))
    lam = float(np.sum(z * S(z)))
    history = [lam]
    p = None
    for _ in range(iters):
        r = S(z) - lam * L(z)
        w = metric.solve(r)
        res = math.sqrt(max(float(np.sum(r * w)), 0.0))
        if res <= tol * max(1.0, abs(lam)):
            break
        basis = [z, w] + ([p] if p is not None else [])
        V = []
        for v in basis:
            v = v.copy()
            for q in V:
                v -= float(np.sum(q * L(v))) * q
            nv = float(np.sum(v * L(v)))
            if nv > 1e-28 * max(1.0, float(np.sum(v * v))):
                V.append(v / math.sqrt(nv))
        if len(V) < 2:
            break
        SV = [S(v) for v in V]
        A = np.array([[float(np.sum(a * b)) for b in SV] for a in V])
        A = 0.5 * (A + A.T)
        evals, evecs = scipy.linalg.eigh(A)
        c = evecs[:, 0]
        new_lam = float(evals[0])
        if new_lam > lam:
            # roundoff only; keep the sequence monotone
            new_lam = lam
        z_new = sum(ci * v for ci, v in zip(c, V))
        p = sum(ci * v for ci, v in zip(c[1:], V[1:]))
        z = z_new / math.sqrt(float(np.sum(z_new * L(z_new))))
        lam = new_lam
        history.append(lam)
    return lam, history


def second_variation_lambda_min(W: Integrand, u_e: ScalarGridFunction, bc: BoundaryCondition,
                                iters: int = 200, seed: int = 0) -> float:
    """Estimate of the coercivity constant ``4a`` (the smallest Rayleigh quotient)."""
    return _lambda_min(W, u_e, bc, iters, seed)[0]


# perturbation generators -------------------------------------------------------

def _box(grid: Grid):
    lower = np.array(grid.origin) - grid.spacing / 2
    extent = grid.spacing * np.array(grid.shape)
    return lower, extent


def _unit_vector(rng, N):
    v = rng.normal(size=N)
    return v / np.linalg.norm(v)


def gen_bump(grid: Grid, N: int, rng) -> np.ndarray:
    """Smooth compactly supported bump ``prod cos^2`` at a random centre."""
    lower, extent = _box(grid)
    x = grid.centers()
    centre = lower + extent * rng.uniform(0.3, 0.7, size=grid.dim)
    radius = extent * rng.uniform(0.15, 0.3)
    t = np.abs(x - centre) / radius
    profile = np.prod(np.where(t < 1, np.cos(0.5 * np.pi * np.minimum(t, 1)) ** 2, 0.0), axis=-1)
    return profile[..., None] * _unit_vector(rng, N)


def gen_oscillation(grid: Grid, N: int, rng) -> np.ndarray:
    """High-frequency plane wave under an envelope vanishing on the boundary."""
    lower, extent = _box(grid)
    xi = (grid.centers() - lower) / extent
    envelope = np.prod(np.sin(np.pi * xi), axis=-1)
    top = max(2, min(grid.shape) // 2)
    freq = rng.integers(max(1, top // 2), top + 1, size=grid.dim)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xi @ freq) + phase) / np.linalg.norm(freq)
    return (envelope * wave)[..., None] * _unit_vector(rng, N)


def gen_log_spike(grid: Grid, N: int, rng) -> np.ndarray:
    """``x_a (log(r/R) - 1)`` under a smooth cutoff, ``r = |x - x0|``.

    Its gradient is ``log(r/R) e_a`` plus bounded terms: bounded mean
    oscillation, yet a sup norm growing like ``|log h|`` under refinement.
    """
    lower, extent = _box(grid)
    x = grid.centers()
    idx = np.array([rng.integers(n // 4, n - n // 4) for n in grid.shape])
    x0 = np.array(grid.origin) + idx * grid.spacing + grid.spacing / 3
    R = float(extent.min() * rng.uniform(0.2, 0.35))
    axis = int(rng.integers(grid.dim))
    d = x - x0
    r = np.linalg.norm(d, axis=-1)
    cutoff = np.where(r < R, np.cos(0.5 * np.pi * np.minimum(r / R, 1)) ** 2, 0.0)
    profile = cutoff * d[..., axis] * (np.log(r / R) - 1)
    return profile[..., None] * _unit_vector(rng, N)


def gen_smoothed_noise(grid: Grid, N: int, rng) -> np.ndarray:
    """White noise after one pass of a 3-cell box average."""
    noise = rng.normal(size=grid.shape + (N,))
    return uniform_filter(noise, size=(3,) * grid.dim + (1,), mode="nearest")


GENERATORS: dict[str, Callable] = {
    "bump": gen_bump,
    "oscillation": gen_oscillation,
    "log_spike": gen_log_spike,
    "smoothed_noise": gen_smoothed_noise,
}


# stress test ---------------------------------------------------------------------

@dataclass
class StressReport:
    a: float
    delta: float
    samples: list
    failures: int
    coercivity_4a: float
    J: float
    certified_delta: float
    sweep: list
    skipped: list
    mode: str
    perturbations: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "a": self.a,
            "delta": self.delta,
            "coercivity_4a": self.coercivity_4a,
            "J": self.J,
            "failures": self.failures,
            "certified_delta": self.certified_delta,
            "sweep": self.sweep,
            "skipped": self.skipped,
            "bmo_mode": self.mode,
            "samples": self.samples,
        }


def _run_in_pool(fn, items, workers):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def minimizer_stress_test(W: Integrand, eq: Equilibrium, bc: BoundaryCondition, delta: float,
                          generators: Sequence[str] = tuple(GENERATORS), n_samples: int = 40,
                          seed: int = 0, J: float | None = None, a: float | None = None,
                          sweep_steps: int = 8, mode: str = "all", workers: int = 1) -> StressReport:
    """Probe ``E(v) >= E(u_e) + a int |grad w|^2`` for ``||grad w||_BMO < delta``.

    Each perturbation is rescaled so that ``||grad w||_BMO = rho * delta`` with
    ``rho`` uniform in (0, 1).  ``a`` defaults to a quarter of the
    equilibrium's coercivity estimate.  A bisection over ``(0, delta]`` with
    the same perturbations and the same ``rho`` reports the largest radius
    without failures.  ``J`` is the interpolation constant for exponents
    (2, 3); when omitted it is calibrated over the standard family and the
    perturbations themselves.
    """
    if eq.coercivity_4a <= 0:
        raise PreconditionError(f"second variation is not positive (4a = {eq.coercivity_4a})")
    if not delta > 0:
        raise DomainError("delta must be positive")
    unknown = [g for g in generators if g not in GENERATORS]
    if unknown:
        raise DomainError(f"unknown generators {unknown}; known: {sorted(GENERATORS)}")
    a = eq.a if a is None else float(a)
    grid, N = bc.grid, bc.components
    h_n = grid.cell_volume
    x = grid.centers()
    K_e = gradient_array(grid, eq.u_e.values)
    gen_rng = np.random.default_rng([seed, 0])
    rho_rng = np.random.default_rng([seed, 1])

    base, skipped = [], []
    for i in range(n_samples):
        name = generators[i % len(generators)]
        raw = GENERATORS[name](grid, N, gen_rng)
        w = bc.project_variation(raw)
        rho = 0.0
        while rho == 0.0:
            rho = float(rho_rng.uniform())
        dw = gradient_array(grid, w)
        g2 = float(np.sum(dw * dw) * h_n)
        try:
            bc.check_variation(ScalarGridFunction(grid, w))
        except PreconditionError as exc:
            skipped.append({"id": i, "generator": name, "reason": str(exc)})
            log.warning("sample %d (%s) skipped: %s", i, name, exc)
            continue
        if g2 == 0:
            skipped.append({"id": i, "generator": name, "reason": "zero gradient"})
            log.warning("sample %d (%s) skipped: zero gradient", i, name)
            continue
        base.append({"id": i, "generator": name, "w": w, "dw": dw, "rho": rho, "g2": g2})

    bmos = _run_in_pool(lambda s: bmo_norm(TensorField(grid, s["dw"]), mode), base, workers)
    for s, b in zip(base, bmos):
        s["bmo"] = b
        pn = np.sqrt(np.einsum("...ij,...ij->...", s["dw"], s["dw"]))
        s["g3"] = float(np.sum(pn**3) * h_n)
        # ratio for the (2, 3) interpolation inequality; scale invariant
        s["j_req"] = s["g3"] ** (1 / 3) / (b ** (1 / 3) * s["g2"] ** (1 / 3))

    if J is None:
        fam = calibration_family(grid, N, seed)
        J = max([calibrate_j2(fam, 2, 3, mode)] + [s["j_req"] for s in base])

    def margins(d):
        out = []
        for s in base:
            c = s["rho"] * d / s["bmo"]
            gap = float(np.sum(W.difference(x, K_e, c * s["dw"])) * h_n) - _loads(bc, c * s["w"])
            out.append((c, gap, gap - a * c * c * s["g2"]))
        return out

    def failures_at(d):
        return sum(m < 0 for _, _, m in margins(d))

    rows = []
    for s, (c, gap, m) in zip(base, margins(delta)):
        bmo_w = c * s["bmo"]
        l2 = c * c * s["g2"]
        l3 = c**3 * s["g3"]
        rows.append({
            "id": s["id"], "generator": s["generator"], "rho": s["rho"],
            "bmo_grad_w": bmo_w, "grad_w_l2sq": l2, "energy_gap": gap, "margin": m,
            "grad_w_l3cube": l3, "j_required": s["j_req"],
            "j_valid": bool(s["j_req"] <= J * (1 + 1e-12)),
            "proof_inequality_ok": bool(J**3 * bmo_w * l2 >= l3 * (1 - 1e-12)),
        })
    fails = sum(r["margin"] < 0 for r in rows)

    sweep = [{"delta": delta, "failures": fails}]
    if fails == 0:
        certified = delta
    else:
        lo, hi = 0.0, delta
        for _ in range(sweep_steps):
            mid = 0.5 * (lo + hi)
            f = failures_at(mid)
            sweep.append({"delta": mid, "failures": f})
            if f == 0:
                lo = mid
            else:
                hi = mid
        certified = lo

    perturbations = [
        ScalarGridFunction(grid, (s["rho"] * delta / s["bmo"]) * s["w"]) for s in base
    ]
    return StressReport(a, float(delta), rows, int(fails), eq.coercivity_4a, float(J),
                        float(certified), sweep, skipped, mode, perturbations)


@dataclass
class QVariantReport:
    q: float
    J: float
    a: float
    j_hat: float
    delta: float
    formula: str
    rows: list
    failures: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def remark_q_variant(report: StressReport, q: float, J: float) -> QVariantReport:
    """Check ``E(v) - E(u_e) >= a j_hat delta^(2-q) int |grad w|^q`` per sample.

    With ``J`` the interpolation constant for exponents ``(2, q)`` one has
    ``int |grad w|^q <= J^q ||grad w||_BMO^(q-2) int |grad w|^2``, so the
    ``a int |grad w|^2`` lower bound yields the claim with ``j_hat = J^-q``.
    """
    q = float(q)
    if not q > 2:
        raise PreconditionError(f"the q-variant needs q > 2, got {q}")
    j_hat = J ** (-q)
    d = report.delta
    rows, fails = [], 0
    for row, w in zip(report.samples, report.perturbations):
        dw = gradient_array(w.grid, w.values)
        pn = np.sqrt(np.einsum("...ij,...ij->...", dw, dw))
        lq = float(np.sum(pn**q) * w.grid.cell_volume)
        rhs = report.a * j_hat * d ** (2 - q) * lq
        margin = row["energy_gap"] - rhs
        fails += margin < 0
        rows.append({"id": row["id"], "energy_gap": row["energy_gap"], "grad_w_lq": lq,
                     "rhs": rhs, "margin": margin, "ok": bool(margin >= 0)})
    return QVariantReport(q, float(J), report.a, j_hat, d,
                          "j_hat = J**(-q); rhs = a * j_hat * delta**(2-q) * int|grad w|^q",
                          rows, int(fails))
