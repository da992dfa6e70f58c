"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one ``[PASS]`` or ``[FAIL]`` line before asserting; the
lines are printed in criterion order at the end of the pytest run (see
``conftest.py``), also when this file is run as a script.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg

from bmotaylor.bmo import (
    bmo_seminorm,
    bmo_seminorm_bruteforce,
    calibrate_j2,
    calibration_family,
    interpolation_ratio,
    linf_domination_check,
)
from bmotaylor.cli import main as cli_main
from bmotaylor.grid import Grid, ScalarGridFunction, TensorField, gradient_array
from bmotaylor.integrand import double_well, p_growth, quadratic
from bmotaylor.taylor import verify_taylor_inequality
from bmotaylor.variational import (
    GENERATORS,
    BoundaryCondition,
    el_residual,
    energy,
    first_variation,
    minimizer_stress_test,
    second_variation,
    solve_el,
)

REPO = Path(__file__).resolve().parents[1]
RESULTS = {}


def report(number, ok, text):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}"
    RESULTS[number] = line
    assert ok, line


def random_field(rng, shape, rows=1, scale=1.0):
    g = Grid.unit(shape)
    return TensorField(g, scale * rng.normal(size=g.shape + (rows, g.dim)))


# 1 -------------------------------------------------------------------------------

def test_criterion_1_oracle_equivalence():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst, count = 0.0, 0
    for shape in [(16,), (32,), (32, 32), (8, 8, 8)]:
        for _ in range(100):
            f = random_field(rng, shape)
            a = bmo_seminorm(f, "all").seminorm
            b = bmo_seminorm_bruteforce(f).seminorm
            worst = max(worst, abs(a - b) / b)
            count += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and elapsed < 60
    report(1, ok, f"{count} fields, max relative difference {worst:.2e} (< 1e-12), {elapsed:.1f} s (< 60 s)")


# 2 -------------------------------------------------------------------------------

def test_criterion_2_seminorm_axioms():
    rng = np.random.default_rng(2)
    shapes = [(16,), (12, 12), (6, 6, 6)]
    hom, tri = 0.0, 0.0
    const_max = 0.0
    for i in range(500):
        shape = shapes[i % 3]
        f, g = random_field(rng, shape, rows=2), random_field(rng, shape, rows=2)
        alpha = float(rng.normal() * 10 ** rng.uniform(-3, 3))
        sf, sg = bmo_seminorm(f).seminorm, bmo_seminorm(g).seminorm
        hom = max(hom, abs(bmo_seminorm(f * alpha).seminorm - abs(alpha) * sf) / (abs(alpha) * sf))
        excess = bmo_seminorm(f + g).seminorm - (sf + sg)
        tri = max(tri, excess / (sf + sg))
        c = TensorField.constant(f.grid, rng.normal(size=(2, f.grid.dim)) * 10 ** rng.uniform(-5, 5))
        const_max = max(const_max, bmo_seminorm(c).seminorm)
    ok = hom < 1e-12 and tri < 1e-12 and const_max == 0.0
    report(2, ok, f"500 pairs, homogeneity error {hom:.2e}, worst triangle excess {tri:.2e} "
                  f"(both < 1e-12), constant-field seminorm max {const_max}")


# 3 -------------------------------------------------------------------------------

def test_criterion_3_linf_domination():
    rng = np.random.default_rng(3)
    shapes = [(20,), (10, 10), (5, 5, 5)]
    violations, worst = 0, np.inf
    for i in range(1000):
        f = random_field(rng, shapes[i % 3], rows=1 + i % 2, scale=10 ** rng.uniform(-3, 3))
        ok, margin = linf_domination_check(f)
        violations += not ok
        worst = min(worst, margin / (2 * np.abs(f.values).max()))
    report(3, violations == 0, f"1000 fields, {violations} violations, smallest relative margin {worst:.3f}")


# 4-6 -------------------------------------------------------------------------------

TAYLOR_FAMILIES = {
    "quadratic k=2": lambda: quadratic(2, 2, k=2),
    "quadratic k=3": lambda: quadratic(2, 2, k=3),
    "double_well k=2": lambda: double_well(2, 2, k=2),
    "double_well k=3": lambda: double_well(2, 2, k=3),
    "p_growth m=4 k=2": lambda: p_growth(2, 2, m=4, k=2),
    "p_growth m=4 k=3": lambda: p_growth(2, 2, m=4, k=3),
}


@pytest.fixture(scope="module")
def taylor_runs():
    """200 seeded (F, G) pairs per integrand on an 8x8 grid with 2x2 matrices."""
    grid = Grid.unit((8, 8))
    family = calibration_family(grid, rows=2, seed=0)
    runs = {}
    start = time.perf_counter()
    for name, make in TAYLOR_FAMILIES.items():
        W = make()
        p, q = W.k, W.k + W.r
        family_j2 = calibrate_j2(family, p, q)
        rng = np.random.default_rng(40 + len(runs))
        reports = []
        for _ in range(200):
            F = random_field(rng, (8, 8), rows=2, scale=10 ** rng.uniform(-1, 0.3))
            H = random_field(rng, (8, 8), rows=2, scale=10 ** rng.uniform(-2, 0.3))
            # J2 over the generator family plus H itself
            J2 = max(family_j2, interpolation_ratio(H, p, q).ratio)
            reports.append(verify_taylor_inequality(W, F, F + H, M=1e3, J2=J2, nodes=8))
        runs[name] = reports
    return runs, time.perf_counter() - start


def test_criterion_4_taylor_identity(taylor_runs):
    runs, elapsed = taylor_runs
    worst = max(r.identity_gap / (1 + abs(r.lhs)) for reps in runs.values() for r in reps)
    total = sum(len(v) for v in runs.values())
    ok = worst <= 1e-10 and elapsed < 120
    report(4, ok, f"{total} pairs over {len(runs)} integrands, max gap/(1+|lhs|) {worst:.2e} "
                  f"(<= 1e-10), {elapsed:.1f} s (< 120 s)")


def test_criterion_5_remainder_bounds(taylor_runs):
    runs, _ = taylor_runs
    reps = [r for v in runs.values() for r in v]
    pw = sum(not r.pointwise_ok for r in reps)
    integ = sum(not r.integrated_bound_ok for r in reps)
    worst = max(r.pointwise_max_ratio for r in reps)
    report(5, pw == 0 and integ == 0,
           f"{len(reps)} pairs, pointwise violations {pw}, integrated violations {integ}, "
           f"largest pointwise ratio {worst:.3f}")


def test_criterion_6_full_inequality(taylor_runs):
    runs, _ = taylor_runs
    valid = [r for v in runs.values() for r in v if r.j2_valid]
    bad = 0
    for r in valid:
        scale = 1 + abs(r.lhs) + sum(abs(t) for t in r.expansion_terms) + r.c_bound * r.h_k
        bad += r.inequality_margin < -1e-10 * scale
    total = sum(len(v) for v in runs.values())
    report(6, bad == 0 and len(valid) == total,
           f"{len(valid)}/{total} pairs with valid per-field J2, {bad} negative margins")


# 7 -------------------------------------------------------------------------------

def test_criterion_7_quadratic_exactness():
    g = Grid.unit((16, 16))
    A = np.array([[0.7, -0.3], [0.2, 1.1]])
    data = ScalarGridFunction.affine(g, A, np.array([0.5, -0.25]))
    bc = BoundaryCondition.dirichlet(data)
    W = quadratic(2, 2)
    init = ScalarGridFunction(g, bc.admissible(data.values + 0.1 * np.random.default_rng(7).normal(size=data.values.shape)))
    eq = solve_el(W, bc, init)
    rep = minimizer_stress_test(W, eq, bc, 1.0, n_samples=50, seed=7)
    gap_err = max(abs(r["energy_gap"] - 0.5 * r["grad_w_l2sq"]) / (0.5 * r["grad_w_l2sq"]) for r in rep.samples)
    quarter = max(abs(r["margin"] - 0.25 * r["grad_w_l2sq"]) / (0.25 * r["grad_w_l2sq"]) for r in rep.samples)
    failures = [minimizer_stress_test(W, eq, bc, d, n_samples=50, seed=7).failures for d in (1e-3, 1e2, 1e5)]
    ok = (eq.el_residual_norm < 1e-10 and abs(eq.coercivity_4a - 1) <= 1e-8 and len(rep.samples) == 50
          and gap_err <= 1e-12 and quarter <= 1e-8 and rep.failures == 0 and not any(failures))
    report(7, ok, f"residual {eq.el_residual_norm:.1e}, lambda_min {eq.coercivity_4a:.12f}, "
                  f"max rel error of E(u_e+w)-E(u_e) vs 1/2 int|grad w|^2 {gap_err:.1e}, "
                  f"margin vs 1/4 int|grad w|^2 {quarter:.1e}, failures {[rep.failures] + failures}")


# 8 -------------------------------------------------------------------------------

def test_criterion_8_nonconvex_instance():
    start = time.perf_counter()
    g = Grid.unit((32, 32))
    data = ScalarGridFunction.affine(g, 2.0 * np.eye(2))
    bc = BoundaryCondition.dirichlet(data)
    W = double_well(2, 2, k=3)
    rng = np.random.default_rng(8)
    init = ScalarGridFunction(g, bc.admissible(data.values + 0.05 * rng.normal(size=data.values.shape)))
    eq = solve_el(W, bc, init, tol=1e-9, max_iter=2000)
    rep = minimizer_stress_test(W, eq, bc, 1.0, generators=tuple(GENERATORS), n_samples=200, seed=8)
    at_cert = minimizer_stress_test(W, eq, bc, rep.certified_delta, generators=tuple(GENERATORS),
                                    n_samples=200, seed=8)
    gens = {r["generator"] for r in rep.samples}
    proof = all(r["proof_inequality_ok"] and r["j_valid"] for r in rep.samples)
    elapsed = time.perf_counter() - start
    ok = (eq.el_residual_norm < 1e-8 and eq.coercivity_4a > 0 and rep.certified_delta > 0
          and at_cert.failures == 0 and len(rep.samples) == 200 and gens == set(GENERATORS)
          and proof and elapsed < 300)
    report(8, ok, f"residual {eq.el_residual_norm:.1e}, lambda_min {eq.coercivity_4a:.6f}, "
                  f"certified delta {rep.certified_delta:g} with {at_cert.failures} failures over "
                  f"{len(rep.samples)} samples ({', '.join(sorted(gens))}), J {rep.J:.4f}, "
                  f"proof inequality {'holds' if proof else 'FAILS'} per sample, {elapsed:.1f} s (< 300 s)")


# 9 -------------------------------------------------------------------------------

def _fd_orders(fun, exact, steps):
    errs = [abs((fun(t) - fun(-t)) / (2 * t) - exact) for t in steps]
    return np.diff(np.log(errs)) / np.diff(np.log(steps))


def test_criterion_9_fd_consistency():
    rng = np.random.default_rng(9)
    g = Grid.unit((6, 6))
    data = ScalarGridFunction.affine(g, np.array([[0.9, 0.1], [-0.2, 0.7]]))
    cases = [
        (double_well(2, 2), BoundaryCondition.dirichlet(data)),
        (p_growth(2, 2, m=4), BoundaryCondition.mixed(data, ["x-", "y+"])),
        (p_growth(2, 2, m=3, r=1, c_k=50), BoundaryCondition.neumann(g, 2)),
    ]
    steps = [2e-2, 1e-2, 5e-3]
    worst_order, worst_dof = np.inf, 0.0
    for W, bc in cases:
        u = ScalarGridFunction(g, bc.admissible(data.values + 0.3 * rng.normal(size=data.values.shape)))
        w = ScalarGridFunction(g, bc.project_variation(rng.normal(size=data.values.shape)))
        E = lambda t: energy(W, u + w * t)
        worst_order = min(worst_order, _fd_orders(E, first_variation(W, u, w, bc), steps).min())
        r, _ = el_residual(W, u, bc)
        rep = float(np.sum(r.values * w.values) * g.cell_volume)
        worst_order = min(worst_order, _fd_orders(E, rep, steps).min())
        # residual against per-DOF central differences of the energy
        fd = np.zeros(data.values.shape)
        for idx in np.ndindex(fd.shape):
            e = np.zeros(fd.shape)
            e[idx] = 1e-5
            fd[idx] = (energy(W, u + ScalarGridFunction(g, e)) - energy(W, u + ScalarGridFunction(g, -e))) / 2e-5
        fd = bc.project_variation(fd / g.cell_volume)
        worst_dof = max(worst_dof, np.abs(fd - r.values).max() / (1 + np.abs(fd).max()))

    # second variation against the dense spectral oracle on 5x5
    g5 = Grid.unit((5, 5))
    d5 = ScalarGridFunction.affine(g5, 1.5 * np.eye(2))
    bc5 = BoundaryCondition.mixed(d5, ["x-", "y-"])
    W = double_well(2, 2)
    u5 = ScalarGridFunction(g5, bc5.admissible(d5.values + 0.2 * rng.normal(size=d5.values.shape)))
    free = np.flatnonzero(np.broadcast_to(bc5.free_mask()[..., None], (5, 5, 2)).ravel())
    n = 50
    basis = np.eye(n).reshape((n, 5, 5, 2))
    S = np.array([[second_variation(W, u5, ScalarGridFunction(g5, basis[i]), ScalarGridFunction(g5, basis[j]))
                   for j in free] for i in free])
    evals, evecs = scipy.linalg.eigh(S)
    quad_err = 0.0
    for _ in range(10):
        z = bc5.project_variation(rng.normal(size=(5, 5, 2)))
        c = evecs.T @ z.ravel()[free]
        oracle = float(np.sum(evals * c * c))
        direct = second_variation(W, u5, ScalarGridFunction(g5, z), ScalarGridFunction(g5, z))
        quad_err = max(quad_err, abs(direct - oracle) / max(1.0, abs(oracle)))
    ok = worst_order >= 1.8 and worst_dof < 1e-8 and quad_err < 1e-8
    report(9, ok, f"min observed FD order {worst_order:.3f} (>= 1.8), residual vs per-DOF FD {worst_dof:.1e}, "
                  f"second variation vs dense spectral form {quad_err:.1e} (< 1e-8)")


# 10 ------------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    names = sorted(p.name for p in (REPO / "configs").glob("*.json"))
    mismatched = []
    for name in names:
        cfg = json.loads((REPO / "configs" / name).read_text())
        cfg["output"] = "report.json"
        outs = []
        for run in range(2):
            folder = tmp_path / f"{Path(name).stem}_{run}"
            folder.mkdir()
            path = folder / name
            path.write_text(json.dumps(cfg))
            cli_main(["--config", str(path), "--no-timestamp", "--seed", "20261016"])
            outs.append((folder / "report.json").read_bytes())
            csv = folder / "report.csv"
            if csv.exists():
                outs[-1] += csv.read_bytes()
        if outs[0] != outs[1]:
            mismatched.append(name)
    report(10, not mismatched, f"{len(names)} configs run twice with equal seeds, "
                               f"{len(mismatched)} byte mismatches {mismatched or ''}".rstrip())


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
