"""Batch experiment driver: ``bmotaylor <command> --config cfg.json``.

Every run writes a JSON report (the source of truth) and, for tabular
commands, a CSV of the per-row table next to it.  Exit status is 0 on
success, 1 on configuration or I/O errors and 2 when a checked property
fails.  Relative paths inside a config resolve against the config's folder.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .bmo import (
    bmo_seminorm,
    calibrate_j2,
    calibration_family,
    embedding_ratio,
    interpolation_ratio,
    linf_domination_check,
)
from .exceptions import ConfigurationError, DomainError, PreconditionError, ResourceError
from .grid import Grid, ScalarGridFunction, TensorField, gradient_array, lp_norm, read_gf1
from .integrand import integrand_from_config
from .report import content_hash, csv_text, dumps
from .taylor import summary_table, verify_taylor_inequality
from .variational import (
    GENERATORS,
    BoundaryCondition,
    minimizer_stress_test,
    remark_q_variant,
    solve_el,
)

log = logging.getLogger("bmotaylor")

COMMANDS = ("bmo-norm", "interp-calibrate", "taylor-check", "el-solve", "stress-test")
TABULAR = ("bmo-norm", "interp-calibrate", "stress-test")
EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION = 0, 1, 2


def load_schema() -> dict:
    text = resources.files("bmotaylor").joinpath("data/config.schema.json").read_text()
    return json.loads(text)


def validate_config(cfg) -> None:
    """Raise ConfigurationError naming the first offending field."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (len(e.path), list(map(str, e.path))))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigurationError(f"config field {where}: {err.message}")


class _Run:
    """State shared by one command: config, seed, paths and input files read."""

    def __init__(self, cfg: dict, base: Path, seed: int, workers: int):
        self.cfg = cfg
        self.base = base
        self.seed = seed
        self.workers = workers
        self.inputs: list[Path] = []
        self.mode = cfg.get("mode", "all")

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base / q

    def grid(self) -> Grid:
        spec = self.cfg.get("grid")
        if spec is None:
            raise ConfigurationError("config field grid: required for generated fields")
        shape = tuple(spec["shape"])
        spacing = spec.get("spacing", 1.0 / shape[0])
        try:
            if "origin" in spec:
                return Grid(shape, spacing, tuple(spec["origin"]))
            return Grid(shape, spacing)
        except DomainError as exc:
            raise ConfigurationError(f"config field grid: {exc}") from exc

    def field(self, spec: dict, where: str, cols_grid: Grid | None = None) -> TensorField:
        scale = float(spec.get("scale", 1.0))
        if "path" in spec:
            path = self.path(spec["path"])
            self.inputs.append(path)
            try:
                f = read_gf1(path)
            except DomainError as exc:
                raise ConfigurationError(f"config field {where}: {exc}") from exc
            return f * scale
        grid = cols_grid or self.grid()
        kind = spec["kind"]
        rows = int(spec.get("rows", 1))
        n = grid.dim
        if kind == "constant":
            value = np.asarray(spec["value"], dtype=float)
            if value.shape[1:] != (n,):
                raise ConfigurationError(f"config field {where}/value: expected {n} columns")
            return TensorField.constant(grid, value * scale)
        if kind == "zero":
            return TensorField.zeros(grid, rows)
        rng = np.random.default_rng([self.seed, int(spec.get("stream", 0))])
        x = grid.centers()
        if kind == "random":
            vals = rng.normal(size=grid.shape + (rows, n))
        elif kind == "log":
            lower = np.array(grid.origin) - grid.spacing / 2
            x0 = lower + grid.spacing * np.array(grid.shape) * rng.uniform(0.25, 0.75, size=n)
            x0 = x0 + grid.spacing / 3
            prof = np.log(np.linalg.norm(x - x0, axis=-1))
            vals = prof[..., None, None] * rng.normal(size=(rows, n))
        else:  # step
            axis = int(rng.integers(n))
            cut = float(np.median(x[..., axis]))
            prof = np.where(x[..., axis] < cut, 1.0, -1.0)
            vals = prof[..., None, None] * rng.normal(size=(rows, n))
        return TensorField(grid, vals * scale)

    def boundary(self, rows: int) -> BoundaryCondition:
        spec = self.cfg["bc"]
        grid = self.grid()
        kind = spec["kind"]
        data = None
        if "data" in spec:
            A = np.asarray(spec["data"]["A"], dtype=float)
            b = spec["data"].get("b")
            if A.shape != (rows, grid.dim):
                raise ConfigurationError(
                    f"config field bc/data/A: expected shape {(rows, grid.dim)}, got {A.shape}"
                )
            data = ScalarGridFunction.affine(grid, A, None if b is None else np.asarray(b, float))
        elif kind != "neumann":
            data = ScalarGridFunction.zeros(grid, rows)
        loads = {}
        if "body_load" in spec:
            loads["body_load"] = np.asarray(spec["body_load"], dtype=float)
        if "surface_load" in spec:
            loads["surface_load"] = {f: np.asarray(v, float) for f, v in spec["surface_load"].items()}
        try:
            if kind == "dirichlet":
                return BoundaryCondition.dirichlet(data, **loads)
            if kind == "neumann":
                return BoundaryCondition.neumann(grid, rows, **loads)
            return BoundaryCondition.mixed(data, spec.get("faces", []), **loads)
        except DomainError as exc:
            raise ConfigurationError(f"config field bc: {exc}") from exc

    def integrand(self, rows: int, cols: int):
        return integrand_from_config(self.cfg["integrand"], rows, cols)

    def components(self) -> int:
        bc = self.cfg["bc"]
        if "components" in bc:
            return int(bc["components"])
        if "data" in bc:
            return len(bc["data"]["A"])
        params = self.cfg["integrand"].get("parameters") or {}
        return int(params.get("N", 1))


def _fields_of(run: _Run) -> list[TensorField]:
    cfg = run.cfg
    specs = cfg["fields"] if "fields" in cfg else [cfg["field"]]
    key = "fields" if "fields" in cfg else "field"
    return [run.field(s, f"{key}/{i}" if key == "fields" else key) for i, s in enumerate(specs)]


def cmd_bmo_norm(run: _Run):
    rows, ok = [], True
    for i, f in enumerate(_fields_of(run)):
        rep = bmo_seminorm(f, run.mode)
        dom_ok, margin = linf_domination_check(f, run.mode)
        ok &= dom_ok
        rows.append({"id": i, **rep.to_dict(), "linf_domination_ok": dom_ok,
                     "linf_domination_margin": margin})
    body = {"results": rows}
    if len(rows) == 1:
        body = {**rows[0], "results": rows}
    return body, rows, (EXIT_OK if ok else EXIT_VIOLATION), f"seminorm {rows[0]['seminorm']:.10g}"


def cmd_interp_calibrate(run: _Run):
    cfg = run.cfg
    grid = run.grid()
    fam_cfg = cfg.get("family", {})
    family = calibration_family(grid, fam_cfg.get("rows", 1), run.seed, fam_cfg.get("n_random", 8))
    if "fields" in cfg:
        family += _fields_of(run)
    p, q = float(cfg["p"]), float(cfg["q"])
    try:
        J2 = calibrate_j2(family, p, q, run.mode, run.workers)
    except DomainError as exc:
        raise ConfigurationError(f"config field p/q: {exc}") from exc
    rows = []
    for i, f in enumerate(family):
        if lp_norm(f, p) == 0:
            continue
        rep = interpolation_ratio(f, p, q, run.mode)
        rows.append({"id": i, "lhs": rep.lhs, "rhs_factor": rep.rhs_factor, "ratio": rep.ratio,
                     "embedding_ratio": embedding_ratio(f, q, run.mode)})
    J1 = max(r["embedding_ratio"] for r in rows)
    body = {"p": p, "q": q, "J1": J1, "J2": J2, "family_size": len(rows), "mode": run.mode,
            "fields": rows}
    return body, rows, EXIT_OK, f"J2 {J2:.10g}  J1 {J1:.10g}"


def cmd_taylor_check(run: _Run):
    cfg = run.cfg
    F = run.field(cfg["F"], "F")
    G = run.field(cfg["G"], "G", F.grid)
    if G.grid != F.grid or G.values.shape != F.values.shape:
        raise ConfigurationError("config field G: grid or shape differs from F")
    W = run.integrand(F.rows, F.cols)
    J2 = cfg["J2"]
    calibrated = J2 == "calibrate"
    if calibrated:
        family = calibration_family(F.grid, F.rows, run.seed)
        H = G - F
        if lp_norm(H, W.k) > 0:
            family.append(H)
        J2 = calibrate_j2(family, W.k, W.k + W.r, run.mode, run.workers)
    try:
        rep = verify_taylor_inequality(W, F, G, float(cfg["M"]), float(J2),
                                       int(cfg.get("nodes", 8)), run.mode)
    except PreconditionError as exc:
        raise ConfigurationError(f"config field M: {exc}") from exc
    body = {"integrand": W.to_dict(), "J2_calibrated": calibrated, **rep.to_dict()}
    exact_tol = 1e-10 * (1 + abs(rep.lhs))
    ok = (rep.integrated_bound_ok and rep.inequality_ok
          and (W.polynomial_degree is None or rep.identity_gap <= exact_tol))
    body["checks_ok"] = ok
    return body, None, (EXIT_OK if ok else EXIT_VIOLATION), summary_table(rep)


def _equilibrium(run: _Run):
    cfg = run.cfg
    rows = run.components()
    bc = run.boundary(rows)
    W = run.integrand(rows, bc.grid.dim)
    tol = cfg.get("tolerances", {})
    noise = cfg.get("init", {}).get("noise", 0.0)
    base = bc.data.values if bc.data is not None else np.zeros(bc.grid.shape + (rows,))
    rng = np.random.default_rng([run.seed, 7])
    init = ScalarGridFunction(bc.grid, bc.admissible(base + noise * rng.normal(size=base.shape)))
    eq = solve_el(W, bc, init, tol=tol.get("el_residual", 1e-10), max_iter=tol.get("max_iter", 500),
                  lambda_iters=tol.get("lambda_iters", 200), seed=run.seed)
    return W, bc, eq


def cmd_el_solve(run: _Run):
    W, bc, eq = _equilibrium(run)
    body = {"integrand": W.to_dict(), "bc": bc.to_dict(), "grid": bc.grid.to_dict(), **eq.to_dict()}
    code = EXIT_OK if eq.converged else EXIT_VIOLATION
    msg = (f"{eq.status} after {eq.solver_iterations} iterations, residual "
           f"{eq.el_residual_norm:.3e}, 4a {eq.coercivity_4a:.10g}")
    return body, None, code, msg


def cmd_stress_test(run: _Run):
    cfg = run.cfg
    W, bc, eq = _equilibrium(run)
    if eq.coercivity_4a <= 0:
        body = {"integrand": W.to_dict(), "bc": bc.to_dict(), **eq.to_dict(include_state=False)}
        return body, [], EXIT_VIOLATION, f"second variation not positive: 4a = {eq.coercivity_4a}"
    sweep = cfg["delta"] == "sweep"
    delta = float(cfg.get("delta_max", 1.0)) if sweep else float(cfg["delta"])
    rep = minimizer_stress_test(
        W, eq, bc, delta, cfg.get("generators", list(GENERATORS)), cfg.get("n_samples", 40),
        seed=run.seed, J=cfg.get("J"), a=cfg.get("a"), sweep_steps=cfg.get("sweep_steps", 8),
        mode=run.mode, workers=run.workers,
    )
    body = {"integrand": W.to_dict(), "bc": bc.to_dict(), "grid": bc.grid.to_dict(),
            "equilibrium": eq.to_dict(include_state=False), "delta_mode": "sweep" if sweep else "fixed",
            **rep.to_dict()}
    code = EXIT_OK
    if not sweep and rep.failures:
        code = EXIT_VIOLATION
    if sweep and rep.certified_delta <= 0:
        code = EXIT_VIOLATION
    if not all(r["proof_inequality_ok"] for r in rep.samples if r["j_valid"]):
        code = EXIT_VIOLATION
    if "q_variant" in cfg:
        qv = cfg["q_variant"]
        try:
            J_q = qv.get("J")
            if J_q is None:
                fam = calibration_family(bc.grid, bc.components, run.seed)
                fam += [TensorField(bc.grid, gradient_array(bc.grid, w.values))
                        for w in rep.perturbations]
                J_q = calibrate_j2(fam, 2, qv["q"], run.mode, run.workers)
            qrep = remark_q_variant(rep, qv["q"], J_q)
        except PreconditionError as exc:
            raise ConfigurationError(f"config field q_variant/q: {exc}") from exc
        body["q_variant"] = qrep.to_dict()
        if qrep.failures:
            code = EXIT_VIOLATION
    msg = (f"failures {rep.failures}/{len(rep.samples)} at delta {rep.delta:.6g}; "
           f"certified delta {rep.certified_delta:.6g}; a {rep.a:.6g}; J {rep.J:.6g}")
    return body, rep.samples, code, msg


HANDLERS = {
    "bmo-norm": cmd_bmo_norm,
    "interp-calibrate": cmd_interp_calibrate,
    "taylor-check": cmd_taylor_check,
    "el-solve": cmd_el_solve,
    "stress-test": cmd_stress_test,
}


def _flatten(body: dict, prefix: str = "") -> list[dict]:
    out = []
    for k, v in body.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out += _flatten(v, name + ".")
        elif not isinstance(v, list):
            out.append({"key": name, "value": v})
    return out


def run(cfg: dict, base: Path = Path("."), seed: int | None = None, workers: int = 1,
        timestamp: bool = True, csv: bool = False, command: str | None = None) -> tuple[int, dict, Path]:
    """Validate ``cfg``, execute it and write the reports; returns (exit code, report, json path)."""
    validate_config(cfg)
    if command is not None and command != cfg["command"]:
        raise ConfigurationError(
            f"config field command: {cfg['command']!r} does not match requested {command!r}"
        )
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    if not 0 <= seed < 2**64:
        raise ConfigurationError("seed must be an unsigned 64-bit integer")
    r = _Run(cfg, base, seed, max(1, int(workers)))
    name = cfg["command"]
    body, table, code, message = HANDLERS[name](r)
    report = {"command": name, "version": __version__}
    if timestamp:
        report["timestamp"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    report["seed"] = seed
    report["config"] = cfg
    report["input_hash"] = content_hash({"config": cfg, "seed": seed}, r.inputs)
    report["exit_status"] = code
    report.update(body)

    out = r.path(cfg.get("output", f"{name}.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps(report), encoding="utf-8")
    if name in TABULAR or csv:
        rows = table if name in TABULAR else _flatten(body)
        if rows and isinstance(rows[0].get("argmax_cube"), dict):
            rows = [{k: v for k, v in row.items() if k != "argmax_cube"}
                    | {"cube_origin": row["argmax_cube"]["origin"],
                       "cube_side": row["argmax_cube"]["side"]}
                    for row in rows]
        out.with_suffix(".csv").write_text(csv_text(rows or []), encoding="utf-8")
    print(message)
    return code, report, out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bmotaylor",
        description="BMO norms, Taylor-remainder checks and W^{1,BMO} minimizer stress tests.",
    )
    parser.add_argument("command", nargs="?", choices=COMMANDS,
                        help="command to run; defaults to the config's command")
    parser.add_argument("--config", required=True, help="path to the JSON experiment config")
    parser.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    parser.add_argument("--workers", type=int, default=1, help="cap on worker threads")
    parser.add_argument("--no-timestamp", action="store_true",
                        help="omit the timestamp so equal runs give identical bytes")
    parser.add_argument("--csv", action="store_true",
                        help="also write a key/value CSV for non-tabular commands")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    path = Path(args.config)
    try:
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        code, _, _ = run(cfg, path.parent, args.seed, args.workers, not args.no_timestamp,
                         args.csv, args.command)
        return code
    except (ConfigurationError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ResourceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        where = exc.filename if exc.filename is not None else path
        print(f"I/O error: {where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
