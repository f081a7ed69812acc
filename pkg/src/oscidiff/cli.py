"""Command-line front end.

A single JSON document configures an experiment; subcommands dispatch to
the cell solvers, tensor assembly, PDE solvers, and the convergence
harness, and emit tables, serialized artifacts, and plot data.

Exit codes: 0 all checks passed, 1 configuration error, 2 solver error,
3 assertion (property check) failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import cellsolve as cs, effmat as em, harness as hz, pdesolve as pde
from .errors import ConfigError, OscidiffError
from .fields import CellGrid, MacroGrid, load_gridded, make_field

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_ASSERT = 3


_U0_BUILTINS = {
    "sine": {
        1: lambda x: np.sin(np.pi * x[:, 0]),
        2: lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]),
    },
    "zero": {
        1: lambda x: np.zeros(len(x)),
        2: lambda x: np.zeros(len(x)),
    },
    "bump": {
        1: lambda x: (x[:, 0] * (1 - x[:, 0])) * 4.0,
        2: lambda x: 16.0 * x[:, 0] * (1 - x[:, 0]) * x[:, 1] * (1 - x[:, 1]),
    },
}

_F_BUILTINS = {
    "one": lambda x, t: np.ones(len(x)),
    "zero": lambda x, t: np.zeros(len(x)),
    "decaying": lambda x, t: np.exp(-t) * np.ones(len(x)),
}


@dataclass
class ExperimentConfig:
    """Validated experiment description (parsed from a JSON document)."""

    field: object
    p: float
    r: float
    regime: str
    eps_list: list
    cell_grid: CellGrid
    macro_grid: MacroGrid
    u0_name: str
    f_name: str
    u0abs: float
    seed: int
    raw: dict = dc_field(default_factory=dict)

    @property
    def u0(self):
        return _U0_BUILTINS[self.u0_name][self.field.dim]

    @property
    def f(self):
        return _F_BUILTINS[self.f_name]

    def data(self):
        return {"u0": self.u0, "f": self.f, "n_x": self.macro_grid.n_x,
                "n_t": self.macro_grid.n_t, "T": self.macro_grid.T}


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"{path}: cannot read config: {err}") from err
    return parse_config(doc)


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    fspec = doc.get("field", {"name": "trig1d_st"})
    if "file" in fspec:
        field = load_gridded(fspec["file"])
    elif "name" in fspec:
        params = {k: v for k, v in fspec.items() if k != "name"}
        field = make_field(fspec["name"], **params)
    else:
        raise ConfigError("field spec needs 'name' (builtin) or 'file' (gridded)")

    p = float(doc.get("p", 1.0))
    r = float(doc.get("r", 1.0))
    regime = doc.get("regime", "auto")
    if regime == "auto":
        if r < 2:
            regime = "subcritical"
        elif r > 2:
            regime = "supercritical"
        else:
            if p == 1:
                raise ConfigError("config field 'p': critical regime requires p != 1")
            regime = "critical"
    if regime not in ("classical", "subcritical", "critical", "supercritical"):
        raise ConfigError(f"config field 'regime': unknown value {regime!r}")
    if regime == "critical":
        if not (0 < p < 2) or p == 1:
            raise ConfigError("config field 'p': critical regime requires "
                              "p in (0,2) and p != 1")
    if not (0 < p < 2):
        raise ConfigError(f"config field 'p': must lie in (0,2), got {p}")

    eps_list = [float(e) for e in doc.get("eps", [1 / 8, 1 / 16, 1 / 32])]
    for e in eps_list:
        if not pde.is_dyadic(e):
            raise ConfigError(f"config field 'eps': {e} is not of the form 1/2^m")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError("config field 'eps': must be strictly decreasing")

    g = doc.get("grids", {})
    cell_grid = CellGrid(
        M_y=int(g.get("M_y", 64 if field.dim == 1 else 48)),
        M_s=int(g.get("M_s", 64)),
        face_avg=g.get("face_avg", "geometric"),
    )
    macro_grid = MacroGrid(
        dim=field.dim,
        n_x=int(g.get("n_x", 256 if field.dim == 1 else 48)),
        n_t=int(g.get("n_t", 32)),
        T=float(g.get("T", 0.25)),
    )

    d = doc.get("data", {})
    u0_name = d.get("u0", "sine")
    f_name = d.get("f", "one")
    if u0_name not in _U0_BUILTINS:
        raise ConfigError(f"config field 'data.u0': unknown builtin {u0_name!r}; "
                          f"choices: {sorted(_U0_BUILTINS)}")
    if f_name not in _F_BUILTINS:
        raise ConfigError(f"config field 'data.f': unknown builtin {f_name!r}; "
                          f"choices: {sorted(_F_BUILTINS)}")

    return ExperimentConfig(
        field=field, p=p, r=r, regime=regime, eps_list=eps_list,
        cell_grid=cell_grid, macro_grid=macro_grid,
        u0_name=u0_name, f_name=f_name,
        u0abs=float(doc.get("u0abs", 1.0)), seed=int(doc.get("seed", 0)),
        raw=doc,
    )


def _echo_config(cfg: ExperimentConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_echo.json"), "w") as fh:
        json.dump(cfg.raw, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cell_regime(cfg):
    if cfg.regime != "critical":
        return cfg.regime, None
    branch = "critical_fde" if cfg.p < 1 else "critical_pme"
    return branch, cs.CellParameter(p=cfg.p, u0abs=cfg.u0abs)


def _table(rows, header):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    out = ["  ".join(str(h).ljust(w) for h, w in zip(header, widths))]
    for r in rows:
        out.append("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_cell(cfg: ExperimentConfig, out_dir, as_json=False, **_kw):
    regime, param = _cell_regime(cfg)
    cells = cs.solve_cells(cfg.field, cfg.cell_grid, regime, param=param)
    _echo_config(cfg, out_dir)
    rows = []
    summary = []
    for c in cells:
        path = os.path.join(out_dir, f"cell_k{c.k}.txt")
        cs.save_cell(path, c)
        rows.append([c.k, f"{np.max(np.abs(c.phi)):.3e}",
                     f"{c.mean_defect():.3e}", f"{c.periodic_defect:.3e}",
                     f"{c.residual:.3e}", path])
        summary.append({"k": c.k, "max_phi": float(np.max(np.abs(c.phi))),
                        "mean_defect": c.mean_defect(),
                        "periodic_defect": c.periodic_defect,
                        "residual": c.residual, "path": path})
    print(_table(rows, ["k", "max|Phi|", "mean defect", "periodic defect",
                        "residual", "file"]))
    if as_json:
        _dump_json(out_dir, "cell_summary.json", {"regime": regime, "cells": summary})
    return EXIT_OK


def cmd_ahom(cfg: ExperimentConfig, out_dir, as_json=False, jobs=1, **_kw):
    _echo_config(cfg, out_dir)
    if cfg.regime == "critical":
        tensor = em.tabulate_ahom_critical(cfg.field, cfg.cell_grid, cfg.p, jobs=jobs)
    else:
        cells = cs.solve_cells(cfg.field, cfg.cell_grid, cfg.regime)
        tensor = em.assemble_ahom(cells, cfg.field, cfg.cell_grid)
    ell = em.ellipticity_report(tensor, seed=cfg.seed)
    checks = {"ellipticity_min_slack": ell["min_slack"]}
    if cfg.regime != "critical":
        sym = em.skew_report(tensor)
        checks["max_asymmetry"] = sym["max_asymmetry"]
    em.save_tensor(os.path.join(out_dir, "ahom.txt"), tensor)
    em.export_table_csv(os.path.join(out_dir, "ahom.csv"), tensor)
    print(f"regime: {tensor.regime}")
    for key, M in zip(tensor.u0abs_keys if tensor.is_table else [None],
                      tensor.matrices):
        label = "a_hom" if key is None else f"a_hom(|u0|={key:g})"
        print(f"{label} =\n{M}")
        if tensor.is_table and key > 0.02:
            break  # keep stdout short; full table is in the CSV
    print(f"checks: {checks}")
    if as_json:
        _dump_json(out_dir, "ahom_summary.json",
                   {"regime": tensor.regime, "checks": checks,
                    "matrices": tensor.matrices.tolist()})
    return EXIT_OK


def cmd_micro(cfg: ExperimentConfig, out_dir, as_json=False, **_kw):
    _echo_config(cfg, out_dir)
    rows, summary = [], []
    for eps in cfg.eps_list:
        prob = pde.MicroProblem(field=cfg.field, eps=eps, r=cfg.r, p=cfg.p,
                                f=cfg.f, u0=cfg.u0, grid=cfg.macro_grid)
        traj = pde.solve_micro(prob)
        m = int(round(math.log2(1.0 / eps)))
        path = os.path.join(out_dir, f"micro_eps2e{m}.txt")
        pde.save_traj(path, traj)
        rows.append([f"{eps:g}", traj.stats["substeps"],
                     f"{traj.stats['newton_mean']:.2f}",
                     f"{np.max(np.abs(traj.values[-1])):.6f}", path])
        summary.append({"eps": eps, **traj.stats, "path": path})
    print(_table(rows, ["eps", "substeps", "newton mean", "max|v(T)|", "file"]))
    if as_json:
        _dump_json(out_dir, "micro_summary.json", {"runs": summary})
    return EXIT_OK


def cmd_homog(cfg: ExperimentConfig, out_dir, as_json=False, jobs=1, **_kw):
    _echo_config(cfg, out_dir)
    if cfg.regime == "critical":
        tensor = em.tabulate_ahom_critical(cfg.field, cfg.cell_grid, cfg.p, jobs=jobs)
        mode = "critical_table"
    else:
        cells = cs.solve_cells(cfg.field, cfg.cell_grid, cfg.regime)
        tensor = em.assemble_ahom(cells, cfg.field, cfg.cell_grid)
        mode = "constant"
    prob = pde.HomogenizedProblem(tensor=tensor, p=cfg.p, f=cfg.f, u0=cfg.u0,
                                  grid=cfg.macro_grid, mode=mode)
    traj = pde.solve_homogenized(prob)
    path = os.path.join(out_dir, "homog.txt")
    pde.save_traj(path, traj)
    print(f"mode: {mode}, newton mean {traj.stats['newton_mean']:.2f}, "
          f"max|v(T)| = {np.max(np.abs(traj.values[-1])):.6f}")
    print(f"trajectory written to {path}")
    if as_json:
        _dump_json(out_dir, "homog_summary.json", {"mode": mode, **traj.stats})
    return EXIT_OK


_PLOT_SCRIPT = """\
# gnuplot script for the convergence curves
set logscale xy
set xlabel "eps"
set ylabel "error"
set key left top
plot "converge_sol_err.dat" w lp t "solution", \\
     "converge_grad_corr_err.dat" w lp t "gradient corrector", \\
     "converge_flux_corr_err.dat" w lp t "flux corrector", \\
     "converge_dtime_corr_err.dat" w lp t "time-derivative corrector", \\
     "converge_grad_plain_err.dat" w lp t "plain gradient", \\
     "converge_flux_plain_err.dat" w lp t "plain flux"
"""


def _converge_checks(report, strict_rates=False):
    """Monotonicity (and optional rate) assertions; returns failure strings."""
    failures = []
    for name in ("sol_err", "grad_corr_err", "flux_corr_err", "dtime_corr_err"):
        if not report.monotone.get(name):
            failures.append(f"{name} is not strictly decreasing in eps "
                            "(homogenization/corrector convergence check)")
    if len(report.sol_err) == len(report.eps_list) >= 3:
        if report.sol_err[-1] > 0 and report.sol_err[0] / report.sol_err[-1] < 2.0:
            failures.append("solution error decreased by less than a factor 2 "
                            "from the coarsest to the finest eps")
    if strict_rates:
        for name in ("sol_err", "grad_corr_err", "flux_corr_err", "dtime_corr_err"):
            rate = report.rates.get(name)
            if rate is None or rate < 0.5:
                failures.append(f"{name}: fitted rate {rate} < 0.5 (strict mode)")
    fixdir = os.environ.get("OSCIDIFF_FIXTURES")
    if fixdir:
        fix = _find_fixture(fixdir, report)
        if fix is not None:
            floor = 0.5 * fix["grad_plain_err"][-1]
            if any(v < floor for v in report.grad_plain_err):
                failures.append(
                    f"plain gradient error fell below the fixture floor {floor:.3e} "
                    "(it should stagnate while the corrector-augmented error decays)")
    return failures


def _find_fixture(fixdir, report):
    name = f"study_p{report.p:g}_r{report.r:g}.json".replace("/", "_")
    path = os.path.join(fixdir, name)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return json.load(fh)


def cmd_converge(cfg: ExperimentConfig, out_dir, as_json=False,
                 strict_rates=False, **_kw):
    _echo_config(cfg, out_dir)
    report = hz.run_convergence_study(cfg.field, cfg.p, cfg.r, cfg.eps_list,
                                      data=cfg.data(), cell_grid=cfg.cell_grid)
    hz.write_report(report, out_dir, stem="converge", json_mirror=as_json)
    with open(os.path.join(out_dir, "plot.gp"), "w") as fh:
        fh.write(_PLOT_SCRIPT)
    sys.stdout.write(report.to_csv())
    if report.partial:
        print(f"partial report: {report.cause}", file=sys.stderr)
        return EXIT_SOLVER
    failures = _converge_checks(report, strict_rates)
    for msg in failures:
        print(f"FAIL: {msg}", file=sys.stderr)
    return EXIT_ASSERT if failures else EXIT_OK


def cmd_corrector(cfg: ExperimentConfig, out_dir, as_json=False, **_kw):
    """Corrector-error table; recomputes cells and trajectories."""
    _echo_config(cfg, out_dir)
    report = hz.run_convergence_study(cfg.field, cfg.p, cfg.r, cfg.eps_list,
                                      data=cfg.data(), cell_grid=cfg.cell_grid)
    rows = []
    for i, eps in enumerate(report.eps_list[:len(report.grad_corr_err)]):
        rows.append([f"{eps:g}", f"{report.grad_corr_err[i]:.6e}",
                     f"{report.flux_corr_err[i]:.6e}",
                     f"{report.dtime_corr_err[i]:.6e}",
                     f"{report.grad_plain_err[i]:.6e}"])
    print(_table(rows, ["eps", "grad corr", "flux corr", "dtime corr",
                        "grad plain"]))
    hz.write_report(report, out_dir, stem="corrector", json_mirror=as_json)
    if report.partial:
        print(f"partial report: {report.cause}", file=sys.stderr)
        return EXIT_SOLVER
    failures = _converge_checks(report)
    for msg in failures:
        print(f"FAIL: {msg}", file=sys.stderr)
    return EXIT_ASSERT if failures else EXIT_OK


def cmd_audit(cfg: ExperimentConfig, out_dir, as_json=False, **_kw):
    """Uniform-estimate audit plus the initial-datum contraction check."""
    _echo_config(cfg, out_dir)
    trajs = []
    for eps in cfg.eps_list:
        prob = pde.MicroProblem(field=cfg.field, eps=eps, r=cfg.r, p=cfg.p,
                                f=cfg.f, u0=cfg.u0, grid=cfg.macro_grid)
        trajs.append(pde.solve_micro(prob))
    audit = hz.audit_uniform_estimates(
        trajs, cfg.p, data={"lam": cfg.field.lam, "f": cfg.f})
    rows = [[it["bound"], f"{it['lhs']:.6e}", f"{it['rhs']:.6e}",
             "pass" if it["passed"] else "FAIL"] for it in audit["items"]]
    print(_table(rows, ["bound", "lhs", "rhs", "status"]))

    # contraction in H^-1 between two initial data, largest eps
    eps = cfg.eps_list[0]
    u0_b = lambda x: 0.5 * cfg.u0(x)
    prob_b = pde.MicroProblem(field=cfg.field, eps=eps, r=cfg.r, p=cfg.p,
                              f=cfg.f, u0=u0_b, grid=cfg.macro_grid)
    traj_b = pde.solve_micro(prob_b)
    traj_a = trajs[0]
    C_T = pde.contraction_constant(cfg.field, eps, cfg.r, cfg.macro_grid.T)
    d0 = pde.hminus1_norm(traj_a.u_values()[0] - traj_b.u_values()[0],
                          cfg.macro_grid) ** 2
    dmax = max(pde.hminus1_norm(ua - ub, cfg.macro_grid) ** 2
               for ua, ub in zip(traj_a.u_values(), traj_b.u_values()))
    contraction_ok = dmax <= 1.05 * C_T * d0
    print(f"contraction: sup ||u1-u2||_{{H^-1}}^2 = {dmax:.6e} <= "
          f"1.05 * C_T * initial = {1.05 * C_T * d0:.6e}: "
          f"{'pass' if contraction_ok else 'FAIL'}")
    if as_json:
        _dump_json(out_dir, "audit_summary.json",
                   {"uniform": audit, "contraction": {
                       "C_T": C_T, "initial": d0, "sup": dmax,
                       "passed": bool(contraction_ok)}})
    ok = audit["passed"] and contraction_ok
    if not ok:
        print("FAIL: a data-only a priori bound was violated beyond its slack",
              file=sys.stderr)
    return EXIT_OK if ok else EXIT_ASSERT


def _dump_json(out_dir, name, doc):
    with open(os.path.join(out_dir, name), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


COMMANDS = {
    "cell": cmd_cell,
    "ahom": cmd_ahom,
    "micro": cmd_micro,
    "homog": cmd_homog,
    "converge": cmd_converge,
    "corrector": cmd_corrector,
    "audit": cmd_audit,
}


def build_parser():
    ap = argparse.ArgumentParser(
        prog="oscidiff",
        description="Homogenization toolkit for nonlinear diffusion with "
                    "space-time oscillating coefficients.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--json", action="store_true", help="mirror tables as JSON")
    ap.add_argument("--jobs", type=int, default=1,
                    help="worker count for parallelizable stages")
    ap.add_argument("--strict-rates", action="store_true",
                    help="additionally assert fitted decay rates >= 0.5")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args.out, as_json=args.json,
                                      jobs=args.jobs,
                                      strict_rates=args.strict_rates)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OscidiffError as err:
        print(f"solver error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
