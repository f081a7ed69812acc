#!/usr/bin/env python3
"""Generate the reference fixtures used by the test suite.

Each fixture is a doubled-resolution convergence study for one (p, r)
pair of the default 1D battery. The committed JSON records the full
error curves, the per-eps sup-in-t L^{p+1} norms, and the floor used by
the non-convergence checks (half the finest-eps plain gradient error).
Run from the repository root:

    python3 scripts/make_fixtures.py [outdir]

The suite reads the directory from OSCIDIFF_FIXTURES, defaulting to
tests/fixtures.
"""

import json
import os
import sys
import time

import numpy as np

from oscidiff import harness as hz, pdesolve as pde
from oscidiff.fields import CellGrid, MacroGrid, make_field

STUDIES = [(0.5, 1.0), (1.5, 1.0), (0.5, 2.0), (1.5, 2.0), (0.5, 3.0)]
EPS_LIST = [1 / 8, 1 / 16, 1 / 32]

# doubled resolution relative to the default study configuration
N_X, N_T, M_Y, M_S, T = 512, 64, 128, 128, 0.25


def sup_norms(field, p, r, eps_list):
    """Per-eps sup-in-t L^{p+1} norms of u_eps at fixture resolution."""
    grid = MacroGrid(dim=1, n_x=N_X, n_t=N_T, T=T)
    u0 = lambda x: np.sin(np.pi * x[:, 0])
    f = lambda x, t: np.ones(len(x))
    out = []
    for eps in eps_list:
        prob = pde.MicroProblem(field=field, eps=eps, r=r, p=p, f=f, u0=u0,
                                grid=grid)
        traj = pde.solve_micro(prob)
        out.append(max(pde.lp_norm(un, grid, p + 1.0)
                       for un in traj.u_values()))
    return out


def main(outdir):
    os.makedirs(outdir, exist_ok=True)
    field = make_field("trig1d_st")
    cell_grid = CellGrid(M_y=M_Y, M_s=M_S)
    data = {"u0": lambda x: np.sin(np.pi * x[:, 0]),
            "f": lambda x, t: np.ones(len(x)),
            "n_x": N_X, "n_t": N_T, "T": T}
    for p, r in STUDIES:
        t0 = time.time()
        report = hz.run_convergence_study(field, p, r, EPS_LIST, data=data,
                                          cell_grid=cell_grid)
        if report.partial:
            raise SystemExit(f"fixture study (p={p}, r={r}) failed: "
                             f"{report.cause}")
        doc = json.loads(report.to_json())
        doc["resolution"] = {"n_x": N_X, "n_t": N_T, "M_y": M_Y, "M_s": M_S,
                             "T": T}
        doc["grad_plain_floor"] = 0.5 * report.grad_plain_err[-1]
        doc["sup_lp1_norms"] = sup_norms(field, p, r, EPS_LIST)
        name = f"study_p{p:g}_r{r:g}.json"
        with open(os.path.join(outdir, name), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"{name}: {time.time() - t0:.1f}s, "
              f"sol_err {report.sol_err[0]:.3e} -> {report.sol_err[-1]:.3e}, "
              f"floor {doc['grad_plain_floor']:.3e}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures")
