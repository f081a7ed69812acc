"""Convergence studies and estimate audits.

The homogenization theory is qualitative (no rates in eps), so the
harness asserts monotone decrease of the corrector-augmented error
functionals along an eps sequence while the plain gradient and flux
errors stagnate above a positive floor. Fitted log-log rates are
reported for reference; the optional strict mode also asserts them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import cellsolve as cs, effmat as em, pdesolve as pde
from .errors import ConfigError, RegimeMismatch
from .fields import CellGrid, MacroGrid, PeriodicMatrixField

CSV_HEADER = "eps,sol_err,grad_corr_err,flux_corr_err,dtime_corr_err,grad_plain_err,flux_plain_err"


def regime_for(r: float, p: float) -> str:
    if r < 2:
        return "subcritical"
    if r > 2:
        return "supercritical"
    if p == 1:
        raise ConfigError("critical scaling (r = 2) requires p != 1")
    return "critical_fde" if p < 1 else "critical_pme"


def default_data(dim: int = 1):
    """u0 = sin(pi x) (product form in 2D), f = 1, T = 0.25."""
    if dim == 1:
        u0 = lambda x: np.sin(np.pi * x[:, 0])
    else:
        u0 = lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
    return {
        "u0": u0,
        "f": lambda x, t: np.ones(len(x)),
        "n_x": 256 if dim == 1 else 48,
        "n_t": 32,
        "T": 0.25,
    }


@dataclass
class ConvergenceReport:
    eps_list: list
    p: float
    r: float
    sol_err: list = dc_field(default_factory=list)
    grad_corr_err: list = dc_field(default_factory=list)
    flux_corr_err: list = dc_field(default_factory=list)
    dtime_corr_err: list = dc_field(default_factory=list)
    grad_plain_err: list = dc_field(default_factory=list)
    flux_plain_err: list = dc_field(default_factory=list)
    rates: dict = dc_field(default_factory=dict)
    monotone: dict = dc_field(default_factory=dict)
    partial: bool = False
    cause: Optional[str] = None
    config: dict = dc_field(default_factory=dict)

    _CURVES = ("sol_err", "grad_corr_err", "flux_corr_err", "dtime_corr_err",
               "grad_plain_err", "flux_plain_err")

    def finalize(self):
        for name in ("sol_err", "grad_corr_err", "flux_corr_err", "dtime_corr_err"):
            vals = getattr(self, name)
            self.monotone[name] = bool(
                len(vals) == len(self.eps_list)
                and all(b < a for a, b in zip(vals, vals[1:])))
            self.rates[name] = fit_rate(self.eps_list, vals)
        return self

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for i, eps in enumerate(self.eps_list):
            row = [f"{eps:.12g}"]
            for name in self._CURVES:
                vals = getattr(self, name)
                row.append(f"{vals[i]:.12g}" if i < len(vals) else "nan")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "eps": list(self.eps_list), "p": self.p, "r": self.r,
            "rates": self.rates, "monotone": self.monotone,
            "partial": self.partial, "cause": self.cause,
            "config": self.config,
            "note": "monotone decrease is the asserted property; the theory "
                    "proves convergence without rates, so fitted rates are "
                    "informational",
        }
        for name in self._CURVES:
            doc[name] = list(getattr(self, name))
        return json.dumps(doc, indent=2, sort_keys=True)


def fit_rate(eps_list, errs):
    """Least-squares slope of log(err) against log(eps)."""
    errs = np.asarray(errs, dtype=float)
    if len(errs) != len(eps_list) or np.any(errs <= 0):
        return None
    x = np.log(np.asarray(eps_list, dtype=float))
    y = np.log(errs)
    slope = np.polyfit(x, y, 1)[0]
    return float(slope)


# ---------------------------------------------------------------------------
# Cell/tensor preparation per regime


def prepare_effective(field: PeriodicMatrixField, p: float, r: float,
                      cell_grid: CellGrid = None, u0abs_grid=None):
    """Cell solutions and effective tensor for the given scaling.

    Returns (tensor, cells_by_key) where cells_by_key maps a |u0| key to
    the per-direction cell solutions (a single key None for the constant
    regimes).
    """
    if cell_grid is None:
        cell_grid = CellGrid(64 if field.dim == 1 else 48, 64)
    regime = regime_for(r, p)
    if regime in ("subcritical", "supercritical"):
        cells = cs.solve_cells(field, cell_grid, regime)
        return em.assemble_ahom(cells, field, cell_grid), {None: cells}
    keys = np.asarray(em.default_u0abs_grid() if u0abs_grid is None else u0abs_grid,
                      dtype=float)
    cells_by_key = {}
    mats, norms, grams = [], [], []
    for u0 in keys:
        cells = cs.solve_cells(field, cell_grid, regime,
                               param=cs.CellParameter(p=p, u0abs=float(u0)))
        t = em.assemble_ahom(cells, field, cell_grid)
        cells_by_key[float(u0)] = cells
        mats.append(t.matrices[0])
        norms.append(t.corrector_norms[0])
        grams.append(t.grad_grams[0])
    tensor = em.EffectiveTensor(
        regime="critical", dim=field.dim, lam=field.lam, Lam=field.Lam,
        matrices=np.array(mats), corrector_norms=np.array(norms),
        grad_grams=np.array(grams), u0abs_keys=keys, p=p,
        provenance={"field": field.name, "M_y": cell_grid.M_y,
                    "M_s": cell_grid.M_s, "branch": regime},
    )
    return tensor, cells_by_key


# ---------------------------------------------------------------------------
# Discrete error functionals (face-based gradients)


def _face_gradient_1d(v, h):
    """Gradients (v_{i+1} - v_i)/h on faces 0..n (zero boundary values)."""
    return np.diff(np.concatenate([[0.0], v, [0.0]])) / h


def _face_values_1d(v):
    ve = np.concatenate([[0.0], v, [0.0]])
    return 0.5 * (ve[:-1] + ve[1:])


def _corrector_grad_at(cells_by_key, u0_faces, grad_v0_faces, y, s):
    """Sum over k of d_k v0 * grad_y Phi_k at the fast point of each face.

    For the critical table the cell solution is picked per face by the
    nearest tabulated |u0|; constant regimes use their single entry."""
    out = np.zeros_like(grad_v0_faces)
    keys = sorted(k for k in cells_by_key if k is not None)
    if not keys:  # constant-regime cells
        cells = cells_by_key[None]
        for k, cell in enumerate(cells):
            _, grad = cell.interpolators()
            out += grad_v0_faces[:, k:k + 1] * grad(y, s)
        return out
    karr = np.asarray(keys)
    logk = np.log1p(karr)
    idx = np.argmin(np.abs(np.log1p(np.abs(u0_faces))[:, None] - logk[None, :]), axis=1)
    for i_key in np.unique(idx):
        sel = idx == i_key
        cells = cells_by_key[float(karr[i_key])]
        for k, cell in enumerate(cells):
            _, grad = cell.interpolators()
            out[sel] += grad_v0_faces[sel, k:k + 1] * grad(y[sel], s[sel])
    return out


def _study_errors(traj_eps, traj_hom, cells_by_key, tensor, field, p, r, eps):
    """All six error functionals for one eps (1D grids)."""
    grid = traj_eps.grid
    if grid.dim != 1:
        raise RegimeMismatch("error functionals are implemented for 1D studies")
    h, dt = grid.h, grid.dt
    xf = pde.face_points_1d(grid)
    n_t = grid.n_t
    sol2 = grad_c2 = flux_c2 = dt2 = grad_p2 = flux_p2 = 0.0
    u_eps = traj_eps.u_values()
    u_hom = traj_hom.u_values()
    hN = h**grid.dim
    for n in range(1, n_t + 1):
        t = n * dt
        v_e, v_0 = traj_eps.values[n], traj_hom.values[n]
        # solution error, L^{p+1}(Omega) per step
        du = u_eps[n] - u_hom[n]
        sol2 += dt * (hN * np.sum(np.abs(du) ** (p + 1.0))) ** (2.0 / (p + 1.0))
        # face gradients and fast-variable samples
        g_e = _face_gradient_1d(v_e, h)[:, None]
        g_0 = _face_gradient_1d(v_0, h)[:, None]
        y = np.mod(xf / eps, 1.0)
        s = np.mod(t / eps**r, 1.0)
        u0_faces = np.sign(_face_values_1d(v_0)) * np.abs(_face_values_1d(v_0)) ** (1.0 / p)
        corr = _corrector_grad_at(cells_by_key, u0_faces, g_0, y, np.full(len(xf), s))
        a_eps = field.sample(y, np.full(len(xf), s))[:, 0, 0][:, None]
        ahom_f = tensor.entries_at(np.abs(u0_faces))[:, 0, 0][:, None]
        defect = g_e - g_0 - corr
        grad_c2 += dt * h * float(np.sum(defect**2))
        grad_p2 += dt * h * float(np.sum((g_e - g_0) ** 2))
        j_eps = a_eps * g_e
        j_hom = ahom_f * g_0
        flux_model = a_eps * (g_0 + corr)
        flux_c2 += dt * h * float(np.sum((j_eps - flux_model) ** 2))
        flux_p2 += dt * h * float(np.sum((j_eps - j_hom) ** 2))
        # time-derivative corrector: H^-1 norm of div of the flux defect
        w = np.diff((j_eps - flux_model)[:, 0]) / h
        dt2 += dt * pde.hminus1_norm(w, grid) ** 2
    return {"sol_err": math.sqrt(sol2), "grad_corr_err": grad_c2,
            "flux_corr_err": flux_c2, "dtime_corr_err": dt2,
            "grad_plain_err": grad_p2, "flux_plain_err": flux_p2}


def corrector_error(traj_eps, traj_hom, cells_by_key, field, p, r, eps,
                    tensor=None) -> float:
    """Squared-L2 gradient corrector defect (the quantity whose vanishing
    is the content of the gradient corrector statement)."""
    tensor = _tensor_from(cells_by_key, field, p) if tensor is None else tensor
    return _study_errors(traj_eps, traj_hom, cells_by_key, tensor, field,
                         p, r, eps)["grad_corr_err"]


def flux_corrector_error(traj_eps, traj_hom, cells_by_key, field, p, r, eps,
                         tensor=None) -> float:
    tensor = _tensor_from(cells_by_key, field, p) if tensor is None else tensor
    return _study_errors(traj_eps, traj_hom, cells_by_key, tensor, field,
                         p, r, eps)["flux_corr_err"]


def time_derivative_corrector_error(traj_eps, traj_hom, cells_by_key, field,
                                    p, r, eps, tensor=None) -> float:
    tensor = _tensor_from(cells_by_key, field, p) if tensor is None else tensor
    return _study_errors(traj_eps, traj_hom, cells_by_key, tensor, field,
                         p, r, eps)["dtime_corr_err"]


def _tensor_from(cells_by_key, field, p):
    key = next(iter(cells_by_key))
    cells = cells_by_key[key]
    return em.assemble_ahom(cells, field, cells[0].grid)


# ---------------------------------------------------------------------------
# Studies


def run_convergence_study(field: PeriodicMatrixField, p: float, r: float,
                          eps_list, data=None, cell_grid=None,
                          newton_tol=pde.NEWTON_TOL) -> ConvergenceReport:
    """Solve micro problems along eps and the effective problem once, and
    collect the error functionals. eps_list must be strictly decreasing
    dyadic fractions."""
    eps_list = list(eps_list)
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError("eps list must be strictly decreasing")
    for eps in eps_list:
        if not pde.is_dyadic(eps):
            raise ConfigError(f"eps must be 1/2^m, got {eps}")
    data = {**default_data(field.dim), **(data or {})}
    grid = MacroGrid(dim=field.dim, n_x=data["n_x"], n_t=data["n_t"], T=data["T"])
    regime = regime_for(r, p)
    tensor, cells_by_key = prepare_effective(field, p, r, cell_grid)

    # the effective solve shares the finest micro substep so that the
    # time-discretization bias cancels where the errors are smallest
    finest = pde.MicroProblem(field=field, eps=eps_list[-1], r=r, p=p,
                              f=data["f"], u0=data["u0"], grid=grid)
    mode = "critical_table" if regime.startswith("critical") else "constant"
    hom_prob = pde.HomogenizedProblem(
        tensor=tensor, p=p, f=data["f"], u0=data["u0"], grid=grid,
        mode=mode, substeps=finest.auto_substeps())
    traj_hom = pde.solve_homogenized(hom_prob, newton_tol=newton_tol)

    report = ConvergenceReport(
        eps_list=eps_list, p=p, r=r,
        config={"field": field.name, "field_params": field.params, "p": p,
                "r": r, "eps": eps_list, "regime": regime,
                "n_x": grid.n_x, "n_t": grid.n_t, "T": grid.T},
    )
    for eps in eps_list:
        try:
            prob = pde.MicroProblem(field=field, eps=eps, r=r, p=p,
                                    f=data["f"], u0=data["u0"], grid=grid)
            traj = pde.solve_micro(prob, newton_tol=newton_tol)
            errs = _study_errors(traj, traj_hom, cells_by_key, tensor,
                                 field, p, r, eps)
        except Exception as err:  # partial reports are allowed
            report.partial = True
            report.cause = f"eps={eps}: {err}"
            break
        for name, val in errs.items():
            getattr(report, name).append(val)
    return report.finalize()


# ---------------------------------------------------------------------------
# Uniform-estimate audit


def audit_uniform_estimates(trajs, p: float, data=None, slack: float = 0.10):
    """Check the data-only a priori bounds on every trajectory.

    Both bounds hold at every intermediate time with the integrals taken
    over (0, t), and are checked in that per-step form.
    Energy bound: (1/(p+1)) ||u(t)||_{p+1}^{p+1} + (lam/2) int_0^t ||grad v||^2
    <= (1/(p+1)) ||u0||_{p+1}^{p+1} + (1/(2 lam)) int_0^t ||f||_{H^-1}^2.
    Gradient bound (p < 2): with q = 3-p and nu = 1/(2q),
    (1/q) ||u(t)||_q^q + lam p (2-p) int_0^t ||grad u||^2
    <= nu sup_t ||u||_q^q + C_nu ||f||_{L^1(0,t;L^q)}^q + (1/q) ||u0||_q^q.
    The lam entering both is the field's lower ellipticity constant,
    passed via data["lam"].
    """
    data = dict(data or {})
    if "lam" not in data:
        raise ConfigError("audit needs data['lam'] (lower ellipticity constant)")
    lam = float(data["lam"])
    report = {"items": [], "passed": True}
    for traj in trajs:
        grid = traj.grid
        dt, hN = grid.dt, grid.h**grid.dim
        u = traj.u_values()
        v = traj.values
        f = data.get("f")
        times = grid.times()
        # data-side quantities
        u0 = u[0]
        q = 3.0 - p
        n_t = grid.n_t
        if f is None:
            fH1_cum = fLq_cum = np.zeros(n_t + 1)
        else:
            x = grid.interior_nodes()
            fvals = [np.asarray(f(x, t), dtype=float).ravel() for t in times[1:]]
            fH1_cum = np.concatenate(
                [[0.0], np.cumsum([dt * pde.hminus1_norm(fv, grid) ** 2
                                   for fv in fvals])])
            fLq_cum = np.concatenate(
                [[0.0], np.cumsum([dt * pde.lp_norm(fv, grid, q)
                                   for fv in fvals])])
        # energy bound, checked at every step: for each n,
        # E^n + (lam/2) sum_{m<=n} dt |grad v^m|^2
        #   <= E^0 + (1/(2 lam)) sum_{m<=n} dt ||f^m||_{H^-1}^2
        E = np.array([hN * np.sum(np.abs(u[n]) ** (p + 1.0)) / (p + 1.0)
                      for n in range(n_t + 1)])
        gv2_cum = np.concatenate(
            [[0.0], np.cumsum([dt * pde.grad_sq_integral(v[n], grid)
                               for n in range(1, n_t + 1)])])
        lhs1 = E + 0.5 * lam * gv2_cum
        rhs1 = E[0] + fH1_cum / (2.0 * lam)
        n1 = int(np.argmax(lhs1 - (1.0 + slack) * rhs1))
        ok1 = bool(lhs1[n1] <= (1.0 + slack) * rhs1[n1])
        report["items"].append({"bound": "energy", "lhs": float(lhs1[n1]),
                                "rhs": float(rhs1[n1]), "step": n1,
                                "passed": ok1})
        # gradient bound for u itself, per step, with the nu sup term kept
        # on the right as in the Young step that produces it:
        # (1/q) ||u^n||_q^q + lam p (2-p) sum_{m<=n} dt |grad u^m|^2
        #   <= nu max_m ||u^m||_q^q + C_nu (sum dt ||f||_q)^q + (1/q)||u0||_q^q
        nu = 1.0 / (2.0 * q)
        qp = q / (q - 1.0)  # conjugate of q in the Young step: q' = q/(q-1)
        C_nu = (1.0 / q) * (nu * qp) ** (-q / qp)
        uq = np.array([hN * np.sum(np.abs(u[n]) ** q) for n in range(n_t + 1)])
        gu2_cum = np.concatenate(
            [[0.0], np.cumsum([dt * pde.grad_sq_integral(u[n], grid)
                               for n in range(1, n_t + 1)])])
        lhs2 = uq / q + lam * p * (2.0 - p) * gu2_cum
        rhs2 = nu * np.max(uq) + C_nu * fLq_cum**q + uq[0] / q
        n2 = int(np.argmax(lhs2 - (1.0 + slack) * rhs2))
        ok2 = bool(lhs2[n2] <= (1.0 + slack) * rhs2[n2])
        report["items"].append({"bound": "gradient", "lhs": float(lhs2[n2]),
                                "rhs": float(rhs2[n2]), "step": n2,
                                "passed": ok2})
        report["passed"] = report["passed"] and ok1 and ok2
    return report


# ---------------------------------------------------------------------------
# Output emission


def write_report(report: ConvergenceReport, out_dir, stem="converge",
                 json_mirror=True):
    """Emit CSV, optional JSON mirror, and per-curve two-column .dat files."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(csv_path, "w") as fh:
        fh.write(report.to_csv())
    paths.append(csv_path)
    if json_mirror:
        json_path = os.path.join(out_dir, f"{stem}.json")
        with open(json_path, "w") as fh:
            fh.write(report.to_json() + "\n")
        paths.append(json_path)
    for name in report._CURVES:
        vals = getattr(report, name)
        dat = os.path.join(out_dir, f"{stem}_{name}.dat")
        with open(dat, "w") as fh:
            for eps, v in zip(report.eps_list, vals):
                fh.write(f"{eps:.12g} {v:.12g}\n")
        paths.append(dat)
    return paths
