"""Cell-problem solvers on the discrete periodic unit cell.

Four problems are covered, all driven by a unit direction e_k:

* classical:      -div_y(a(y) [grad Phi + e_k]) = 0
* subcritical:    the same, slice by slice in the fast time s
* supercritical:  the same, with a replaced by its s-average
* critical:       mu d_s Phi = div_y(a(y,s) [grad Phi + e_k]), s-periodic
                  (fast-diffusion form), and the porous-medium variant
                  d_s Psi = div_y(a [kappa grad Psi + e_k]) with
                  Phi = kappa Psi.

Spatial discretization is a conservative flux form on the periodic cell
grid: diagonal coefficients live on faces (averaged from the two
adjacent cell values per the grid's face convention), off-diagonal
couplings use centered differences,
which keeps the discrete operator symmetric. The elliptic solves use
conjugate gradients with an explicit zero-mean projection every
iteration; the parabolic problems march an implicit-Euler period map to
its fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, PeriodicityNotReached, RegimeMismatch, SolverDiverged
from .fields import CellGrid, PeriodicMatrixField

SOLVER_TOL = 1e-10
PERIODIC_TOL = 1e-10
MAX_SWEEPS = 500

REGIMES = ("classical", "subcritical", "critical_fde", "critical_pme", "supercritical")


@dataclass(frozen=True)
class CellParameter:
    """Macroscopic data entering the critical cell problems.

    The fast-diffusion capacity coefficient is mu = (1/p) |u0|^(1-p)
    (requires 0 < p < 1) and the porous-medium diffusivity scale is
    kappa = p |u0|^(p-1) (requires 1 < p < 2).
    """

    p: float
    u0abs: float

    def __post_init__(self):
        if self.u0abs < 0:
            raise ConfigError("u0abs must be nonnegative")
        if not (0 < self.p < 2) or self.p == 1:
            raise ConfigError("critical regimes need p in (0,2) with p != 1")

    @property
    def mu_fde(self):
        if not self.p < 1:
            raise ConfigError("mu_fde only defined for 0 < p < 1")
        if self.u0abs == 0.0:
            return 0.0
        return (1.0 / self.p) * self.u0abs ** (1.0 - self.p)

    @property
    def kappa_pme(self):
        if not self.p > 1:
            raise ConfigError("kappa_pme only defined for 1 < p < 2")
        return self.p * self.u0abs ** (self.p - 1.0)


@dataclass(frozen=True)
class CellSolution:
    """Discrete corrector for one direction e_k.

    ``phi`` has shape (n_slices, M_y**dim). For the slice-elliptic regimes
    the slices sit at s = j/M_s, j = 0..M_s-1 (a single slice for the
    s-independent regimes); for the critical regimes they sit at
    s = j/M_s, j = 0..M_s, with phi[0] and phi[-1] matching to within
    ``periodic_defect``.
    """

    regime: str
    dim: int
    grid: CellGrid
    k: int
    phi: np.ndarray
    s_nodes: np.ndarray
    residual: float
    periodic_defect: float = 0.0
    psi: Optional[np.ndarray] = None
    param: Optional[CellParameter] = None

    @property
    def n_cells(self):
        return self.grid.M_y ** self.dim

    def mean_defect(self):
        """Largest cell-average magnitude over slices (should be ~0)."""
        return float(np.max(np.abs(self.phi.mean(axis=1))))

    def grad_y(self):
        """Cell-centered gradients, shape (n_slices, n_cells, dim)."""
        return np.stack(
            [_centered_diff(self.phi, self.dim, self.grid.M_y, d) for d in range(self.dim)],
            axis=-1,
        )

    def interpolators(self):
        """(phi_eval, grad_eval): periodic bilinear interpolants in (y, s).

        phi_eval(y, s) -> values; grad_eval(y, s) -> shape (..., dim).
        """
        phi_itp = _PeriodicInterpolant(self.phi, self.s_nodes, self.dim, self.grid.M_y,
                                       s_periodic=self.regime not in ("critical_fde", "critical_pme"))
        g = self.grad_y()
        grad_itps = [
            _PeriodicInterpolant(g[..., d], self.s_nodes, self.dim, self.grid.M_y,
                                 s_periodic=self.regime not in ("critical_fde", "critical_pme"))
            for d in range(self.dim)
        ]

        def grad_eval(y, s):
            return np.stack([itp(y, s) for itp in grad_itps], axis=-1)

        return phi_itp, grad_eval


class _PeriodicInterpolant:
    """Multilinear interpolation of slice data, periodic in y (always) and
    in s (period-1 wrap; the critical layout already carries both ends)."""

    def __init__(self, values, s_nodes, dim, M_y, s_periodic):
        self.dim = dim
        self.M_y = M_y
        shape = (len(s_nodes),) + (M_y,) * dim
        self.vals = np.asarray(values).reshape(shape)
        self.s_nodes = np.asarray(s_nodes)
        self.s_periodic = s_periodic

    def __call__(self, y, s):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        s = np.broadcast_to(np.asarray(s, dtype=float), y.shape[:-1])
        M = self.M_y
        # cell-centered nodes at (i + 1/2)/M
        yy = np.mod(y, 1.0) * M - 0.5
        i0 = np.floor(yy).astype(int)
        fy = yy - i0
        i0 = np.mod(i0, M)
        ns = len(self.s_nodes)
        if ns == 1:
            j0 = np.zeros(s.shape, dtype=int)
            j1 = j0
            fs = np.zeros(s.shape)
        else:
            ss = np.mod(s, 1.0)
            if self.s_periodic:
                hs = self.s_nodes[1] - self.s_nodes[0]
                jj = ss / hs
                j0 = np.floor(jj).astype(int) % ns
                fs = jj - np.floor(jj)
                j1 = (j0 + 1) % ns
            else:
                hs = self.s_nodes[1] - self.s_nodes[0]
                jj = np.clip(ss / hs, 0.0, ns - 1.0 - 1e-12)
                j0 = np.floor(jj).astype(int)
                fs = jj - j0
                j1 = j0 + 1
        out = np.zeros(y.shape[:-1])
        corners = [(0,), (1,)] if self.dim == 1 else [(0, 0), (0, 1), (1, 0), (1, 1)]
        for corner in corners:
            w = np.ones(y.shape[:-1])
            idx = []
            for d, c in enumerate(corner):
                w = w * (fy[..., d] if c else 1.0 - fy[..., d])
                idx.append((i0[..., d] + c) % M)
            out += w * (1.0 - fs) * self.vals[(j0,) + tuple(idx)]
            out += w * fs * self.vals[(j1,) + tuple(idx)]
        return out


# ---------------------------------------------------------------------------
# Discrete operators


def _centered_diff(vals, dim, M, d):
    """Centered difference along grid direction d of flattened cell data."""
    shape = vals.shape[:-1] + (M,) * dim
    v = vals.reshape(shape)
    ax = len(vals.shape) - 1 + d
    out = (np.roll(v, -1, axis=ax) - np.roll(v, 1, axis=ax)) * (0.5 * M)
    return out.reshape(vals.shape)


def _face_difference_matrix(dim, M, d):
    """Sparse D_d: cell values -> face differences / h along direction d.

    Face f(i) separates cell i from cell i + e_d (periodic wrap)."""
    n = M**dim
    idx = np.arange(n).reshape((M,) * dim)
    nb = np.roll(idx, -1, axis=d)
    rows = np.arange(n)
    data = np.concatenate([np.full(n, -M, dtype=float), np.full(n, M, dtype=float)])
    cols = np.concatenate([idx.ravel(), nb.ravel()])
    return sp.csr_matrix((data, (np.concatenate([rows, rows]), cols)), shape=(n, n))


def _centered_matrix(dim, M, d):
    """Sparse centered difference G_d (antisymmetric on the periodic grid)."""
    n = M**dim
    idx = np.arange(n).reshape((M,) * dim)
    up = np.roll(idx, -1, axis=d)
    dn = np.roll(idx, 1, axis=d)
    rows = np.arange(n)
    data = np.concatenate([np.full(n, 0.5 * M), np.full(n, -0.5 * M)])
    cols = np.concatenate([up.ravel(), dn.ravel()])
    return sp.csr_matrix((data, (np.concatenate([rows, rows]), cols)), shape=(n, n))


class CellOperator:
    """Discrete -div_y(a grad .) on the periodic cell for one time slice.

    Exposes the stiffness matrix K, the drive vectors b_k = div_y(a e_k)
    (so the cell problem reads K phi = b_k), and the constant part of the
    energy pairing B(y_j, y_k) used for tensor assembly.
    """

    def __init__(self, field: PeriodicMatrixField, grid: CellGrid, s: float):
        dim, M = field.dim, grid.M_y
        self.dim, self.M = dim, M
        self.n = M**dim
        centers = grid.centers(dim)
        a = field.sample(centers, np.full(self.n, float(s)))
        self._build(a, dim, M, grid)

    @classmethod
    def from_matrix_values(cls, a, dim, grid: CellGrid):
        """Build from precomputed cell-center matrices a, shape (n, dim, dim)."""
        self = cls.__new__(cls)
        self.dim, self.M = dim, grid.M_y
        self.n = grid.M_y**dim
        self._build(np.asarray(a), dim, grid.M_y, grid)
        return self

    def _build(self, a, dim, M, grid):
        n = self.n
        K = sp.csr_matrix((n, n))
        self.face_coeffs = []
        self.cell_offdiag = None
        mode = getattr(grid, "face_avg", "geometric")
        for d in range(dim):
            add = a[:, d, d].reshape((M,) * dim)
            nbr = np.roll(add, -1, axis=d)
            if mode == "geometric":
                af = np.sqrt(add * nbr)
            elif mode == "harmonic":
                af = 2.0 * add * nbr / (add + nbr)
            else:
                af = 0.5 * (add + nbr)
            self.face_coeffs.append(af.ravel())
            D = _face_difference_matrix(dim, M, d)
            K = K + D.T @ sp.diags(af.ravel()) @ D
        if dim == 2 and np.max(np.abs(a[:, 0, 1])) > 0:
            a12 = a[:, 0, 1]
            self.cell_offdiag = a12
            G0 = _centered_matrix(dim, M, 0)
            G1 = _centered_matrix(dim, M, 1)
            A12 = sp.diags(a12)
            K = K + G0.T @ A12 @ G1 + G1.T @ A12 @ G0
            self._G = (G0, G1)
        self.K = K.tocsr()
        # b_k = div_y(a e_k): apply the flux form to the affine slope e_k
        self.b = []
        for k in range(dim):
            Dk = _face_difference_matrix(dim, M, k)
            bk = -(Dk.T @ self.face_coeffs[k])
            if self.cell_offdiag is not None:
                other = 1 - k
                bk = bk - self._G[other].T @ self.cell_offdiag
            self.b.append(bk)
        # constant energy pairings B(y_j, y_k)
        self.pair_const = np.zeros((dim, dim))
        for d in range(dim):
            self.pair_const[d, d] = np.mean(self.face_coeffs[d])
        if self.cell_offdiag is not None:
            m12 = float(np.mean(self.cell_offdiag))
            self.pair_const[0, 1] = m12
            self.pair_const[1, 0] = m12

    def flux_pairing(self, j, phi):
        """Discrete integral of a (grad phi + e_k) . e_j given K phi = b_k,
        namely B(y_j, y_k + phi) = pair_const[j,k] - <b_j, phi> h^N."""
        hN = 1.0 / self.n
        return -hN * float(self.b[j] @ phi)

    def gradient_gram(self, phis):
        """Gram matrix of face-difference gradients: G[j,k] = q(phi_j, phi_k),
        the identity-coefficient energy, used for the ellipticity sandwich."""
        m = len(phis)
        dim, M = self.dim, self.M
        Ds = [_face_difference_matrix(dim, M, d) for d in range(dim)]
        hN = 1.0 / self.n
        out = np.zeros((m, m))
        dphis = [[D @ p for D in Ds] for p in phis]
        for i in range(m):
            for j in range(i, m):
                v = hN * sum(float(dphis[i][d] @ dphis[j][d]) for d in range(dim))
                out[i, j] = out[j, i] = v
        return out


def _project_mean(x):
    x -= x.mean()
    return x


def projected_cg(K, b, tol=SOLVER_TOL, x0=None, max_iter=None):
    """CG for the singular periodic operator, re-projecting onto zero mean
    after every iteration. Returns (x, relative residual)."""
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0.0
    x = np.zeros(n) if x0 is None else _project_mean(x0.copy())
    r = b - K @ x
    _project_mean(r)
    p = r.copy()
    rs = r @ r
    for _ in range(max_iter):
        if np.sqrt(rs) <= tol * bnorm:
            return _project_mean(x), np.sqrt(rs) / bnorm
        Kp = K @ p
        alpha = rs / (p @ Kp)
        x += alpha * p
        r -= alpha * Kp
        _project_mean(x)
        _project_mean(r)
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise SolverDiverged(
        f"CG exceeded {max_iter} iterations (relative residual {np.sqrt(rs) / bnorm:.3e})",
        residual=float(np.sqrt(rs) / bnorm),
    )


# ---------------------------------------------------------------------------
# Regime solvers


def _check_k(field, k):
    if not 1 <= k <= field.dim:
        raise ConfigError(f"direction k={k} out of range for dim={field.dim}")


def solve_classical_cell(field: PeriodicMatrixField, grid: CellGrid, k: int,
                         solver_tol: float = SOLVER_TOL) -> CellSolution:
    """Elliptic cell problem for an s-independent coefficient field."""
    _check_k(field, k)
    if not field.s_independent:
        raise ConfigError("classical cell problem requires an s-independent field")
    op = CellOperator(field, grid, s=0.0)
    phi, res = projected_cg(op.K, op.b[k - 1], tol=solver_tol)
    return CellSolution(
        regime="classical", dim=field.dim, grid=grid, k=k,
        phi=phi[np.newaxis, :], s_nodes=np.array([0.0]), residual=res,
    )


def solve_subcritical_cell(field: PeriodicMatrixField, grid: CellGrid, k: int,
                           solver_tol: float = SOLVER_TOL) -> CellSolution:
    """Per-slice elliptic cell problem Phi_k(y, s), slices at s = j/M_s."""
    _check_k(field, k)
    s_nodes = grid.slice_times()
    phis = []
    worst = 0.0
    for j, sj in enumerate(s_nodes):
        op = CellOperator(field, grid, s=sj)
        try:
            phi, res = projected_cg(op.K, op.b[k - 1], tol=solver_tol)
        except SolverDiverged as err:
            raise SolverDiverged(f"slice {j} (s={sj:.4f}): {err}", residual=err.residual) from err
        phis.append(phi)
        worst = max(worst, res)
    return CellSolution(
        regime="subcritical", dim=field.dim, grid=grid, k=k,
        phi=np.array(phis), s_nodes=s_nodes, residual=worst,
    )


def s_averaged_operator(field: PeriodicMatrixField, grid: CellGrid) -> CellOperator:
    """Operator built from the slice-average of a (rectangle rule in s,
    spectrally accurate for smooth periodic fields)."""
    centers = grid.centers(field.dim)
    acc = np.zeros((len(centers), field.dim, field.dim))
    for sj in grid.slice_times():
        acc += field.sample(centers, np.full(len(centers), sj))
    acc /= grid.M_s
    return CellOperator.from_matrix_values(acc, field.dim, grid)


def solve_supercritical_cell(field: PeriodicMatrixField, grid: CellGrid, k: int,
                             solver_tol: float = SOLVER_TOL) -> CellSolution:
    """Elliptic cell problem for the s-averaged coefficient."""
    _check_k(field, k)
    op = s_averaged_operator(field, grid)
    phi, res = projected_cg(op.K, op.b[k - 1], tol=solver_tol)
    return CellSolution(
        regime="supercritical", dim=field.dim, grid=grid, k=k,
        phi=phi[np.newaxis, :], s_nodes=np.array([0.0]), residual=res,
    )


def _march_periodic(ops, rhs, capacity, h_s, n_cells,
                    periodic_tol=PERIODIC_TOL, max_sweeps=MAX_SWEEPS):
    """Implicit-Euler period map iterated to its fixed point.

    ops[j], rhs[j] (j = 0..M_s-1) describe the step towards slice j+1:
    (capacity/h_s) (phi^{j+1} - phi^j) + K^{j+1} phi^{j+1} = b^{j+1}.
    Returns (trajectory of shape (M_s+1, n), periodic defect)."""
    M_s = len(ops)
    lus = [spla.splu((sp.eye(n_cells) * (capacity / h_s) + op.K).tocsc()) for op in ops]
    hN_sqrt = np.sqrt(1.0 / n_cells)
    phi0 = np.zeros(n_cells)
    traj = np.empty((M_s + 1, n_cells))
    defect = np.inf
    for _ in range(max_sweeps):
        traj[0] = phi0
        cur = phi0
        for j in range(M_s):
            cur = lus[j].solve((capacity / h_s) * cur + rhs[j])
            traj[j + 1] = cur
        defect = float(np.linalg.norm(traj[-1] - traj[0]) * hN_sqrt)
        if defect <= periodic_tol:
            for row in traj:
                _project_mean(row)
            return traj, defect
        phi0 = _project_mean(traj[-1].copy())
    raise PeriodicityNotReached(
        f"period map not converged after {max_sweeps} sweeps (defect {defect:.3e})",
        defect=defect,
    )


def _slice_operators(field, grid):
    """Operators and drives at the step targets s = (j+1)/M_s, wrapped."""
    M_s = grid.M_s
    ops = []
    for j in range(M_s):
        sj = ((j + 1) % M_s) * grid.h_s
        ops.append(CellOperator(field, grid, s=sj))
    return ops


def solve_critical_cell_fde(field: PeriodicMatrixField, grid: CellGrid,
                            param: CellParameter, k: int,
                            periodic_tol: float = PERIODIC_TOL,
                            max_sweeps: int = MAX_SWEEPS) -> CellSolution:
    """Time-periodic parabolic cell problem, fast-diffusion form.

    mu d_s Phi = div_y(a [grad Phi + e_k]) with mu = (1/p)|u0|^(1-p);
    at u0 = 0 the problem degenerates to the slice-elliptic one."""
    _check_k(field, k)
    if not param.p < 1:
        raise ConfigError("FDE critical cell problem requires 0 < p < 1")
    mu = param.mu_fde
    if mu == 0.0:
        sub = solve_subcritical_cell(field, grid, k)
        return CellSolution(
            regime="critical_fde", dim=field.dim, grid=grid, k=k,
            phi=sub.phi, s_nodes=sub.s_nodes, residual=sub.residual, param=param,
        )
    ops = _slice_operators(field, grid)
    rhs = [op.b[k - 1] for op in ops]
    traj, defect = _march_periodic(ops, rhs, mu, grid.h_s, grid.M_y**field.dim,
                                   periodic_tol, max_sweeps)
    return CellSolution(
        regime="critical_fde", dim=field.dim, grid=grid, k=k,
        phi=traj, s_nodes=np.arange(grid.M_s + 1) * grid.h_s,
        residual=0.0, periodic_defect=defect, param=param,
    )


def solve_critical_cell_pme(field: PeriodicMatrixField, grid: CellGrid,
                            param: CellParameter, k: int,
                            periodic_tol: float = PERIODIC_TOL,
                            max_sweeps: int = MAX_SWEEPS) -> CellSolution:
    """Time-periodic parabolic cell problem, porous-medium form.

    d_s Psi = div_y(a [kappa grad Psi + e_k]) with kappa = p|u0|^(p-1)
    and Phi = kappa Psi; at u0 = 0 the corrector vanishes identically."""
    _check_k(field, k)
    if not param.p > 1:
        raise ConfigError("PME critical cell problem requires 1 < p < 2")
    kappa = param.kappa_pme
    n = grid.M_y**field.dim
    s_nodes = np.arange(grid.M_s + 1) * grid.h_s
    if param.u0abs == 0.0:
        zeros = np.zeros((grid.M_s + 1, n))
        return CellSolution(
            regime="critical_pme", dim=field.dim, grid=grid, k=k,
            phi=zeros, s_nodes=s_nodes, residual=0.0, psi=zeros, param=param,
        )
    ops = _slice_operators(field, grid)
    scaled = []
    for op in ops:
        sc = CellOperator.__new__(CellOperator)
        sc.dim, sc.M, sc.n = op.dim, op.M, op.n
        sc.K = (kappa * op.K).tocsr()
        scaled.append(sc)
    rhs = [op.b[k - 1] for op in ops]
    traj, defect = _march_periodic(scaled, rhs, 1.0, grid.h_s, n,
                                   periodic_tol, max_sweeps)
    return CellSolution(
        regime="critical_pme", dim=field.dim, grid=grid, k=k,
        phi=kappa * traj, s_nodes=s_nodes,
        residual=0.0, periodic_defect=defect, psi=traj, param=param,
    )


def solve_cells(field, grid, regime, param=None, k_list=None, **kw):
    """Solve the cell problem for every direction; returns a list per k."""
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    ks = k_list if k_list is not None else range(1, field.dim + 1)
    solver = {
        "classical": solve_classical_cell,
        "subcritical": solve_subcritical_cell,
        "supercritical": solve_supercritical_cell,
    }.get(regime)
    if solver is not None:
        return [solver(field, grid, k, **kw) for k in ks]
    if param is None:
        raise ConfigError("critical regimes need a CellParameter")
    solver = solve_critical_cell_fde if regime == "critical_fde" else solve_critical_cell_pme
    return [solver(field, grid, param, k, **kw) for k in ks]


# ---------------------------------------------------------------------------
# Corrector field


class CorrectorField:
    """Evaluator for z(x, t, y, s) = sum_k d_{x_k} v0(x,t) Phi_k(y, s).

    Macroscopic samples are looked up by nearest grid node; the fast
    variables interpolate bilinearly (periodically) on the cell grid.
    """

    def __init__(self, cells, grad_v0, macro_grid):
        dim = cells[0].dim
        if len(cells) != dim:
            raise RegimeMismatch(f"need {dim} cell solutions, got {len(cells)}")
        if any(c.regime != cells[0].regime for c in cells):
            raise RegimeMismatch("cell solutions mix regimes")
        grad_v0 = np.asarray(grad_v0)
        if grad_v0.shape[-1] != dim:
            raise RegimeMismatch(
                f"grad_v0 last axis {grad_v0.shape[-1]} != dim {dim}")
        self.dim = dim
        self.grid = macro_grid
        self.grad_v0 = grad_v0  # (n_t+1, n_x**dim, dim)
        self._phi = []
        self._grad = []
        for c in cells:
            p, g = c.interpolators()
            self._phi.append(p)
            self._grad.append(g)

    def _macro_index(self, x, t):
        g = self.grid
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            x = x[..., np.newaxis]
        ix = np.clip(np.rint(x / g.h - 1).astype(int), 0, g.n_x - 1)
        it = np.clip(np.rint(np.asarray(t) / g.dt).astype(int), 0, g.n_t)
        if self.dim == 1:
            flat = ix[..., 0]
        else:
            flat = ix[..., 0] * g.n_x + ix[..., 1]
        return it, flat

    def __call__(self, x, t, y, s):
        it, flat = self._macro_index(x, t)
        coeff = self.grad_v0[it, flat]  # (..., dim)
        out = 0.0
        for k in range(self.dim):
            out = out + coeff[..., k] * self._phi[k](y, s)
        return out

    def grad_y(self, x, t, y, s):
        it, flat = self._macro_index(x, t)
        coeff = self.grad_v0[it, flat]
        out = 0.0
        for k in range(self.dim):
            out = out + coeff[..., k, np.newaxis] * self._grad[k](y, s)
        return out


def assemble_corrector_z(cells, grad_v0, macro_grid) -> CorrectorField:
    """Build the two-scale corrector evaluator from per-direction cell
    solutions and the macroscopic gradient samples."""
    return CorrectorField(cells, grad_v0, macro_grid)


# ---------------------------------------------------------------------------
# Serialization ("oscidiff-cell v1")

CELL_MAGIC = "oscidiff-cell v1"


def save_cell(path, sol: CellSolution):
    """Write a cell solution as a self-describing text file."""
    p = sol.param.p if sol.param is not None else float("nan")
    u0 = sol.param.u0abs if sol.param is not None else float("nan")
    with open(path, "w") as fh:
        fh.write(
            f"{CELL_MAGIC} regime={sol.regime} N={sol.dim} k={sol.k} "
            f"My={sol.grid.M_y} Ms={sol.grid.M_s} nslices={sol.phi.shape[0]} "
            f"p={p:.17g} u0abs={u0:.17g} residual={sol.residual:.17g} "
            f"defect={sol.periodic_defect:.17g} psi={int(sol.psi is not None)} "
            f"faceavg={sol.grid.face_avg}\n"
        )
        np.savetxt(fh, sol.phi, fmt="%.17g")
        if sol.psi is not None:
            np.savetxt(fh, sol.psi, fmt="%.17g")


def load_cell(path) -> CellSolution:
    with open(path) as fh:
        header = fh.readline().split()
        if " ".join(header[:2]) != CELL_MAGIC:
            raise ConfigError(f"{path}: bad magic {' '.join(header[:2])!r}")
        meta = dict(kv.split("=") for kv in header[2:])
        raw = np.loadtxt(fh, ndmin=2)
    dim, k = int(meta["N"]), int(meta["k"])
    grid = CellGrid(int(meta["My"]), int(meta["Ms"]), face_avg=meta.get("faceavg", "geometric"))
    n_slices = int(meta["nslices"])
    regime = meta["regime"]
    has_psi = bool(int(meta["psi"]))
    n = grid.M_y**dim
    want = n_slices * (2 if has_psi else 1)
    if raw.shape != (want, n):
        raise ConfigError(f"{path}: expected {want} rows x {n} cols, got {raw.shape}")
    phi = raw[:n_slices]
    psi = raw[n_slices:] if has_psi else None
    p, u0 = float(meta["p"]), float(meta["u0abs"])
    param = None if np.isnan(p) else CellParameter(p=p, u0abs=u0)
    if regime in ("critical_fde", "critical_pme") and n_slices == grid.M_s + 1:
        s_nodes = np.arange(grid.M_s + 1) * grid.h_s
    elif n_slices == 1:
        s_nodes = np.array([0.0])
    else:
        s_nodes = np.arange(n_slices) / n_slices
    return CellSolution(
        regime=regime, dim=dim, grid=grid, k=k, phi=phi, s_nodes=s_nodes,
        residual=float(meta["residual"]), periodic_defect=float(meta["defect"]),
        psi=psi, param=param,
    )
