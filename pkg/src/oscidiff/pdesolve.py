"""Macroscopic PDE solvers.

The microscopic problem d_t u = div(a(x/eps, t/eps^r) grad v) + f with
u = sign(v)|v|^(1/p) is solved in the transformed unknown v = |u|^(p-1)u,
for which the elliptic operator is linear and the Dirichlet condition is
v = 0. Time stepping is backward Euler with the coefficient frozen at the
step target time; each step is a damped Newton solve in v with the
derivative of the inverse transform regularized away from v = 0. The
homogenized problem uses the same machinery with the effective matrix,
which at the critical scaling is looked up from the |u0| table and frozen
per Newton sweep.

Oscillating coefficients are resolved by internal substepping: output is
stored on the coarse step grid while the marching step stays below a
fraction of the fast period eps^r.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .effmat import EffectiveTensor, TableClampWarning
from .errors import ConfigError, NewtonStalled, SolverDiverged, StepRejected
from .fields import MacroGrid, PeriodicMatrixField

NEWTON_TOL = 1e-9
DELTA_REG = 1e-10
MAX_NEWTON = 60
MAX_BACKTRACK = 20


def is_dyadic(eps):
    m = math.log2(1.0 / eps)
    return abs(m - round(m)) < 1e-12 and eps <= 0.5


@dataclass(frozen=True)
class SpaceTimeField:
    """Trajectory of the transformed unknown v on the macroscopic grid.

    ``values[n]`` holds v at interior nodes after step n (``values[0]`` is
    the initial datum); the boundary trace of v is identically zero and is
    not stored. ``dissipation[n]`` is the cumulative discrete integral of
    a grad v . grad v up to t^n.
    """

    grid: MacroGrid
    p: float
    values: np.ndarray
    dissipation: np.ndarray
    stats: dict = dc_field(default_factory=dict)

    def u_values(self):
        """Recover u = sign(v) |v|^(1/p) at every stored step."""
        v = self.values
        return np.sign(v) * np.abs(v) ** (1.0 / self.p)

    def boundary_max(self):
        """v is stored on interior nodes only, so the trace is 0 by
        construction; kept for the invariant check."""
        return 0.0


@dataclass(frozen=True)
class MicroProblem:
    field: PeriodicMatrixField
    eps: float
    r: float
    p: float
    f: Callable
    u0: Callable
    grid: MacroGrid
    substeps: Optional[int] = None

    def __post_init__(self):
        if not is_dyadic(self.eps):
            raise ConfigError(f"eps must be 1/2^m, got {self.eps}")
        if not (0 < self.p < 2):
            raise ConfigError(f"p must lie in (0,2), got {self.p}")
        if self.field.dim != self.grid.dim:
            raise ConfigError("field and grid dimensions differ")

    def auto_substeps(self):
        """Substeps per output step so the marching step resolves the fast
        period (<= eps^r / 8); 1 for s-independent coefficients."""
        if self.substeps is not None:
            return self.substeps
        if self.field.s_independent:
            return 1
        dt = self.grid.dt
        return max(1, int(math.ceil(dt / (self.eps**self.r / 8.0))))


@dataclass(frozen=True)
class HomogenizedProblem:
    tensor: EffectiveTensor
    p: float
    f: Callable
    u0: Callable
    grid: MacroGrid
    mode: str = "constant"  # "constant" | "critical_table"
    substeps: int = 1

    def __post_init__(self):
        if self.mode not in ("constant", "critical_table"):
            raise ConfigError(f"unknown coupling mode {self.mode!r}")
        if self.mode == "critical_table" and not self.tensor.is_table:
            raise ConfigError("critical_table mode needs a tabulated tensor")
        if self.tensor.dim != self.grid.dim:
            raise ConfigError("tensor and grid dimensions differ")


# ---------------------------------------------------------------------------
# Discrete elliptic operators (homogeneous Dirichlet)


def face_points_1d(grid: MacroGrid):
    """Face midpoints (i + 1/2) h for i = 0..n_x, shape (n_x+1, 1)."""
    return ((np.arange(grid.n_x + 1) + 0.5) * grid.h)[:, np.newaxis]


class Operator1D:
    """Tridiagonal -d/dx(a(x) d/dx .) with face coefficients a, in the
    banded storage used by solve_banded."""

    def __init__(self, aface, h):
        self.n = len(aface) - 1
        self.h2 = h * h
        self.aface = np.asarray(aface, dtype=float)
        al, ar = self.aface[:-1], self.aface[1:]
        self.diag = (al + ar) / self.h2
        self.off = -ar[:-1] / self.h2  # coupling i <-> i+1

    def matvec(self, v):
        out = self.diag * v
        out[:-1] += self.off * v[1:]
        out[1:] += self.off * v[:-1]
        return out

    def energy(self, v, h):
        """h * sum over faces of a (Dv)^2 (boundary values 0)."""
        dv = np.diff(np.concatenate([[0.0], v, [0.0]])) / h
        return h * float(self.aface @ dv**2)

    def banded_with_diag(self, extra_diag, dt):
        """Banded form of diag(extra_diag) + dt * L."""
        n = self.n
        ab = np.zeros((3, n))
        ab[1] = extra_diag + dt * self.diag
        ab[0, 1:] = dt * self.off
        ab[2, :-1] = dt * self.off
        return ab

    def solve_shifted(self, extra_diag, dt, rhs):
        return sla.solve_banded((1, 1), self.banded_with_diag(extra_diag, dt), rhs)


class Operator2D:
    """Sparse 5-point (plus optional constant cross term) Dirichlet operator
    on the n_x x n_x interior grid."""

    def __init__(self, a1face, a2face, h, a12=0.0):
        # a1face: (n_x+1, n_x) coefficients on x1-faces; a2face: (n_x, n_x+1)
        n = a1face.shape[1]
        self.n = n
        self.h = h
        h2 = h * h
        N = n * n
        idx = np.arange(N).reshape(n, n)
        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(v.ravel())

        diag = (a1face[:-1] + a1face[1:] + a2face[:, :-1] + a2face[:, 1:]) / h2
        add(idx, idx, diag)
        add(idx[:-1], idx[1:], -a1face[1:-1] / h2)
        add(idx[1:], idx[:-1], -a1face[1:-1] / h2)
        add(idx[:, :-1], idx[:, 1:], -a2face[:, 1:-1] / h2)
        add(idx[:, 1:], idx[:, :-1], -a2face[:, 1:-1] / h2)
        if a12:
            # -2 a12 d1 d2 with centered differences, zero past the boundary
            c = 2.0 * a12 / (4.0 * h2)
            add(idx[:-1, :-1], idx[1:, 1:], -c * np.ones((n - 1, n - 1)))
            add(idx[1:, 1:], idx[:-1, :-1], -c * np.ones((n - 1, n - 1)))
            add(idx[:-1, 1:], idx[1:, :-1], c * np.ones((n - 1, n - 1)))
            add(idx[1:, :-1], idx[:-1, 1:], c * np.ones((n - 1, n - 1)))
        self.K = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(N, N),
        )
        self.a1face, self.a2face = a1face, a2face

    def matvec(self, v):
        return self.K @ v

    def energy(self, v, h):
        return h * h * float(v @ (self.K @ v))

    def solve_shifted(self, extra_diag, dt, rhs):
        J = sp.diags(extra_diag) + dt * self.K
        return spla.splu(J.tocsc()).solve(rhs)


def _micro_operator(field, grid, eps, r, t):
    """Operator with a sampled at face midpoints at time t."""
    s = (t / eps**r) % 1.0
    if grid.dim == 1:
        xf = face_points_1d(grid)
        af = field.sample(xf / eps, np.full(len(xf), s))[:, 0, 0]
        return Operator1D(af, grid.h)
    n, h = grid.n_x, grid.h
    xi = np.arange(1, n + 1) * h
    xfc = (np.arange(n + 1) + 0.5) * h
    X1, X2 = np.meshgrid(xfc, xi, indexing="ij")
    pts = np.stack([X1.ravel(), X2.ravel()], axis=-1)
    a1 = field.sample(pts / eps, np.full(len(pts), s))[:, 0, 0].reshape(n + 1, n)
    X1, X2 = np.meshgrid(xi, xfc, indexing="ij")
    pts = np.stack([X1.ravel(), X2.ravel()], axis=-1)
    a2 = field.sample(pts / eps, np.full(len(pts), s))[:, 1, 1].reshape(n, n + 1)
    amax = np.max(np.abs(field.sample(pts / eps, np.full(len(pts), s))[:, 0, 1]))
    if amax > 0:
        raise ConfigError("2D micro solves support diagonal coefficient fields only")
    return Operator2D(a1, a2, h)


def _constant_operator(matrix, grid):
    matrix = np.atleast_2d(matrix)
    if grid.dim == 1:
        return Operator1D(np.full(grid.n_x + 1, matrix[0, 0]), grid.h)
    n = grid.n_x
    a1 = np.full((n + 1, n), matrix[0, 0])
    a2 = np.full((n, n + 1), matrix[1, 1])
    a12 = 0.5 * (matrix[0, 1] + matrix[1, 0])
    return Operator2D(a1, a2, grid.h, a12=a12)


def _table_operator(tensor, grid, v_nodes, p):
    """Operator with the tabulated matrix looked up from |u| at each face
    (u interpolated from the adjacent nodes, boundary value 0)."""
    u = np.sign(v_nodes) * np.abs(v_nodes) ** (1.0 / p)
    if grid.dim == 1:
        ue = np.concatenate([[0.0], u, [0.0]])
        uf = 0.5 * (ue[:-1] + ue[1:])
        mats = tensor.entries_at(np.abs(uf))
        return Operator1D(mats[:, 0, 0], grid.h)
    n = grid.n_x
    U = u.reshape(n, n)
    Ue = np.zeros((n + 2, n + 2))
    Ue[1:-1, 1:-1] = U
    uf1 = 0.5 * (Ue[:-1, 1:-1] + Ue[1:, 1:-1])
    uf2 = 0.5 * (Ue[1:-1, :-1] + Ue[1:-1, 1:])
    m1 = tensor.entries_at(np.abs(uf1))
    m2 = tensor.entries_at(np.abs(uf2))
    return Operator2D(m1[..., 0, 0], m2[..., 1, 1], grid.h)


# ---------------------------------------------------------------------------
# Implicit Euler step (damped Newton in v)


def _u_of(v, p):
    return np.sign(v) * np.abs(v) ** (1.0 / p)


def _uprime_of(v, p):
    av = np.maximum(np.abs(v), DELTA_REG)
    return (1.0 / p) * av ** (1.0 / p - 1.0)


def _newton_step(op, un, fval, dt, p, v_init, tol_abs, step_id):
    """Solve u(w) + dt L w = un + dt f for w by damped Newton."""
    target = un + dt * fval
    w = v_init.copy()
    F = _u_of(w, p) + dt * op.matvec(w) - target
    res = np.linalg.norm(F)
    iters = 0
    for it in range(MAX_NEWTON):
        if res <= tol_abs:
            return w, res, iters
        d = op.solve_shifted(_uprime_of(w, p), dt, -F)
        alpha = 1.0
        for _ in range(MAX_BACKTRACK):
            w_try = w + alpha * d
            F_try = _u_of(w_try, p) + dt * op.matvec(w_try) - target
            res_try = np.linalg.norm(F_try)
            if res_try <= (1.0 - 1e-4 * alpha) * res:
                w, F, res = w_try, F_try, res_try
                break
            alpha *= 0.5
        else:
            raise StepRejected(
                f"step {step_id}: line search failed {MAX_BACKTRACK} times "
                f"(residual {res:.3e})")
        iters = it + 1
    raise NewtonStalled(f"step {step_id}: residual {res:.3e} > tol {tol_abs:.3e}",
                        step=step_id, residual=float(res))


def _march(grid, p, f, u0, op_at, substeps, newton_tol=NEWTON_TOL,
           table_lagged=None):
    """Shared implicit-Euler driver. op_at(t, v_current) yields the elliptic
    operator for the step targeting time t; with table_lagged the operator
    is rebuilt from the previous iterate once per step (lagged coefficient)."""
    nodes = grid.interior_nodes()
    x = nodes if grid.dim > 1 else nodes
    uinit = np.asarray(u0(x), dtype=float).ravel()
    v = np.sign(uinit) * np.abs(uinit) ** p
    un = uinit.copy()
    n_store = grid.n_t
    values = np.empty((n_store + 1, len(v)))
    values[0] = v
    dissipation = np.zeros(n_store + 1)
    dt_sub = grid.dt / substeps
    hN = grid.h**grid.dim
    scale = max(float(np.linalg.norm(un)), 1.0)
    tol_abs = newton_tol * scale
    newton_counts = []
    diss = 0.0
    for n in range(grid.n_t):
        for m in range(substeps):
            t_next = (n * substeps + m + 1) * dt_sub
            op = op_at(t_next, v)
            fval = np.asarray(f(x, t_next), dtype=float).ravel()
            v, res, iters = _newton_step(op, un, fval, dt_sub, p, v,
                                         tol_abs, step_id=(n, m))
            un = _u_of(v, p)
            newton_counts.append(iters)
            diss += dt_sub * op.energy(v, grid.h)
        values[n + 1] = v
        dissipation[n + 1] = diss
    return values, dissipation, {"substeps": substeps,
                                 "newton_mean": float(np.mean(newton_counts)),
                                 "newton_max": int(np.max(newton_counts))}


def solve_micro(prob: MicroProblem, newton_tol=NEWTON_TOL) -> SpaceTimeField:
    """Backward-Euler / damped-Newton solve of the oscillating problem."""
    substeps = prob.auto_substeps()

    def op_at(t, _v):
        return _micro_operator(prob.field, prob.grid, prob.eps, prob.r, t)

    values, diss, stats = _march(prob.grid, prob.p, prob.f, prob.u0, op_at,
                                 substeps, newton_tol)
    stats.update(eps=prob.eps, r=prob.r)
    return SpaceTimeField(grid=prob.grid, p=prob.p, values=values,
                          dissipation=diss, stats=stats)


def solve_homogenized(prob: HomogenizedProblem, newton_tol=NEWTON_TOL) -> SpaceTimeField:
    """Solve the effective problem; at the critical scaling the matrix is
    looked up from the |u0| table, frozen per step (lagged coefficient)."""
    clamp_count = 0
    if prob.mode == "constant":
        op_const = _constant_operator(
            prob.tensor.entry_at(0.0) if prob.tensor.is_table else prob.tensor.matrix,
            prob.grid)

        def op_at(t, _v):
            return op_const
    else:
        def op_at(t, v):
            nonlocal clamp_count
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", TableClampWarning)
                op = _table_operator(prob.tensor, prob.grid, v, prob.p)
            clamp_count += sum(1 for w in caught
                               if issubclass(w.category, TableClampWarning))
            return op

    values, diss, stats = _march(prob.grid, prob.p, prob.f, prob.u0, op_at,
                                 prob.substeps, newton_tol)
    stats.update(mode=prob.mode, clamp_warnings=clamp_count)
    return SpaceTimeField(grid=prob.grid, p=prob.p, values=values,
                          dissipation=diss, stats=stats)


# ---------------------------------------------------------------------------
# Norms and energies


def hminus1_norm(w, grid: MacroGrid) -> float:
    """Dual norm: solve -Laplace(phi) = w with zero boundary values and
    return the energy norm of phi, i.e. sqrt(h^N w . phi)."""
    w = np.asarray(w, dtype=float).ravel()
    op = _constant_operator(np.eye(grid.dim), grid)
    if grid.dim == 1:
        phi = op.solve_shifted(np.zeros(op.n), 1.0, w)
    else:
        phi = spla.splu((1.0 * op.K).tocsc()).solve(w)
    val = grid.h**grid.dim * float(w @ phi)
    if val < -1e-12:
        raise SolverDiverged(f"indefinite H^-1 energy {val:.3e}")
    return math.sqrt(max(val, 0.0))


def lp_norm(w, grid: MacroGrid, q: float) -> float:
    """Discrete L^q(Omega) norm of interior node values."""
    w = np.asarray(w, dtype=float).ravel()
    return float((grid.h**grid.dim * np.sum(np.abs(w) ** q)) ** (1.0 / q))


def grad_sq_integral(v, grid: MacroGrid) -> float:
    """Discrete integral of |grad v|^2 over Omega (zero boundary)."""
    v = np.asarray(v, dtype=float).ravel()
    h = grid.h
    if grid.dim == 1:
        dv = np.diff(np.concatenate([[0.0], v, [0.0]])) / h
        return h * float(dv @ dv)
    n = grid.n_x
    V = np.zeros((n + 2, n + 2))
    V[1:-1, 1:-1] = v.reshape(n, n)
    d1 = np.diff(V, axis=0)[:, 1:-1] / h
    d2 = np.diff(V, axis=1)[1:-1, :] / h
    return h * h * (float(np.sum(d1**2)) + float(np.sum(d2**2)))


def energy_functionals(traj: SpaceTimeField, p: float = None):
    """E(t) = (1/(p+1)) ||u(t)||_{L^{p+1}}^{p+1} per step, plus the
    cumulative dissipation integral recorded during the solve."""
    p = traj.p if p is None else p
    u = traj.u_values()
    hN = traj.grid.h**traj.grid.dim
    E = hN * np.sum(np.abs(u) ** (p + 1.0), axis=1) / (p + 1.0)
    return {"energy": E, "dissipation": traj.dissipation.copy(),
            "times": traj.grid.times()}


def contraction_constant(field: PeriodicMatrixField, eps: float, r: float,
                         T: float, n_s: int = 64) -> float:
    """Stability constant for the initial-datum contraction estimate:
    (Lam/lam) * exp((1/(lam eps^r)) integral of ||d_s a||_inf over (0,T)).
    The integral reduces to T times the s-average of the sup norm."""
    svals = (np.arange(n_s) + 0.5) / n_s
    mean_ds = float(np.mean([field.sup_ds_inf(s) for s in svals]))
    return (field.Lam / field.lam) * math.exp(T * mean_ds / (field.lam * eps**r))


# ---------------------------------------------------------------------------
# Trajectory serialization ("oscidiff-traj v1")

TRAJ_MAGIC = "oscidiff-traj v1"


def save_traj(path, traj: SpaceTimeField):
    g = traj.grid
    diss = ",".join(f"{v:.17g}" for v in traj.dissipation)
    with open(path, "w") as fh:
        fh.write(
            f"{TRAJ_MAGIC} N={g.dim} nx={g.n_x} nt={g.n_t} T={g.T:.17g} "
            f"p={traj.p:.17g} diss={diss}\n"
        )
        np.savetxt(fh, traj.values, fmt="%.17g")


def load_traj(path) -> SpaceTimeField:
    with open(path) as fh:
        header = fh.readline().split()
        if " ".join(header[:2]) != TRAJ_MAGIC:
            raise ConfigError(f"{path}: bad magic {' '.join(header[:2])!r}")
        meta = dict(kv.split("=") for kv in header[2:])
        values = np.loadtxt(fh, ndmin=2)
    grid = MacroGrid(dim=int(meta["N"]), n_x=int(meta["nx"]),
                     n_t=int(meta["nt"]), T=float(meta["T"]))
    if values.shape[0] != grid.n_t + 1:
        raise ConfigError(f"{path}: expected {grid.n_t + 1} steps, got {values.shape[0]}")
    dissipation = np.array([float(v) for v in meta["diss"].split(",")])
    return SpaceTimeField(grid=grid, p=float(meta["p"]), values=values,
                          dissipation=dissipation)
