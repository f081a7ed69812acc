"""Periodic coefficient fields and the grids they live on.

A coefficient field is a symmetric, uniformly elliptic matrix-valued
function a(y, s) on the unit cell (0,1)^N x (0,1), extended periodically.
Evaluators are pure and vectorized; all arguments are wrapped to the cell
before evaluation, so sampling a(x/eps, t/eps^r) is total.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .errors import AsymmetricCoefficient, ConfigError, EllipticityViolation

FILE_MAGIC = "oscidiff-field v1"


@dataclass(frozen=True)
class PeriodicMatrixField:
    """Symmetric matrix field a(y,s) on the unit cell, with ellipticity data.

    ``entries(y, s)`` receives ``y`` of shape (..., dim) and ``s`` of shape
    (...), both already wrapped to [0,1), and returns shape (..., dim, dim).
    """

    dim: int
    entries: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lam: float
    Lam: float
    s_independent: bool = False
    smoothness: str = "smooth"  # "continuous" | "C1_in_s" | "smooth"
    name: str = "anonymous"
    params: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigError(f"dim must be 1 or 2, got {self.dim}")
        if not (0.0 < self.lam <= self.Lam):
            raise ConfigError(f"need 0 < lambda <= Lambda, got ({self.lam}, {self.Lam})")
        if self.smoothness not in ("continuous", "C1_in_s", "smooth"):
            raise ConfigError(f"unknown smoothness tag {self.smoothness!r}")
        if self.smoothness == "continuous":
            warnings.warn(
                "field is only tagged continuous; corrector statements assume "
                "Hoelder regularity in y (and smoothness at the critical ratio), "
                "which cannot be verified for a black-box evaluator",
                stacklevel=3,
            )

    def sample(self, y, s):
        """Evaluate a at (y, s), wrapping both arguments into the unit cell."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.shape[-1] != self.dim:
            if self.dim == 1:
                y = y[..., np.newaxis]
            else:
                raise ConfigError(f"y has trailing size {y.shape[-1]}, expected {self.dim}")
        s = np.broadcast_to(np.asarray(s, dtype=float), y.shape[:-1])
        return self.entries(np.mod(y, 1.0), np.mod(s, 1.0))

    def sample_diag(self, y, s):
        """Diagonal entries a_dd(y, s), shape (..., dim)."""
        a = self.sample(y, s)
        return np.diagonal(a, axis1=-2, axis2=-1)

    def sup_ds_inf(self, s, n_y=64, h=1e-6):
        """sup over sampled y of the max-norm of d/ds a(y, s), by central differences."""
        if self.s_independent:
            return 0.0
        ygrid = _cell_centers(self.dim, n_y)
        s = float(s)
        da = (self.sample(ygrid, np.full(len(ygrid), s + h))
              - self.sample(ygrid, np.full(len(ygrid), s - h))) / (2.0 * h)
        return float(np.max(np.sum(np.abs(da), axis=-1)))


@dataclass(frozen=True)
class CellGrid:
    """Uniform periodic grid on the unit cell (0,1)^N x (0,1).

    Cell centers sit at (i + 1/2) h_y; time slices at j h_s. ``face_avg``
    fixes how flux coefficients on faces are built from the two adjacent
    cell values; the geometric mean keeps second-order consistency with a
    markedly smaller error constant than the arithmetic mean on the
    trigonometric test fields.
    """

    M_y: int
    M_s: int
    face_avg: str = "geometric"

    def __post_init__(self):
        if self.M_y < 4:
            raise ConfigError(f"M_y must be >= 4, got {self.M_y}")
        if self.M_s < 2:
            raise ConfigError(f"M_s must be >= 2, got {self.M_s}")
        if self.face_avg not in ("geometric", "arithmetic", "harmonic"):
            raise ConfigError(f"unknown face_avg convention {self.face_avg!r}")

    @property
    def h_y(self):
        return 1.0 / self.M_y

    @property
    def h_s(self):
        return 1.0 / self.M_s

    def centers(self, dim):
        """Cell-center coordinates, shape (M_y**dim, dim), y1 varying slowest."""
        return _cell_centers(dim, self.M_y)

    def slice_times(self):
        """Time-slice nodes j * h_s for j = 0..M_s-1."""
        return np.arange(self.M_s) * self.h_s


@dataclass(frozen=True)
class MacroGrid:
    """Tensor grid on Omega = (0,1)^N with n_x interior points per direction
    and n_t implicit time steps on (0, T). Homogeneous Dirichlet boundary."""

    dim: int
    n_x: int
    n_t: int
    T: float

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigError(f"dim must be 1 or 2, got {self.dim}")
        if self.n_x < 8:
            raise ConfigError(f"n_x must be >= 8, got {self.n_x}")
        if self.n_t < 4:
            raise ConfigError(f"n_t must be >= 4, got {self.n_t}")
        if not self.T > 0:
            raise ConfigError(f"T must be positive, got {self.T}")

    @property
    def h(self):
        return 1.0 / (self.n_x + 1)

    @property
    def dt(self):
        return self.T / self.n_t

    def interior_nodes(self):
        """Interior node coordinates, shape (n_x**dim, dim), x1 varying slowest."""
        x1 = np.arange(1, self.n_x + 1) * self.h
        if self.dim == 1:
            return x1[:, np.newaxis]
        X1, X2 = np.meshgrid(x1, x1, indexing="ij")
        return np.stack([X1.ravel(), X2.ravel()], axis=-1)

    def times(self):
        """Step times t^n for n = 0..n_t (t^0 = 0)."""
        return np.arange(self.n_t + 1) * self.dt


def _cell_centers(dim, m):
    c = (np.arange(m) + 0.5) / m
    if dim == 1:
        return c[:, np.newaxis]
    Y1, Y2 = np.meshgrid(c, c, indexing="ij")
    return np.stack([Y1.ravel(), Y2.ravel()], axis=-1)


# ---------------------------------------------------------------------------
# Operations


def validate_ellipticity(field: PeriodicMatrixField, n_samples: int = 4096, seed: int = 0):
    """Probe the Rayleigh quotient at quasi-random (y, s, xi) triples.

    Returns {"lambda_est", "Lambda_est"}; raises AsymmetricCoefficient or
    EllipticityViolation (with a witness point) if the declared constants
    are not respected within 1e-12.
    """
    from scipy.stats import qmc

    d = field.dim
    sampler = qmc.Sobol(d=2 * d + 1, scramble=True, seed=seed)
    pts = sampler.random(n_samples)
    y = pts[:, :d]
    s = pts[:, d]
    xi = pts[:, d + 1:] - 0.5
    # avoid near-zero probe vectors
    norms = np.linalg.norm(xi, axis=1)
    bad = norms < 1e-3
    xi[bad] = np.eye(d)[0]
    norms = np.linalg.norm(xi, axis=1)
    xi = xi / norms[:, np.newaxis]

    a = field.sample(y, s)
    asym = np.max(np.abs(a - np.swapaxes(a, -1, -2)), axis=(-2, -1))
    worst = int(np.argmax(asym))
    if asym[worst] > 1e-12:
        raise AsymmetricCoefficient(
            f"asymmetry {asym[worst]:.3e} at y={y[worst]}, s={s[worst]:.6f}"
        )

    rq = np.einsum("ni,nij,nj->n", xi, a, xi)
    lo, hi = int(np.argmin(rq)), int(np.argmax(rq))
    if rq[lo] < field.lam - 1e-12:
        raise EllipticityViolation(
            f"Rayleigh quotient {rq[lo]:.12f} < lambda={field.lam} "
            f"at y={y[lo]}, s={s[lo]:.6f}, xi={xi[lo]}",
            witness=(y[lo].copy(), float(s[lo]), xi[lo].copy()),
        )
    if rq[hi] > field.Lam + 1e-12:
        raise EllipticityViolation(
            f"Rayleigh quotient {rq[hi]:.12f} > Lambda={field.Lam} "
            f"at y={y[hi]}, s={s[hi]:.6f}, xi={xi[hi]}",
            witness=(y[hi].copy(), float(s[hi]), xi[hi].copy()),
        )
    return {"lambda_est": float(rq[lo]), "Lambda_est": float(rq[hi])}


def sample_oscillating(field: PeriodicMatrixField, x, t, eps: float, r: float):
    """a(x/eps, t/eps^r); wrapping makes this total for any eps, r > 0."""
    if not (eps > 0 and r > 0):
        raise ConfigError("eps and r must be positive")
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    return field.sample(x / eps, t / eps**r)


def mean_ys(field: PeriodicMatrixField, grid: CellGrid):
    """Midpoint-rule average of a over the space-time cell."""
    y = grid.centers(field.dim)
    smid = (np.arange(grid.M_s) + 0.5) * grid.h_s
    acc = np.zeros((field.dim, field.dim))
    for sj in smid:
        acc += np.mean(field.sample(y, np.full(len(y), sj)), axis=0)
    return acc / grid.M_s


# ---------------------------------------------------------------------------
# Built-in analytic fields


def constant_field(matrix, name="constant"):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.shape[0] != matrix.shape[1]:
        raise ConfigError("constant field needs a square matrix")
    if np.max(np.abs(matrix - matrix.T)) > 0:
        raise ConfigError("constant field matrix must be symmetric")
    eig = np.linalg.eigvalsh(matrix)
    dim = matrix.shape[0]

    def entries(y, s):
        return np.broadcast_to(matrix, y.shape[:-1] + (dim, dim)).copy()

    return PeriodicMatrixField(
        dim=dim, entries=entries, lam=float(eig[0]), Lam=float(eig[-1]),
        s_independent=True, name=name, params={"matrix": matrix.tolist()},
    )


def trig_field_1d(base=2.0, amp=1.0, scale=0.25):
    """1D scalar a(y) = scale * (base + amp * sin(2 pi y)); s-independent."""
    if not base - abs(amp) > 0:
        raise ConfigError("trig1d needs base > |amp| for ellipticity")

    def entries(y, s):
        return (scale * (base + amp * np.sin(2 * np.pi * y[..., 0])))[..., None, None]

    return PeriodicMatrixField(
        dim=1, entries=entries,
        lam=scale * (base - abs(amp)), Lam=scale * (base + abs(amp)),
        s_independent=True, name="trig1d",
        params={"base": base, "amp": amp, "scale": scale},
    )


def trig_field_1d_st(base=2.0, amp=1.0, scale=0.25):
    """1D scalar a(y,s) = scale * (base + amp * sin(2 pi y) cos(2 pi s))."""
    if not base - abs(amp) > 0:
        raise ConfigError("trig1d_st needs base > |amp| for ellipticity")

    def entries(y, s):
        osc = np.sin(2 * np.pi * y[..., 0]) * np.cos(2 * np.pi * s)
        return (scale * (base + amp * osc))[..., None, None]

    return PeriodicMatrixField(
        dim=1, entries=entries,
        lam=scale * (base - abs(amp)), Lam=scale * (base + abs(amp)),
        s_independent=False, name="trig1d_st",
        params={"base": base, "amp": amp, "scale": scale},
    )


def laminate_field_2d(base=2.0, amp=1.0, scale=0.25, s_dependent=False):
    """2D laminate alpha(y1[, s]) * I; separates in y for oracle checks."""
    if not base - abs(amp) > 0:
        raise ConfigError("laminate2d needs base > |amp| for ellipticity")

    def entries(y, s):
        osc = np.sin(2 * np.pi * y[..., 0])
        if s_dependent:
            osc = osc * np.cos(2 * np.pi * s)
        alpha = scale * (base + amp * osc)
        out = np.zeros(y.shape[:-1] + (2, 2))
        out[..., 0, 0] = alpha
        out[..., 1, 1] = alpha
        return out

    return PeriodicMatrixField(
        dim=2, entries=entries,
        lam=scale * (base - abs(amp)), Lam=scale * (base + abs(amp)),
        s_independent=not s_dependent, name="laminate2d",
        params={"base": base, "amp": amp, "scale": scale, "s_dependent": s_dependent},
    )


def trig_field_2d_st(base=2.0, amp=1.0, scale=0.25, s_dependent=True):
    """Genuinely 2D (non-laminate) diagonal field.

    a = scale * diag(base + amp sin(2 pi y1) cos(2 pi y2) c(s),
                     base + amp cos(2 pi y1) sin(2 pi y2) c(s + 1/4))
    with c = cos(2 pi .). Diagonal entries stay inside [lam, Lam].
    """
    if not base - abs(amp) > 0:
        raise ConfigError("trig2d_st needs base > |amp| for ellipticity")

    def entries(y, s):
        c1 = np.cos(2 * np.pi * s) if s_dependent else 1.0
        c2 = np.cos(2 * np.pi * (s + 0.25)) if s_dependent else 1.0
        a11 = base + amp * np.sin(2 * np.pi * y[..., 0]) * np.cos(2 * np.pi * y[..., 1]) * c1
        a22 = base + amp * np.cos(2 * np.pi * y[..., 0]) * np.sin(2 * np.pi * y[..., 1]) * c2
        out = np.zeros(y.shape[:-1] + (2, 2))
        out[..., 0, 0] = scale * a11
        out[..., 1, 1] = scale * a22
        return out

    return PeriodicMatrixField(
        dim=2, entries=entries,
        lam=scale * (base - abs(amp)), Lam=scale * (base + abs(amp)),
        s_independent=not s_dependent, name="trig2d_st",
        params={"base": base, "amp": amp, "scale": scale, "s_dependent": s_dependent},
    )


def checkerboard_field_2d(low=0.25, high=0.75, sharpness=4.0):
    """Smoothed checkerboard: scalar between low and high, tanh profile."""
    if not 0 < low < high:
        raise ConfigError("checkerboard2d needs 0 < low < high")
    mid, half = 0.5 * (low + high), 0.5 * (high - low)

    def entries(y, s):
        patt = np.sin(2 * np.pi * y[..., 0]) * np.sin(2 * np.pi * y[..., 1])
        alpha = mid + half * np.tanh(sharpness * patt)
        out = np.zeros(y.shape[:-1] + (2, 2))
        out[..., 0, 0] = alpha
        out[..., 1, 1] = alpha
        return out

    return PeriodicMatrixField(
        dim=2, entries=entries, lam=low, Lam=high,
        s_independent=True, name="checkerboard2d",
        params={"low": low, "high": high, "sharpness": sharpness},
    )


_BUILTINS = {
    "constant": constant_field,
    "trig1d": trig_field_1d,
    "trig1d_st": trig_field_1d_st,
    "laminate2d": laminate_field_2d,
    "trig2d_st": trig_field_2d_st,
    "checkerboard2d": checkerboard_field_2d,
}


def make_field(name, **params):
    """Instantiate a built-in field by name."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ConfigError(
            f"unknown builtin field {name!r}; choices: {sorted(_BUILTINS)}"
        ) from None
    if name == "constant" and "matrix" not in params:
        params = dict(params)
        params.setdefault("matrix", np.eye(params.pop("dim", 1)))
    return factory(**params)


# ---------------------------------------------------------------------------
# Gridded fields ("oscidiff-field v1")


def save_gridded(path, field: PeriodicMatrixField, grid: CellGrid):
    """Sample a field at grid nodes (i/M_y, j/M_s) and write the v1 format."""
    dim = field.dim
    ynodes = np.arange(grid.M_y) / grid.M_y
    snodes = np.arange(grid.M_s) / grid.M_s
    with open(path, "w") as fh:
        fh.write(f"{FILE_MAGIC} N={dim} My={grid.M_y} Ms={grid.M_s}\n")
        for idx in np.ndindex(*([grid.M_y] * dim)):
            y = np.array([ynodes[i] for i in idx])
            for sj in snodes:
                a = field.sample(y, sj)
                tri = [a[i, j] for i in range(dim) for j in range(i + 1)]
                fh.write(" ".join(f"{v:.17g}" for v in tri) + "\n")


def load_gridded(path):
    """Load a gridded field; values interpolate linearly and periodically."""
    with open(path) as fh:
        header = fh.readline().split()
        if " ".join(header[:2]) != FILE_MAGIC:
            raise ConfigError(f"{path}: bad magic {' '.join(header[:2])!r}")
        meta = dict(kv.split("=") for kv in header[2:])
        dim, My, Ms = int(meta["N"]), int(meta["My"]), int(meta["Ms"])
        raw = np.loadtxt(fh, ndmin=2)
    n_tri = dim * (dim + 1) // 2
    expected = My**dim * Ms
    if raw.shape != (expected, n_tri):
        raise ConfigError(
            f"{path}: expected {expected} rows x {n_tri} cols, got {raw.shape}"
        )
    # lower-triangle-completed by symmetry
    full = np.zeros((expected, dim, dim))
    col = 0
    for i in range(dim):
        for j in range(i + 1):
            full[:, i, j] = raw[:, col]
            full[:, j, i] = raw[:, col]
            col += 1
    table = full.reshape(([My] * dim) + [Ms, dim, dim])
    eigs = np.linalg.eigvalsh(full)
    lam, Lam = float(eigs.min()), float(eigs.max())
    if lam <= 0:
        raise ConfigError(f"{path}: gridded field is not positive definite (min eig {lam})")

    def entries(y, s):
        return _interp_periodic(table, dim, My, Ms, y, s)

    return PeriodicMatrixField(
        dim=dim, entries=entries, lam=lam, Lam=Lam,
        s_independent=(Ms == 1), smoothness="continuous", name=f"gridded:{path}",
    )


def _interp_periodic(table, dim, My, Ms, y, s):
    """Multilinear periodic interpolation of nodal matrices."""
    shp = y.shape[:-1]
    yy = np.mod(y, 1.0) * My
    ss = np.mod(s, 1.0) * Ms
    i0 = np.floor(yy).astype(int) % My
    fy = yy - np.floor(yy)
    j0 = np.floor(ss).astype(int) % Ms
    fs = ss - np.floor(ss)
    j1 = (j0 + 1) % Ms
    out = np.zeros(shp + (dim, dim))
    corners = [(0,), (1,)] if dim == 1 else [(0, 0), (0, 1), (1, 0), (1, 1)]
    for corner in corners:
        w = np.ones(shp)
        idx = []
        for d, c in enumerate(corner):
            w = w * (fy[..., d] if c else 1.0 - fy[..., d])
            idx.append((i0[..., d] + c) % My)
        out += (w * (1.0 - fs))[..., None, None] * table[tuple(idx) + (j0,)]
        out += (w * fs)[..., None, None] * table[tuple(idx) + (j1,)]
    return out
