"""Shared oracles and helpers for the test suite."""

import os

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from oscidiff import cellsolve as cs

FIXTURE_DIR = os.environ.get(
    "OSCIDIFF_FIXTURES",
    os.path.join(os.path.dirname(__file__), "fixtures"))


def monolithic_critical_solve(field, grid, p, u0abs, k):
    """Direct sparse solve of the full space-time periodic cell system.

    Assembles the same implicit-Euler discretization the marching solver
    steps through, but as one (M_s n + 1) x (M_s n + 1) linear system with
    a Lagrange multiplier enforcing zero mean on the first slice, and
    solves it in one shot. Returns the trajectory with the layout of
    CellSolution.phi: slices 0..M_s with slice 0 = slice M_s wrapped.

    For the porous-medium branch the unknown is Psi and the returned
    trajectory is Phi = kappa Psi.
    """
    param = cs.CellParameter(p=p, u0abs=u0abs)
    if p < 1:
        capacity, kappa = param.mu_fde, 1.0
    else:
        capacity, kappa = 1.0, param.kappa_pme
    ops = cs._slice_operators(field, grid)
    n = grid.M_y**field.dim
    M_s = grid.M_s
    c = capacity / grid.h_s
    blocks = [[None] * M_s for _ in range(M_s)]
    for i in range(M_s):
        blocks[i][i] = sp.eye(n) * c + kappa * ops[i].K
        blocks[i][(i - 1) % M_s] = sp.eye(n) * (-c)
    A = sp.bmat(blocks, format="lil")
    rhs = np.concatenate([op.b[k - 1] for op in ops])
    # one global constant in the kernel: pin the mean of the last slice
    # (the one that wraps to s = 0)
    ones = np.zeros(M_s * n)
    ones[(M_s - 1) * n:] = 1.0 / n
    A_aug = sp.bmat([[A, ones[:, None]], [ones[None, :], None]], format="csc")
    sol = spla.spsolve(A_aug, np.concatenate([rhs, [0.0]]))[:-1]
    traj = np.empty((M_s + 1, n))
    traj[1:] = kappa * sol.reshape(M_s, n)
    traj[0] = traj[-1]
    return traj


def l2_cell_time(diff, grid, dim):
    """L2(cell x period) norm of a (M_s+1, n) slice trajectory difference,
    rectangle rule over slices 1..M_s."""
    hN = (1.0 / grid.M_y) ** dim
    return float(np.sqrt(grid.h_s * hN * np.sum(diff[1:] ** 2)))
