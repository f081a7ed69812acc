import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import l2_cell_time, monolithic_critical_solve
from oscidiff import cellsolve as cs
from oscidiff.errors import ConfigError
from oscidiff.fields import CellGrid, MacroGrid, make_field


def face_flux_1d(field, sol, slice_idx):
    """Discrete face flux a_f (dPhi + 1) of a 1D cell solution, one slice."""
    grid = sol.grid
    h = 1.0 / grid.M_y
    y = (np.arange(grid.M_y)[:, None] + 0.5) / grid.M_y
    s = sol.s_nodes[slice_idx] % 1.0
    a = field.sample(y, np.full(grid.M_y, s))[:, 0, 0]
    af = np.sqrt(a * np.roll(a, -1))  # geometric face mean
    phi = sol.phi[slice_idx] if sol.phi.ndim == 2 else sol.phi
    dphi = (np.roll(phi, -1) - phi) / h
    return af * (dphi + 1.0)


def test_classical_identity_field_zero_corrector():
    sol = cs.solve_classical_cell(make_field("constant", matrix=np.eye(1)),
                                  CellGrid(M_y=32, M_s=4), k=1)
    assert np.max(np.abs(sol.phi)) <= 1e-10


def test_classical_1d_closed_form_gradient():
    # a(y) = (2+sin 2 pi y)/4 gives flux c = <1/a>^-1 = sqrt(3)/4 and
    # Phi'(y) = c/a(y) - 1
    field = make_field("trig1d")
    grid = CellGrid(M_y=128, M_s=4)
    sol = cs.solve_classical_cell(field, grid, k=1)
    c = np.sqrt(3.0) / 4.0
    flux = face_flux_1d(field, sol, 0)
    assert np.max(np.abs(flux - flux[0])) < 1e-9  # flux constant in y
    assert abs(flux[0] - c) < 2e-4  # O(h^2) against the closed form


def test_classical_grid_convergence_order():
    field = make_field("trig1d")
    c = np.sqrt(3.0) / 4.0
    errs = []
    for M in (16, 32, 64, 128):
        sol = cs.solve_classical_cell(field, CellGrid(M_y=M, M_s=4), k=1)
        errs.append(abs(face_flux_1d(field, sol, 0)[0] - c))
    order = np.polyfit(np.log([16, 32, 64, 128]), np.log(errs), 1)[0]
    assert -order >= 1.9


def test_laminate_2d_separates():
    field2 = make_field("laminate2d")
    field1 = make_field("trig1d")  # the laminate profile along y1
    grid2 = CellGrid(M_y=32, M_s=4)
    sol1 = cs.solve_classical_cell(field2, grid2, k=1)
    sol2 = cs.solve_classical_cell(field2, grid2, k=2)
    ref = cs.solve_classical_cell(field1, CellGrid(M_y=32, M_s=4), k=1)
    phi1 = sol1.phi[0].reshape(32, 32)
    assert np.max(np.abs(sol2.phi)) <= 1e-10  # transverse corrector vanishes
    assert np.max(np.abs(phi1 - phi1[:, :1])) <= 1e-10  # depends on y1 only
    assert np.max(np.abs(phi1[:, 0] - ref.phi[0])) <= 1e-9


def test_subcritical_slices_and_flux_identity():
    field = make_field("trig1d_st")
    grid = CellGrid(M_y=64, M_s=16)
    sol = cs.solve_subcritical_cell(field, grid, k=1)
    for j in range(grid.M_s):
        s = sol.s_nodes[j]
        c_s = 0.25 * np.sqrt(4.0 - np.cos(2 * np.pi * s) ** 2)
        flux = face_flux_1d(field, sol, j)
        assert np.max(np.abs(flux - flux[0])) < 1e-9
        assert abs(flux[0] - c_s) < 1e-3


def test_supercritical_trig_field_zero_corrector():
    # the s-average of trig1d_st is the constant 1/2
    sol = cs.solve_supercritical_cell(make_field("trig1d_st"),
                                      CellGrid(M_y=32, M_s=32), k=1)
    assert np.max(np.abs(sol.phi)) <= 1e-10


def test_zero_mean_and_periodicity_invariants():
    field = make_field("trig1d_st")
    grid = CellGrid(M_y=16, M_s=16)
    for regime, param in [("subcritical", None),
                          ("critical_fde", cs.CellParameter(p=0.5, u0abs=1.0)),
                          ("critical_pme", cs.CellParameter(p=1.5, u0abs=1.0))]:
        (sol,) = cs.solve_cells(field, grid, regime, param=param)
        assert sol.mean_defect() <= 1e-10
        assert sol.periodic_defect <= 1e-10


def test_regime_consistency_s_independent():
    field = make_field("trig1d")
    grid = CellGrid(M_y=32, M_s=8)
    ref = cs.solve_classical_cell(field, grid, k=1).phi[0]
    sols = [
        cs.solve_subcritical_cell(field, grid, k=1),
        cs.solve_supercritical_cell(field, grid, k=1),
        cs.solve_critical_cell_fde(field, grid,
                                   cs.CellParameter(p=0.5, u0abs=1.0), k=1),
        cs.solve_critical_cell_pme(field, grid,
                                   cs.CellParameter(p=1.5, u0abs=1.0), k=1),
    ]
    for sol in sols:
        assert np.max(np.abs(sol.phi - ref)) <= 1e-9


@pytest.mark.parametrize("p,u0abs", [(0.5, 1.0), (1.5, 1.0), (0.5, 0.3),
                                     (1.5, 2.7)])
def test_critical_matches_monolithic_oracle(p, u0abs):
    field = make_field("trig1d_st")
    grid = CellGrid(M_y=16, M_s=16)
    param = cs.CellParameter(p=p, u0abs=u0abs)
    if p < 1:
        sol = cs.solve_critical_cell_fde(field, grid, param, k=1)
    else:
        sol = cs.solve_critical_cell_pme(field, grid, param, k=1)
    oracle = monolithic_critical_solve(field, grid, p, u0abs, k=1)
    assert l2_cell_time(sol.phi - oracle, grid, field.dim) <= 1e-8


def test_fde_zero_datum_delegates_to_subcritical():
    field = make_field("trig1d_st")
    grid = CellGrid(M_y=16, M_s=8)
    fde = cs.solve_critical_cell_fde(field, grid,
                                     cs.CellParameter(p=0.5, u0abs=0.0), k=1)
    sub = cs.solve_subcritical_cell(field, grid, k=1)
    assert fde.regime == "critical_fde"
    assert np.max(np.abs(fde.phi - sub.phi)) == 0.0


def test_pme_zero_datum_corrector_vanishes():
    sol = cs.solve_critical_cell_pme(make_field("trig1d_st"),
                                     CellGrid(M_y=16, M_s=8),
                                     cs.CellParameter(p=1.5, u0abs=0.0), k=1)
    assert np.max(np.abs(sol.phi)) == 0.0


def test_cell_parameter_validation():
    with pytest.raises(ConfigError):
        cs.CellParameter(p=2.5, u0abs=1.0)
    with pytest.raises(ConfigError):
        cs.CellParameter(p=0.5, u0abs=-1.0)
    with pytest.raises(ConfigError):
        cs.solve_critical_cell_fde(make_field("trig1d_st"), CellGrid(8, 8),
                                   cs.CellParameter(p=1.5, u0abs=1.0), k=1)


def test_corrector_field_zero_gradient():
    field = make_field("trig1d_st")
    grid = CellGrid(M_y=16, M_s=8)
    macro = MacroGrid(dim=1, n_x=8, n_t=4, T=0.25)
    cells = cs.solve_cells(field, grid, "subcritical")
    grad_v0 = np.zeros((macro.n_t + 1, macro.n_x, 1))
    z = cs.assemble_corrector_z(cells, grad_v0, macro)
    assert z(0.5, 0.1, 0.3, 0.7) == 0.0


def test_corrector_field_unit_gradient_reproduces_phi():
    field = make_field("trig1d_st")
    grid = CellGrid(M_y=32, M_s=32)
    macro = MacroGrid(dim=1, n_x=8, n_t=4, T=0.25)
    cells = cs.solve_cells(field, grid, "subcritical")
    grad_v0 = np.ones((macro.n_t + 1, macro.n_x, 1))
    z = cs.assemble_corrector_z(cells, grad_v0, macro)
    phi_eval, _ = cells[0].interpolators()
    for y, s in [(0.0, 0.0), (0.25, 0.5), (0.8, 0.9)]:
        assert z(0.5, 0.1, y, s) == pytest.approx(
            float(phi_eval(np.array([[y]]), np.array([s]))[0]), abs=1e-12)


def test_cell_roundtrip(tmp_path):
    field = make_field("trig1d_st")
    grid = CellGrid(M_y=16, M_s=16)
    sol = cs.solve_critical_cell_pme(field, grid,
                                     cs.CellParameter(p=1.5, u0abs=1.0), k=1)
    path = tmp_path / "cell.txt"
    cs.save_cell(path, sol)
    loaded = cs.load_cell(path)
    assert loaded.regime == sol.regime
    assert np.allclose(loaded.phi, sol.phi, atol=1e-15)
    assert np.allclose(loaded.psi, sol.psi, atol=1e-15)
    assert loaded.param.p == sol.param.p


@given(vals=st.lists(st.floats(0.2, 5.0), min_size=8, max_size=8))
@settings(max_examples=25, deadline=None)
def test_classical_flux_constancy_random_1d(vals):
    # piecewise coefficient through the gridded-field interpolant: the
    # discrete flux must be constant in y for any admissible coefficient
    a = np.array(vals)

    def entries(y, s):
        idx = (np.asarray(y)[..., 0] * 8).astype(int) % 8
        return a[idx][..., None, None]

    from oscidiff.fields import PeriodicMatrixField
    field = PeriodicMatrixField(dim=1, entries=entries, lam=float(a.min()),
                                Lam=float(a.max()), s_independent=True,
                                name="random_piecewise")
    sol = cs.solve_classical_cell(field, CellGrid(M_y=8, M_s=2), k=1)
    flux = face_flux_1d(field, sol, 0)
    assert np.max(np.abs(flux - flux[0])) < 1e-8 * max(1.0, np.max(np.abs(flux)))
