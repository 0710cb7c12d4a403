"""Deformed-cell volumes and the mass-preservation residual/Jacobian."""

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import (fitted_smooth_template, linear_displacement,
                      random_displacement, smooth_image, unit_geometry)
from massreg.constraint import (argmin_volume, evaluate, is_diffeomorphic,
                                min_volume, volume, volume_derivative)
from massreg.grid import CellField, StaggeredField
from massreg.image import fit
from massreg.synthetic import build_ex1


def _interior_cells(g):
    mask = np.zeros(g.cell_shape, dtype=bool)
    mask[1:-1, 1:-1] = True
    return mask.reshape(-1)


def test_volume_of_identity_map():
    g = unit_geometry(9)
    V = volume(StaggeredField.zeros(g))
    assert np.abs(V.values - 1.0).max() == 0.0


@pytest.mark.parametrize("coef,det", [
    (((0.0, 0.05, 0.0), (0.0, 0.0, 0.05)), 1.05 ** 2),       # dilation
    (((0.0, 0.0, 0.08), (0.0, 0.0, 0.0)), 1.0),              # shear
    (((0.0, 0.03, 0.08), (0.0, -0.05, -0.02)), 1.03 * 0.98 + 0.05 * 0.08),
])
def test_volume_exact_for_affine_maps_on_interior_cells(coef, det):
    """det(I + grad u) is reproduced exactly where wall clamping is inert."""
    g = unit_geometry(8)
    V = volume(linear_displacement(g, coef))
    assert np.abs(V.values[_interior_cells(g)] - det).max() <= 1e-13


def test_volume_derivative_matches_finite_differences():
    g = unit_geometry(6)
    rng = np.random.default_rng(0)
    u = random_displacement(g, rng, pinned=False)
    dV = volume_derivative(u).toarray()
    eps = 1e-7
    base = u.vector()
    fd = np.zeros_like(dV)
    for j in range(g.num_u):
        e = np.zeros(g.num_u)
        e[j] = eps
        vp = volume(StaggeredField.from_vector(g, base + e)).values
        vm = volume(StaggeredField.from_vector(g, base - e)).values
        fd[:, j] = (vp - vm) / (2 * eps)
    assert np.abs(fd - dV).max() <= 1e-6 * max(1.0, np.abs(dV).max())


def test_min_volume_helpers_consistent():
    g = unit_geometry(7)
    u = random_displacement(g, np.random.default_rng(1), amp=0.6 * g.h)
    V = volume(u)
    assert min_volume(u) == V.values.min()
    val, idx = argmin_volume(u)
    assert val == V.values.min() and V.values[idx] == val
    assert is_diffeomorphic(u, V.values.min() - 1e-12)
    assert not is_diffeomorphic(u, V.values.min() + 1e-12)


def test_jacobian_matches_finite_differences():
    """Analytic constraint Jacobian vs central differences, random instance."""
    n = 8
    g = unit_geometry(n)
    rng = np.random.default_rng(3)
    _, model = fitted_smooth_template(g, seed=7)
    ref = CellField(g, 0.6 + 0.3 * rng.random(g.num_cells))
    u = random_displacement(g, rng, amp=0.1 * g.h, pinned=False)
    B = evaluate(u, model, ref).jacobian.toarray()
    eps = 1e-6
    base = u.vector()
    fd = np.zeros_like(B)
    for j in range(g.num_u):
        e = np.zeros(g.num_u)
        e[j] = eps
        cp = evaluate(StaggeredField.from_vector(g, base + e), model, ref)
        cm = evaluate(StaggeredField.from_vector(g, base - e), model, ref)
        fd[:, j] = (cp.residual.values - cm.residual.values) / (2 * eps)
    assert np.abs(fd - B).max() <= 1e-6 * np.abs(B).max()


def test_constant_template_gauge_null_vector():
    """A constant template makes total deformed volume invariant, so the
    constant cell vector is an exact left null vector of the Jacobian."""
    g = unit_geometry(10)
    model = fit(CellField(g, np.ones(g.num_cells)))
    ref = smooth_image(g, seed=5)
    u = random_displacement(g, np.random.default_rng(4))
    B = evaluate(u, model, ref).jacobian
    defect = np.abs(B.T @ np.ones(g.num_cells)).max()
    assert defect <= 1e-12 / g.h  # entries scale like 1/h


def test_residual_at_analytic_solution_is_small():
    """The known deformation satisfies the constraint to discretization error."""
    prob = build_ex1(32)
    model = fit(prob.template)
    ce = evaluate(prob.ground_truth, model, prob.reference)
    assert np.abs(ce.residual.values).max() <= 0.1
    # and shrinks by about 4x per refinement
    prob2 = build_ex1(64)
    ce2 = evaluate(prob2.ground_truth, fit(prob2.template), prob2.reference)
    ratio = np.abs(ce.residual.values).max() / np.abs(ce2.residual.values).max()
    assert 3.0 <= ratio <= 5.0


def test_evaluate_rejects_mismatched_reference():
    g = unit_geometry(6)
    _, model = fitted_smooth_template(g, seed=0)
    with pytest.raises(ValueError):
        evaluate(StaggeredField.zeros(g), model, smooth_image(unit_geometry(8)))


def test_jacobian_row_support_is_local():
    g = unit_geometry(12)
    _, model = fitted_smooth_template(g, seed=2)
    ref = smooth_image(g, seed=3)
    u = random_displacement(g, np.random.default_rng(6))
    B = evaluate(u, model, ref).jacobian
    per_row = np.diff(B.indptr)
    assert per_row.max() <= 12
