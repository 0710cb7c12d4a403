"""Discrete mass-preservation constraint.

Each grid cell, deformed by moving its four corners with the averaged
displacement, is a quadrilateral; its signed area over h^2 is the discrete
Jacobian determinant

    V(u) = area(deformed cell) / h^2,

computed with the shoelace formula on corner offsets from the cell center
(corners ordered counterclockwise SW, SE, NE, NW).  Corner displacements are
the two-point averages of the adjacent edge unknowns; on wall nodes the ghost
rule makes the normal component vanish identically, so corners never leave
the wall in the normal direction.

The constraint ties the deformed template to the reference density cell by
cell:

    c(u) = V(u) * T(x + P u) - R,

and its Jacobian combines the shoelace gradient with the chain rule through
the cell-center shift:

    c'(u) = diag(T(phi)) V'(u) + diag(V) [diag(dT/dx1) P1 + diag(dT/dx2) P2].

Every row touches at most 12 edge unknowns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from massreg.grid import (CellField, GridGeometry, StaggeredField, _coo, _idx,
                          p_u1_to_cells, p_u2_to_cells)
from massreg.image import BSplineImage, warp, warp_derivative

_CORNERS = ((0, 0), (1, 0), (1, 1), (0, 1))  # (di, dj): SW, SE, NE, NW


def _corner_displacements(u: StaggeredField):
    """Displacements (U1, U2) of all nodes; wall-normal components are zero."""
    g = u.geometry
    m1 = u.u1_matrix()
    m2 = u.u2_matrix()
    U1 = np.zeros(g.node_shape)
    U1[:, 1:-1] = 0.5 * (m1[:, :-1] + m1[:, 1:])
    U2 = np.zeros(g.node_shape)
    U2[1:-1, :] = 0.5 * (m2[:-1, :] + m2[1:, :])
    return U1, U2


def _corner_offsets(u: StaggeredField):
    """Corner coordinates relative to each cell center, per corner slot."""
    g = u.geometry
    h = g.h
    U1, U2 = _corner_displacements(u)
    xs, ys = [], []
    for di, dj in _CORNERS:
        xs.append((di - 0.5) * h + U1[dj: dj + g.n2, di: di + g.n1])
        ys.append((dj - 0.5) * h + U2[dj: dj + g.n2, di: di + g.n1])
    return xs, ys


def volume(u: StaggeredField) -> CellField:
    """Signed deformed-cell area over h^2; equals 1 at zero displacement."""
    g = u.geometry
    xs, ys = _corner_offsets(u)
    area = np.zeros(g.cell_shape)
    for k in range(4):
        kn = (k + 1) % 4
        area += xs[k] * ys[kn] - xs[kn] * ys[k]
    return CellField(g, 0.5 * area.reshape(-1) / g.h ** 2)


def volume_derivative(u: StaggeredField) -> sp.csr_matrix:
    """Jacobian of :func:`volume` as a num_cells x num_u sparse matrix."""
    g = u.geometry
    n1, n2, h = g.n1, g.n2, g.h
    xs, ys = _corner_offsets(u)
    # shoelace gradient: dA/dx_k = (y_{k+1} - y_{k-1})/2, dA/dy_k = (x_{k-1} - x_{k+1})/2
    gx = [0.5 * (ys[(k + 1) % 4] - ys[(k + 3) % 4]) / h ** 2 for k in range(4)]
    gy = [0.5 * (xs[(k + 3) % 4] - xs[(k + 1) % 4]) / h ** 2 for k in range(4)]

    cl = _idx(g.cell_shape)
    iu1 = _idx(g.u1_shape)
    iu2 = _idx(g.u2_shape)
    b, a = np.meshgrid(np.arange(n2), np.arange(n1), indexing="ij")
    # u1 columns live in [0, num_u1), u2 columns are offset by num_u1
    rows, cols, vals = [], [], []
    for k, (di, dj) in enumerate(_CORNERS):
        ni = a + di  # node column of this corner
        nj = b + dj  # node row
        # corner x-coordinate averages u1[nj, ni-1] and u1[nj, ni]; pinned on walls
        ok = (ni >= 1) & (ni <= n1 - 1)
        for c_off in (-1, 0):
            rows.append(cl[b[ok], a[ok]])
            cols.append(iu1[nj[ok], ni[ok] + c_off])
            vals.append(0.5 * gx[k][ok])
        # corner y-coordinate averages u2[nj-1, ni] and u2[nj, ni]
        ok = (nj >= 1) & (nj <= n2 - 1)
        for r_off in (-1, 0):
            rows.append(cl[b[ok], a[ok]])
            cols.append(g.num_u1 + iu2[nj[ok] + r_off, ni[ok]])
            vals.append(0.5 * gy[k][ok])
    return _coo(rows, cols, vals, (g.num_cells, g.num_u))


def min_volume(u: StaggeredField) -> float:
    return float(volume(u).values.min())


def argmin_volume(u: StaggeredField) -> tuple[float, int]:
    """Smallest deformed volume and the flat index of its cell."""
    v = volume(u).values
    i = int(np.argmin(v))
    return float(v[i]), i


def is_diffeomorphic(u: StaggeredField, delta: float) -> bool:
    return min_volume(u) >= delta


@dataclass
class ConstraintEvaluation:
    """Residual, deformed volumes, and constraint Jacobian at one iterate."""

    residual: CellField
    volume: CellField
    jacobian: sp.csr_matrix


def evaluate(u: StaggeredField, template: BSplineImage,
             reference: CellField) -> ConstraintEvaluation:
    """Residual c(u) = V(u) * T(phi(u)) - R with its analytic Jacobian."""
    g = u.geometry
    if reference.geometry != g:
        raise ValueError("reference lives on a different grid than u")
    V = volume(u)
    warped = warp(template, u)
    g1, g2 = warp_derivative(template, u)
    c = V.values * warped.values - reference.values

    dV = volume_derivative(u)
    jac = sp.diags(warped.values) @ dV
    shift = sp.hstack([sp.diags(g1.values) @ p_u1_to_cells(g),
                       sp.diags(g2.values) @ p_u2_to_cells(g)]).tocsr()
    jac = (jac + sp.diags(V.values) @ shift).tocsr()
    jac.sum_duplicates()
    return ConstraintEvaluation(CellField(g, c), V, jac)
