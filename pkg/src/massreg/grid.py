"""Staggered-grid geometry, fields, and mimetic difference operators.

The rectangular domain is split into n1 x n2 square cells of width h.  Scalar
quantities (densities, volumes, multipliers) live at cell centers, the two
displacement components live on the edge midpoints of a MAC-type staggering,
and divergence-type quantities live at the nodes:

    nodes   (i h,         j h)          i = 0..n1,   j = 0..n2
    cells   ((a+1/2) h,   (b+1/2) h)    a = 0..n1-1, b = 0..n2-1
    u1      ((a+1/2) h,   j h)          a = 0..n1-1, j = 0..n2
    u2      (i h,         (b+1/2) h)    i = 0..n1,   b = 0..n2-1

so u1 sits on horizontal cell edges and u2 on vertical ones.  Displacements
are constrained to zero where their lattice touches a wall normal to the
other axis: u1 vanishes on the rows j = 0 and j = n2, u2 on the columns
i = 0 and i = n1.  Where a difference or average needs a u-value beyond a
wall that carries no unknown of that component, the ghost value is the
negative of the nearest interior value, which enforces a zero wall value at
second order.

All flat arrays are row-major with the x1 index fastest.  In concatenated
displacement vectors the u1 block precedes the u2 block.

Divergence output is kept on interior nodes (wall-node rows are zero) and
the gradient is defined as minus its transpose.  With that convention the
discrete identities curl(grad f) = 0 and div(curl^T w) = 0 hold exactly,
which the saddle-point machinery in :mod:`massreg.solver` relies on.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class GridGeometry:
    """Uniform staggered grid over [origin, origin + (n1 h, n2 h)]."""

    n1: int
    n2: int
    h: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.n1 < 2 or self.n2 < 2:
            raise ValueError(f"grid needs at least 2 cells per axis, got {self.n1}x{self.n2}")
        if self.h <= 0:
            raise ValueError("cell width must be positive")

    # lattice sizes
    @property
    def num_cells(self) -> int:
        return self.n1 * self.n2

    @property
    def num_nodes(self) -> int:
        return (self.n1 + 1) * (self.n2 + 1)

    @property
    def num_u1(self) -> int:
        return self.n1 * (self.n2 + 1)

    @property
    def num_u2(self) -> int:
        return (self.n1 + 1) * self.n2

    @property
    def num_u(self) -> int:
        return self.num_u1 + self.num_u2

    @property
    def cell_shape(self) -> tuple[int, int]:
        return (self.n2, self.n1)

    @property
    def node_shape(self) -> tuple[int, int]:
        return (self.n2 + 1, self.n1 + 1)

    @property
    def u1_shape(self) -> tuple[int, int]:
        return (self.n2 + 1, self.n1)

    @property
    def u2_shape(self) -> tuple[int, int]:
        return (self.n2, self.n1 + 1)

    @property
    def extent(self) -> tuple[float, float]:
        return (self.n1 * self.h, self.n2 * self.h)

    def coarsen(self) -> "GridGeometry":
        if self.n1 % 2 or self.n2 % 2:
            raise ValueError(f"cannot halve a {self.n1}x{self.n2} grid")
        return GridGeometry(self.n1 // 2, self.n2 // 2, 2.0 * self.h, self.origin)

    # physical coordinates of the four lattices, as (X1, X2) matrices
    def cell_centers(self):
        x1 = self.origin[0] + (np.arange(self.n1) + 0.5) * self.h
        x2 = self.origin[1] + (np.arange(self.n2) + 0.5) * self.h
        return np.meshgrid(x1, x2)

    def node_coords(self):
        x1 = self.origin[0] + np.arange(self.n1 + 1) * self.h
        x2 = self.origin[1] + np.arange(self.n2 + 1) * self.h
        return np.meshgrid(x1, x2)

    def u1_coords(self):
        x1 = self.origin[0] + (np.arange(self.n1) + 0.5) * self.h
        x2 = self.origin[1] + np.arange(self.n2 + 1) * self.h
        return np.meshgrid(x1, x2)

    def u2_coords(self):
        x1 = self.origin[0] + np.arange(self.n1 + 1) * self.h
        x2 = self.origin[1] + (np.arange(self.n2) + 0.5) * self.h
        return np.meshgrid(x1, x2)


def _flat(values, shape) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape == shape:
        arr = arr.reshape(-1)
    elif arr.shape != (shape[0] * shape[1],):
        raise ValueError(f"expected shape {shape} or flat length {shape[0]*shape[1]}, got {arr.shape}")
    return np.ascontiguousarray(arr, dtype=float)


@dataclass
class CellField:
    """Scalar field on cell centers, stored flat (x1 fastest)."""

    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        self.values = _flat(self.values, self.geometry.cell_shape)

    @classmethod
    def zeros(cls, geom: GridGeometry) -> "CellField":
        return cls(geom, np.zeros(geom.num_cells))

    def as_matrix(self) -> np.ndarray:
        return self.values.reshape(self.geometry.cell_shape)

    def copy(self) -> "CellField":
        return CellField(self.geometry, self.values.copy())


@dataclass
class NodeField:
    """Scalar field on grid nodes, stored flat (x1 fastest)."""

    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        self.values = _flat(self.values, self.geometry.node_shape)

    @classmethod
    def zeros(cls, geom: GridGeometry) -> "NodeField":
        return cls(geom, np.zeros(geom.num_nodes))

    def as_matrix(self) -> np.ndarray:
        return self.values.reshape(self.geometry.node_shape)

    def copy(self) -> "NodeField":
        return NodeField(self.geometry, self.values.copy())


@dataclass
class StaggeredField:
    """Displacement field (u1, u2) on the staggered edge lattices."""

    geometry: GridGeometry
    u1: np.ndarray
    u2: np.ndarray

    def __post_init__(self):
        self.u1 = _flat(self.u1, self.geometry.u1_shape)
        self.u2 = _flat(self.u2, self.geometry.u2_shape)

    @classmethod
    def zeros(cls, geom: GridGeometry) -> "StaggeredField":
        return cls(geom, np.zeros(geom.num_u1), np.zeros(geom.num_u2))

    @classmethod
    def from_vector(cls, geom: GridGeometry, vec: np.ndarray) -> "StaggeredField":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (geom.num_u,):
            raise ValueError(f"expected vector of length {geom.num_u}, got {vec.shape}")
        return cls(geom, vec[: geom.num_u1].copy(), vec[geom.num_u1:].copy())

    @classmethod
    def sample(cls, geom: GridGeometry, f1, f2) -> "StaggeredField":
        """Sample callables f1(x1, x2), f2(x1, x2) on the component lattices."""
        x1a, x2a = geom.u1_coords()
        x1b, x2b = geom.u2_coords()
        return cls(geom, np.asarray(f1(x1a, x2a), dtype=float),
                   np.asarray(f2(x1b, x2b), dtype=float))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.u1, self.u2])

    def u1_matrix(self) -> np.ndarray:
        return self.u1.reshape(self.geometry.u1_shape)

    def u2_matrix(self) -> np.ndarray:
        return self.u2.reshape(self.geometry.u2_shape)

    def copy(self) -> "StaggeredField":
        return StaggeredField(self.geometry, self.u1.copy(), self.u2.copy())

    def apply_boundary(self) -> "StaggeredField":
        """Zero the constrained entries in place and return self."""
        m1 = self.u1_matrix()
        m1[0, :] = 0.0
        m1[-1, :] = 0.0
        m2 = self.u2_matrix()
        m2[:, 0] = 0.0
        m2[:, -1] = 0.0
        return self

    def is_boundary_constrained(self, tol: float = 0.0) -> bool:
        m1 = self.u1_matrix()
        m2 = self.u2_matrix()
        worst = max(np.abs(m1[0, :]).max(), np.abs(m1[-1, :]).max(),
                    np.abs(m2[:, 0]).max(), np.abs(m2[:, -1]).max())
        return worst <= tol


# ---------------------------------------------------------------------------
# boundary masks and reduced (interior-unknown) indexing

@functools.lru_cache(maxsize=None)
def interior_mask(geom: GridGeometry) -> np.ndarray:
    """Boolean mask over the concatenated (u1, u2) vector; True = free unknown."""
    m1 = np.ones(geom.u1_shape, dtype=bool)
    m1[0, :] = False
    m1[-1, :] = False
    m2 = np.ones(geom.u2_shape, dtype=bool)
    m2[:, 0] = False
    m2[:, -1] = False
    return np.concatenate([m1.reshape(-1), m2.reshape(-1)])


@functools.lru_cache(maxsize=None)
def interior_dofs(geom: GridGeometry) -> np.ndarray:
    return np.flatnonzero(interior_mask(geom))


def num_interior(geom: GridGeometry) -> int:
    return geom.n1 * (geom.n2 - 1) + (geom.n1 - 1) * geom.n2


def to_reduced(geom: GridGeometry, vec: np.ndarray) -> np.ndarray:
    return np.asarray(vec)[interior_dofs(geom)]


def from_reduced(geom: GridGeometry, red: np.ndarray) -> np.ndarray:
    out = np.zeros(geom.num_u)
    out[interior_dofs(geom)] = red
    return out


@functools.lru_cache(maxsize=None)
def interior_node_mask(geom: GridGeometry) -> np.ndarray:
    m = np.zeros(geom.node_shape, dtype=bool)
    m[1:-1, 1:-1] = True
    return m.reshape(-1)


# ---------------------------------------------------------------------------
# elementary difference operators (sparse matrices on flat arrays)

def _idx(shape):
    rows, cols = shape
    return np.arange(rows * cols).reshape(rows, cols)


@functools.lru_cache(maxsize=None)
def d1_u1(geom: GridGeometry) -> sp.csr_matrix:
    """x1-difference of u1, valued on the full node lattice.

    Interior node columns use the straddling pair; on the x1 walls the ghost
    rule turns the stencil into +-2/h times the adjacent value.
    """
    n1, n2, h = geom.n1, geom.n2, geom.h
    un = _idx(geom.u1_shape)
    nd = _idx(geom.node_shape)
    rows, cols, vals = [], [], []
    # interior node columns i = 1..n1-1
    j, i = np.meshgrid(np.arange(n2 + 1), np.arange(1, n1), indexing="ij")
    rows.append(nd[j, i]); cols.append(un[j, i]); vals.append(np.full(j.shape, 1.0 / h))
    rows.append(nd[j, i]); cols.append(un[j, i - 1]); vals.append(np.full(j.shape, -1.0 / h))
    # wall columns: ghost = -nearest interior
    j = np.arange(n2 + 1)
    rows.append(nd[j, 0]); cols.append(un[j, 0]); vals.append(np.full(j.shape, 2.0 / h))
    rows.append(nd[j, n1]); cols.append(un[j, n1 - 1]); vals.append(np.full(j.shape, -2.0 / h))
    return _coo(rows, cols, vals, (geom.num_nodes, geom.num_u1))


@functools.lru_cache(maxsize=None)
def d2_u2(geom: GridGeometry) -> sp.csr_matrix:
    """x2-difference of u2, valued on the full node lattice."""
    n1, n2, h = geom.n1, geom.n2, geom.h
    un = _idx(geom.u2_shape)
    nd = _idx(geom.node_shape)
    rows, cols, vals = [], [], []
    j, i = np.meshgrid(np.arange(1, n2), np.arange(n1 + 1), indexing="ij")
    rows.append(nd[j, i]); cols.append(un[j, i]); vals.append(np.full(j.shape, 1.0 / h))
    rows.append(nd[j, i]); cols.append(un[j - 1, i]); vals.append(np.full(j.shape, -1.0 / h))
    i = np.arange(n1 + 1)
    rows.append(nd[0, i]); cols.append(un[0, i]); vals.append(np.full(i.shape, 2.0 / h))
    rows.append(nd[n2, i]); cols.append(un[n2 - 1, i]); vals.append(np.full(i.shape, -2.0 / h))
    return _coo(rows, cols, vals, (geom.num_nodes, geom.num_u2))


@functools.lru_cache(maxsize=None)
def d2_u1(geom: GridGeometry) -> sp.csr_matrix:
    """x2-difference of u1, valued on cells.  Never needs ghosts."""
    n1, n2, h = geom.n1, geom.n2, geom.h
    un = _idx(geom.u1_shape)
    cl = _idx(geom.cell_shape)
    b, a = np.meshgrid(np.arange(n2), np.arange(n1), indexing="ij")
    rows = [cl[b, a], cl[b, a]]
    cols = [un[b + 1, a], un[b, a]]
    vals = [np.full(b.shape, 1.0 / h), np.full(b.shape, -1.0 / h)]
    return _coo(rows, cols, vals, (geom.num_cells, geom.num_u1))


@functools.lru_cache(maxsize=None)
def d1_u2(geom: GridGeometry) -> sp.csr_matrix:
    """x1-difference of u2, valued on cells.  Never needs ghosts."""
    n1, n2, h = geom.n1, geom.n2, geom.h
    un = _idx(geom.u2_shape)
    cl = _idx(geom.cell_shape)
    b, a = np.meshgrid(np.arange(n2), np.arange(n1), indexing="ij")
    rows = [cl[b, a], cl[b, a]]
    cols = [un[b, a + 1], un[b, a]]
    vals = [np.full(b.shape, 1.0 / h), np.full(b.shape, -1.0 / h)]
    return _coo(rows, cols, vals, (geom.num_cells, geom.num_u2))


def _coo(rows, cols, vals, shape) -> sp.csr_matrix:
    r = np.concatenate([np.asarray(x).reshape(-1) for x in rows])
    c = np.concatenate([np.asarray(x).reshape(-1) for x in cols])
    v = np.concatenate([np.asarray(x).reshape(-1) for x in vals])
    return sp.coo_matrix((v, (r, c)), shape=shape).tocsr()


# ---------------------------------------------------------------------------
# composite operators on the concatenated (u1, u2) vector

@functools.lru_cache(maxsize=None)
def div_op(geom: GridGeometry) -> sp.csr_matrix:
    """Discrete divergence, nodes x num_u.

    Rows on wall nodes are identically zero: divergence information is kept
    on interior nodes only, so that grad = -div^T pairs exactly with the
    displacement boundary conditions.  Interior rows never touch constrained
    u-entries.
    """
    d11 = d1_u1(geom)
    d22 = d2_u2(geom)
    full = sp.hstack([d11, sp.csr_matrix((geom.num_nodes, geom.num_u2))]).tocsr() \
        + sp.hstack([sp.csr_matrix((geom.num_nodes, geom.num_u1)), d22]).tocsr()
    keep = interior_node_mask(geom).astype(float)
    out = sp.diags(keep) @ full
    out.eliminate_zeros()
    return out.tocsr()


@functools.lru_cache(maxsize=None)
def grad_op(geom: GridGeometry) -> sp.csr_matrix:
    """Discrete gradient, num_u x nodes, defined as -div^T."""
    return (-div_op(geom).T).tocsr()


@functools.lru_cache(maxsize=None)
def curl_op(geom: GridGeometry) -> sp.csr_matrix:
    """Discrete scalar curl D_1^2 u2 - D_2^1 u1, cells x num_u."""
    return sp.hstack([-d2_u1(geom), d1_u2(geom)]).tocsr()


def divergence(u: StaggeredField) -> NodeField:
    return NodeField(u.geometry, div_op(u.geometry) @ u.vector())


def curl(u: StaggeredField) -> CellField:
    return CellField(u.geometry, curl_op(u.geometry) @ u.vector())


def gradient(f: NodeField) -> StaggeredField:
    return StaggeredField.from_vector(f.geometry, grad_op(f.geometry) @ f.values)


# ---------------------------------------------------------------------------
# averaging projections between lattices

@functools.lru_cache(maxsize=None)
def p_u1_to_cells(geom: GridGeometry) -> sp.csr_matrix:
    """Average u1 from the two horizontal edges of each cell (x2 pair)."""
    un = _idx(geom.u1_shape)
    cl = _idx(geom.cell_shape)
    b, a = np.meshgrid(np.arange(geom.n2), np.arange(geom.n1), indexing="ij")
    rows = [cl[b, a], cl[b, a]]
    cols = [un[b, a], un[b + 1, a]]
    vals = [np.full(b.shape, 0.5), np.full(b.shape, 0.5)]
    return _coo(rows, cols, vals, (geom.num_cells, geom.num_u1))


@functools.lru_cache(maxsize=None)
def p_u2_to_cells(geom: GridGeometry) -> sp.csr_matrix:
    """Average u2 from the two vertical edges of each cell (x1 pair)."""
    un = _idx(geom.u2_shape)
    cl = _idx(geom.cell_shape)
    b, a = np.meshgrid(np.arange(geom.n2), np.arange(geom.n1), indexing="ij")
    rows = [cl[b, a], cl[b, a]]
    cols = [un[b, a], un[b, a + 1]]
    vals = [np.full(b.shape, 0.5), np.full(b.shape, 0.5)]
    return _coo(rows, cols, vals, (geom.num_cells, geom.num_u2))


@functools.lru_cache(maxsize=None)
def p_u1_to_nodes(geom: GridGeometry) -> sp.csr_matrix:
    """Average u1 onto nodes along x1; ghost cancellation zeroes wall columns."""
    n1, n2 = geom.n1, geom.n2
    un = _idx(geom.u1_shape)
    nd = _idx(geom.node_shape)
    j, i = np.meshgrid(np.arange(n2 + 1), np.arange(1, n1), indexing="ij")
    rows = [nd[j, i], nd[j, i]]
    cols = [un[j, i - 1], un[j, i]]
    vals = [np.full(j.shape, 0.5), np.full(j.shape, 0.5)]
    return _coo(rows, cols, vals, (geom.num_nodes, geom.num_u1))


@functools.lru_cache(maxsize=None)
def p_u2_to_nodes(geom: GridGeometry) -> sp.csr_matrix:
    """Average u2 onto nodes along x2; ghost cancellation zeroes wall rows."""
    n1, n2 = geom.n1, geom.n2
    un = _idx(geom.u2_shape)
    nd = _idx(geom.node_shape)
    j, i = np.meshgrid(np.arange(1, n2), np.arange(n1 + 1), indexing="ij")
    rows = [nd[j, i], nd[j, i]]
    cols = [un[j - 1, i], un[j, i]]
    vals = [np.full(j.shape, 0.5), np.full(j.shape, 0.5)]
    return _coo(rows, cols, vals, (geom.num_nodes, geom.num_u2))


def project_to_cells(u: StaggeredField) -> tuple[CellField, CellField]:
    g = u.geometry
    return (CellField(g, p_u1_to_cells(g) @ u.u1), CellField(g, p_u2_to_cells(g) @ u.u2))


def project_to_nodes(u: StaggeredField) -> tuple[NodeField, NodeField]:
    g = u.geometry
    return (NodeField(g, p_u1_to_nodes(g) @ u.u1), NodeField(g, p_u2_to_nodes(g) @ u.u2))


# ---------------------------------------------------------------------------
# coarse <-> fine transfers
#
# Restriction stencils (fine weights gathered around each coarse site):
#   u1:  1/8 [1 . 1]      u2:  1/8 [1 2 1]     cells: 1/4 [1 1]   nodes: full
#            [2 . 2]               [. . .]                [1 1]   weighting
#            [1 . 1]               [1 2 1]
# Missing taps at walls are dropped and the remaining weights renormalized,
# so constants restrict to constants and constrained zeros stay zero.
# Prolongation is component-wise bilinear interpolation with nearest-value
# extension beyond the outermost sites, which also reproduces constants.


def _stencil_restrict(fine_shape, coarse_shape, site_offsets, taps):
    """Generic tensor-stencil restriction builder.

    site_offsets: (row_stride, col_stride, row_base, col_base) mapping coarse
    (J, A) to the fine anchor; taps: list of (dj, da, weight) around the
    anchor.  Out-of-range taps are dropped with weight renormalization.
    """
    fr, fc = fine_shape
    cr, cc = coarse_shape
    rs, cs, rb, cb = site_offsets
    fidx = _idx(fine_shape)
    cidx = _idx(coarse_shape)
    J, A = np.meshgrid(np.arange(cr), np.arange(cc), indexing="ij")
    anchor_r = rb + rs * J
    anchor_c = cb + cs * A
    rows, cols, vals = [], [], []
    wsum = np.zeros((cr, cc))
    contrib = []
    for dj, da, w in taps:
        r = anchor_r + dj
        c = anchor_c + da
        ok = (r >= 0) & (r < fr) & (c >= 0) & (c < fc)
        wsum += np.where(ok, w, 0.0)
        contrib.append((r, c, w, ok))
    for r, c, w, ok in contrib:
        rows.append(cidx[J[ok], A[ok]])
        cols.append(fidx[r[ok], c[ok]])
        vals.append(w / wsum[ok])
    return _coo(rows, cols, vals, (cr * cc, fr * fc))


@functools.lru_cache(maxsize=None)
def restrict_u1_matrix(fine: GridGeometry) -> sp.csr_matrix:
    coarse = fine.coarsen()
    # coarse u1 site (A+1/2)H, JH sits between fine columns 2A, 2A+1 at row 2J
    taps = [(0, 0, 2 / 8), (0, 1, 2 / 8),
            (-1, 0, 1 / 8), (-1, 1, 1 / 8), (1, 0, 1 / 8), (1, 1, 1 / 8)]
    return _stencil_restrict(fine.u1_shape, coarse.u1_shape, (2, 2, 0, 0), taps)


@functools.lru_cache(maxsize=None)
def restrict_u2_matrix(fine: GridGeometry) -> sp.csr_matrix:
    coarse = fine.coarsen()
    taps = [(0, 0, 2 / 8), (1, 0, 2 / 8),
            (0, -1, 1 / 8), (1, -1, 1 / 8), (0, 1, 1 / 8), (1, 1, 1 / 8)]
    return _stencil_restrict(fine.u2_shape, coarse.u2_shape, (2, 2, 0, 0), taps)


@functools.lru_cache(maxsize=None)
def restrict_cells_matrix(fine: GridGeometry) -> sp.csr_matrix:
    coarse = fine.coarsen()
    taps = [(0, 0, 0.25), (0, 1, 0.25), (1, 0, 0.25), (1, 1, 0.25)]
    return _stencil_restrict(fine.cell_shape, coarse.cell_shape, (2, 2, 0, 0), taps)


@functools.lru_cache(maxsize=None)
def restrict_nodes_matrix(fine: GridGeometry) -> sp.csr_matrix:
    coarse = fine.coarsen()
    taps = [(dj, da, (2 - abs(dj)) * (2 - abs(da)) / 16.0)
            for dj in (-1, 0, 1) for da in (-1, 0, 1)]
    return _stencil_restrict(fine.node_shape, coarse.node_shape, (2, 2, 0, 0), taps)


def _interp_weights(fine_pos, coarse_pos):
    """1D linear interpolation of coarse samples at fine positions.

    Returns (left index, right index, right weight); positions outside the
    coarse range clamp to the nearest sample.
    """
    nc = len(coarse_pos)
    idx = np.searchsorted(coarse_pos, fine_pos) - 1
    idx = np.clip(idx, 0, nc - 2)
    denom = coarse_pos[idx + 1] - coarse_pos[idx]
    w = (fine_pos - coarse_pos[idx]) / denom
    w = np.clip(w, 0.0, 1.0)
    return idx, idx + 1, w


def _bilinear_prolong(fine_shape, coarse_shape, fine_rpos, fine_cpos, coarse_rpos, coarse_cpos):
    ri0, ri1, rw = _interp_weights(fine_rpos, coarse_rpos)
    ci0, ci1, cw = _interp_weights(fine_cpos, coarse_cpos)
    fidx = _idx(fine_shape)
    cidx = _idx(coarse_shape)
    J, A = np.meshgrid(np.arange(fine_shape[0]), np.arange(fine_shape[1]), indexing="ij")
    rows, cols, vals = [], [], []
    for rsel, rwt in ((ri0, 1.0 - rw), (ri1, rw)):
        for csel, cwt in ((ci0, 1.0 - cw), (ci1, cw)):
            w = rwt[J] * cwt[A]
            keep = w != 0.0
            rows.append(fidx[J[keep], A[keep]])
            cols.append(cidx[rsel[J[keep]], csel[A[keep]]])
            vals.append(w[keep])
    return _coo(rows, cols, vals, (fine_shape[0] * fine_shape[1], coarse_shape[0] * coarse_shape[1]))


@functools.lru_cache(maxsize=None)
def prolong_u1_matrix(fine: GridGeometry) -> sp.csr_matrix:
    coarse = fine.coarsen()
    # positions in fine-h units
    return _bilinear_prolong(
        fine.u1_shape, coarse.u1_shape,
        np.arange(fine.n2 + 1.0), np.arange(fine.n1) + 0.5,
        2.0 * np.arange(coarse.n2 + 1.0), 2.0 * np.arange(coarse.n1) + 1.0)


@functools.lru_cache(maxsize=None)
def prolong_u2_matrix(fine: GridGeometry) -> sp.csr_matrix:
    coarse = fine.coarsen()
    return _bilinear_prolong(
        fine.u2_shape, coarse.u2_shape,
        np.arange(fine.n2) + 0.5, np.arange(fine.n1 + 1.0),
        2.0 * np.arange(coarse.n2) + 1.0, 2.0 * np.arange(coarse.n1 + 1.0))


@functools.lru_cache(maxsize=None)
def prolong_cells_matrix(fine: GridGeometry) -> sp.csr_matrix:
    coarse = fine.coarsen()
    return _bilinear_prolong(
        fine.cell_shape, coarse.cell_shape,
        np.arange(fine.n2) + 0.5, np.arange(fine.n1) + 0.5,
        2.0 * np.arange(coarse.n2) + 1.0, 2.0 * np.arange(coarse.n1) + 1.0)


@functools.lru_cache(maxsize=None)
def prolong_nodes_matrix(fine: GridGeometry) -> sp.csr_matrix:
    coarse = fine.coarsen()
    return _bilinear_prolong(
        fine.node_shape, coarse.node_shape,
        np.arange(fine.n2 + 1.0), np.arange(fine.n1 + 1.0),
        2.0 * np.arange(coarse.n2 + 1.0), 2.0 * np.arange(coarse.n1 + 1.0))


def restrict_staggered(u: StaggeredField) -> StaggeredField:
    fine = u.geometry
    coarse = fine.coarsen()
    return StaggeredField(coarse, restrict_u1_matrix(fine) @ u.u1,
                          restrict_u2_matrix(fine) @ u.u2)


def prolong_staggered(u: StaggeredField, fine: GridGeometry) -> StaggeredField:
    if fine.coarsen() != u.geometry:
        raise ValueError("target geometry is not the two-to-one refinement of the source")
    return StaggeredField(fine, prolong_u1_matrix(fine) @ u.u1,
                          prolong_u2_matrix(fine) @ u.u2)


def restrict_cells(f: CellField) -> CellField:
    return CellField(f.geometry.coarsen(), restrict_cells_matrix(f.geometry) @ f.values)


def prolong_cells(f: CellField, fine: GridGeometry) -> CellField:
    if fine.coarsen() != f.geometry:
        raise ValueError("target geometry is not the two-to-one refinement of the source")
    return CellField(fine, prolong_cells_matrix(fine) @ f.values)
