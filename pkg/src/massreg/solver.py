"""Krylov and multigrid machinery for the saddle-point step equations.

Each outer iteration solves

    [ A   B^T ] [du]   =  rhs
    [ B   0   ] [dp]

with restarted GMRES, left-preconditioned by the block triangular
approximation

    P = [ A~   0  ]        y_u = A~^{-1} v_u,
        [ B   -C~ ],       y_p = C~^{-1} (B y_u - v_p),

where A~^{-1} is one geometric multigrid V(1,1)-cycle for the elastic block
and C~^{-1} = (B B^T)^{-1} B A B^T (B B^T)^{-1} approximates the inverse
Schur complement using a sparse LU factorization of B B^T.

The multigrid rediscretizes the elastic operator per level.  For lambda = 0
plain lexicographic Gauss-Seidel smooths well; for lambda > 0 smoothing acts
on the augmented system through the distribution matrix (see
:mod:`massreg.elastic`), whose transformed operator has Laplace-type
diagonal blocks.  Restriction uses the component stencils from
:mod:`massreg.grid`, prolongation is bilinear, and grids at or below 8 cells
per axis are solved directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from massreg import _kernels
from massreg.elastic import assemble, assemble_augmented, assemble_distribution
from massreg.grid import (GridGeometry, interior_dofs, interior_node_mask,
                          num_interior, prolong_nodes_matrix,
                          prolong_u1_matrix, prolong_u2_matrix,
                          restrict_nodes_matrix, restrict_u1_matrix,
                          restrict_u2_matrix)


class SolverError(RuntimeError):
    """Breakdown or rank deficiency inside the linear algebra layer."""


# ---------------------------------------------------------------------------
# restarted GMRES with left preconditioning

@dataclass
class GmresResult:
    x: np.ndarray
    iterations: int
    residual: float  # final preconditioned relative residual
    converged: bool


def gmres(matvec, b, precond=None, rel_tol=1e-6, max_iter=500, restart=50,
          x0=None) -> GmresResult:
    """Restarted GMRES on matvec(x) = b.

    Stops when the left-preconditioned residual satisfies
    ||M(b - K x)|| <= rel_tol * ||M b||.  Arnoldi breakdown with the residual
    still above tolerance raises :class:`SolverError`; hitting max_iter only
    flags non-convergence.
    """
    apply_m = precond if precond is not None else (lambda v: v)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()

    mb_norm = float(np.linalg.norm(apply_m(b)))
    if mb_norm == 0.0:
        return GmresResult(np.zeros(n), 0, 0.0, True)
    target = rel_tol * mb_norm

    total = 0
    while True:
        r = apply_m(b - matvec(x)) if x.any() else apply_m(b)
        beta = float(np.linalg.norm(r))
        if beta <= target:
            return GmresResult(x, total, beta / mb_norm, True)
        if total >= max_iter:
            return GmresResult(x, total, beta / mb_norm, False)

        m = restart
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta

        k = -1
        breakdown = False
        for k in range(m):
            if total >= max_iter:
                k -= 1
                break
            # copy: matvec/precond may hand back (a view of) their input
            w = np.array(apply_m(matvec(V[k])), dtype=float, copy=True)
            total += 1
            # modified Gram-Schmidt
            for i in range(k + 1):
                H[i, k] = w @ V[i]
                w -= H[i, k] * V[i]
            H[k + 1, k] = np.linalg.norm(w)
            breakdown = H[k + 1, k] < 1e-14 * beta
            if not breakdown:
                V[k + 1] = w / H[k + 1, k]
            # apply stored rotations, then generate a new one
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            cs[k] = H[k, k] / denom
            sn[k] = H[k + 1, k] / denom
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            res_est = abs(g[k + 1])
            if res_est <= target or breakdown:
                break

        if k >= 0:
            # H is upper triangular after the Givens sweep
            y = np.linalg.solve(H[: k + 1, : k + 1], g[: k + 1])
            x = x + V[: k + 1].T @ y

        r = apply_m(b - matvec(x))
        res = float(np.linalg.norm(r))
        if res <= target:
            return GmresResult(x, total, res / mb_norm, True)
        if breakdown:
            raise SolverError(
                f"GMRES breakdown after {total} iterations with relative "
                f"residual {res / mb_norm:.3e} above tolerance {rel_tol:.3e}")
        if total >= max_iter:
            return GmresResult(x, total, res / mb_norm, False)


# ---------------------------------------------------------------------------
# geometric multigrid for the elastic block

@dataclass
class MultigridOptions:
    pre_sweeps: int = 1
    post_sweeps: int = 1
    coarsest_cells: int = 8
    cycles: int = 1  # V-cycles per preconditioner application


@dataclass
class _Level:
    geom: GridGeometry
    op: sp.csr_matrix
    smooth_op: sp.csr_matrix            # op itself, or A_aug @ M
    dist: sp.csr_matrix | None          # distribution matrix for lambda > 0
    restrict: sp.csr_matrix | None      # this level -> next coarser
    prolong: sp.csr_matrix | None       # next coarser -> this level
    coarse_lu: spla.SuperLU | None


def _reduced_block(mat_u1, mat_u2, fine: GridGeometry, coarse: GridGeometry,
                   transpose: bool):
    full = sp.block_diag([mat_u1, mat_u2]).tocsr()
    rows = interior_dofs(coarse if not transpose else fine)
    cols = interior_dofs(fine if not transpose else coarse)
    return full[np.ix_(rows, cols)].tocsr()


def _interior_nodes(geom: GridGeometry) -> np.ndarray:
    return np.flatnonzero(interior_node_mask(geom))


class ElasticMultigrid:
    """V-cycle hierarchy for A (lambda = 0) or the augmented system."""

    def __init__(self, geom: GridGeometry, mu: float, lam: float,
                 options: MultigridOptions | None = None):
        self.geometry = geom
        self.mu = mu
        self.lam = lam
        self.options = options or MultigridOptions()
        self.augmented = lam > 0.0
        _kernels.warmup()
        self.levels: list[_Level] = []
        self._build()

    def _operator(self, geom: GridGeometry) -> tuple:
        if not self.augmented:
            op = assemble(geom, self.mu, self.lam).matrix_reduced
            return op, op, None
        op = assemble_augmented(geom, self.mu, self.lam)
        dist = assemble_distribution(geom, self.mu)
        smooth = (op @ dist).tocsr()
        smooth.eliminate_zeros()
        return op, smooth, dist

    def _transfers(self, fine: GridGeometry):
        coarse = fine.coarsen()
        R = _reduced_block(restrict_u1_matrix(fine), restrict_u2_matrix(fine),
                           fine, coarse, transpose=False)
        P = _reduced_block(prolong_u1_matrix(fine), prolong_u2_matrix(fine),
                           fine, coarse, transpose=True)
        if self.augmented:
            rn = restrict_nodes_matrix(fine)[np.ix_(_interior_nodes(coarse),
                                                    _interior_nodes(fine))]
            pn = prolong_nodes_matrix(fine)[np.ix_(_interior_nodes(fine),
                                                   _interior_nodes(coarse))]
            R = sp.block_diag([R, rn]).tocsr()
            P = sp.block_diag([P, pn]).tocsr()
        # operators carry an h^2 volume factor, so restricting a residual
        # to the (2h)^2-scaled coarse equation needs the ratio back
        return (4.0 * R).tocsr(), P

    def _build(self):
        geom = self.geometry
        limit = self.options.coarsest_cells
        while True:
            op, smooth, dist = self._operator(geom)
            is_coarsest = (min(geom.n1, geom.n2) <= limit
                           or geom.n1 % 2 or geom.n2 % 2)
            if is_coarsest:
                lu = spla.splu(op.tocsc())
                self.levels.append(_Level(geom, op, smooth, dist, None, None, lu))
                return
            R, P = self._transfers(geom)
            self.levels.append(_Level(geom, op, smooth, dist, R, P, None))
            geom = geom.coarsen()

    def _smooth(self, level: _Level, x: np.ndarray, b: np.ndarray, sweeps: int):
        if level.dist is None:
            _kernels.gs_sweeps(level.smooth_op, b, x, sweeps)
        else:
            # distributive relaxation: correct through x += M y with
            # Gauss-Seidel sweeps on the triangular product (A_aug M) y = r
            for _ in range(sweeps):
                r = b - level.op @ x
                y = np.zeros_like(x)
                _kernels.gs_sweeps(level.smooth_op, r, y, 1)
                x += level.dist @ y

    def _vcycle(self, depth: int, x: np.ndarray, b: np.ndarray) -> np.ndarray:
        level = self.levels[depth]
        if level.coarse_lu is not None:
            return level.coarse_lu.solve(b)
        self._smooth(level, x, b, self.options.pre_sweeps)
        residual = b - level.op @ x
        coarse_b = level.restrict @ residual
        coarse_x = self._vcycle(depth + 1, np.zeros(coarse_b.shape[0]), coarse_b)
        x += level.prolong @ coarse_x
        self._smooth(level, x, b, self.options.post_sweeps)
        return x

    def vcycle(self, b: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        """One V-cycle on the hierarchy's native unknown vector."""
        x = np.zeros(b.shape[0]) if x0 is None else np.asarray(x0, dtype=float).copy()
        return self._vcycle(0, x, b)

    @property
    def num_reduced(self) -> int:
        return num_interior(self.geometry)

    def apply_elastic_inverse(self, v_u: np.ndarray) -> np.ndarray:
        """Approximate A^{-1} v on the reduced displacement vector."""
        if self.augmented:
            nq = self.levels[0].op.shape[0] - self.num_reduced
            b = np.concatenate([v_u, np.zeros(nq)])
        else:
            b = v_u
        x = None
        for _ in range(self.options.cycles):
            x = self.vcycle(b, x)
        return x[: self.num_reduced] if self.augmented else x


def measure_contraction(mg: ElasticMultigrid, cycles: int = 10,
                        seed: int = 0) -> float:
    """Asymptotic per-cycle residual reduction on the homogeneous problem."""
    rng = np.random.default_rng(seed)
    op = mg.levels[0].op
    x = rng.standard_normal(op.shape[0])
    b = np.zeros(op.shape[0])
    factors = []
    prev = float(np.linalg.norm(op @ x))
    for _ in range(cycles):
        x = mg._vcycle(0, x, b)
        cur = float(np.linalg.norm(op @ x))
        if prev == 0.0:
            break
        factors.append(cur / prev)
        prev = cur
    return max(factors[-3:]) if len(factors) >= 3 else max(factors)


# ---------------------------------------------------------------------------
# approximate Schur complement inverse

@dataclass
class SchurData:
    B: sp.csr_matrix
    A: sp.csr_matrix
    bbt_lu: spla.SuperLU
    mass_gauge: bool = False  # constant left null vector deflated

    def solve_bbt(self, v: np.ndarray) -> np.ndarray:
        if not self.mass_gauge:
            return self.bbt_lu.solve(v)
        y = self.bbt_lu.solve(np.concatenate([v, [0.0]]))
        return y[:-1]


def build_schur(B: sp.csr_matrix, A: sp.csr_matrix) -> SchurData:
    """Factor B B^T for the commuted Schur approximation.

    A constant template makes the total deformed volume invariant, so the
    constraint Jacobian then has the constant vector as an exact left null
    vector.  That benign rank-one deficiency is deflated with a bordered
    factorization that pins the solve to mean-zero multipliers.  Any other
    numerical rank deficiency (a pivot below 1e-14 times the largest) raises
    :class:`SolverError` naming the failing pivot.
    """
    bbt = (B @ B.T).tocsc()
    detail = "factorization failed on an exactly zero pivot"
    try:
        lu = spla.splu(bbt)
    except RuntimeError:
        lu = None        # exactly singular; decide below whether it is gauge
    if lu is not None:
        piv = np.abs(lu.U.diagonal())
        bad = np.flatnonzero(piv < 1e-14 * piv.max())
        if not bad.size:
            return SchurData(B.tocsr(), A.tocsr(), lu)
        detail = (f"pivot index {int(bad[0])} is {piv[bad[0]]:.3e} "
                  f"against max {piv.max():.3e}")

    m = B.shape[0]
    gauge_defect = float(np.abs(B.T @ np.ones(m)).max())
    scale = float(np.abs(B).max()) if B.nnz else 0.0
    if gauge_defect <= 1e-10 * max(1.0, scale):
        ones = np.ones((m, 1))
        bordered = sp.bmat([[bbt, ones], [ones.T, None]], format="csc")
        return SchurData(B.tocsr(), A.tocsr(), spla.splu(bordered),
                         mass_gauge=True)
    raise SolverError(f"B B^T is rank deficient: {detail}")


def apply_schur_inverse(schur: SchurData, v: np.ndarray) -> np.ndarray:
    """C~^{-1} v = (B B^T)^{-1} B A B^T (B B^T)^{-1} v."""
    t = schur.solve_bbt(np.asarray(v, dtype=float))
    t = schur.B @ (schur.A @ (schur.B.T @ t))
    return schur.solve_bbt(t)


# ---------------------------------------------------------------------------
# KKT operator and preconditioner

def kkt_matvec(A: sp.csr_matrix, B: sp.csr_matrix):
    n = A.shape[0]

    def mv(xy: np.ndarray) -> np.ndarray:
        u = xy[:n]
        p = xy[n:]
        return np.concatenate([A @ u + B.T @ p, B @ u])

    return mv


def assemble_kkt(A: sp.csr_matrix, B: sp.csr_matrix) -> sp.csr_matrix:
    return sp.bmat([[A, B.T], [B, None]], format="csr")


@dataclass
class KKTPreconditioner:
    """Block triangular preconditioner around multigrid and Schur pieces.

    schur_solve replaces the commuted approximate inverse when given.  With
    exact elastic and Schur inverses the preconditioned operator has minimal
    polynomial degree two, so Krylov iteration counts certify the block
    wiring.
    """

    elastic_solve: object        # callable v_u -> approximate A^{-1} v_u
    schur: SchurData
    schur_solve: object = None   # callable v_p -> approximate C^{-1} v_p
    n: int = field(init=False, default=0)

    def __post_init__(self):
        self.n = self.schur.B.shape[1]

    def apply(self, v: np.ndarray) -> np.ndarray:
        v_u = v[: self.n]
        v_p = v[self.n:]
        y_u = self.elastic_solve(v_u)
        w = self.schur.B @ y_u - v_p
        if self.schur_solve is not None:
            y_p = self.schur_solve(w)
        else:
            y_p = apply_schur_inverse(self.schur, w)
        return np.concatenate([y_u, y_p])

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.apply(v)
