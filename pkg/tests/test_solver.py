"""Krylov loop, elastic multigrid, Schur pieces, KKT preconditioner."""

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from conftest import random_displacement, smooth_image, unit_geometry
from massreg.constraint import evaluate
from massreg.elastic import assemble
from massreg.grid import CellField, StaggeredField, interior_dofs
from massreg.image import fit
from massreg.solver import (ElasticMultigrid, GmresResult, KKTPreconditioner,
                            MultigridOptions, SchurData, SolverError,
                            apply_schur_inverse, assemble_kkt, build_schur,
                            gmres, kkt_matvec, measure_contraction)


# ---------------------------------------------------------------------------
# gmres


def test_gmres_solves_nonsymmetric_system():
    rng = np.random.default_rng(0)
    n = 60
    A = np.eye(n) * 4.0 + 0.5 * rng.standard_normal((n, n))
    b = rng.standard_normal(n)
    res = gmres(lambda x: A @ x, b, rel_tol=1e-10, max_iter=200, restart=30)
    assert res.converged
    assert np.linalg.norm(A @ res.x - b) <= 1e-9 * np.linalg.norm(b)
    assert res.iterations <= 200


def test_gmres_zero_rhs_short_circuits():
    res = gmres(lambda x: x, np.zeros(5))
    assert res.converged and not np.any(res.x) and res.iterations == 0


def test_gmres_reports_non_convergence():
    rng = np.random.default_rng(1)
    n = 40
    A = rng.standard_normal((n, n))  # well scrambled, needs ~n iterations
    b = rng.standard_normal(n)
    res = gmres(lambda x: A @ x, b, rel_tol=1e-12, max_iter=5, restart=5)
    assert not res.converged
    assert res.residual > 1e-12


def test_gmres_preconditioned_identity_limit():
    """With the exact inverse as preconditioner, one iteration suffices."""
    rng = np.random.default_rng(2)
    n = 30
    A = np.eye(n) * 3.0 + 0.3 * rng.standard_normal((n, n))
    Ainv = np.linalg.inv(A)
    b = rng.standard_normal(n)
    res = gmres(lambda x: A @ x, b, precond=lambda v: Ainv @ v,
                rel_tol=1e-12, max_iter=10, restart=10)
    assert res.converged and res.iterations <= 2


# ---------------------------------------------------------------------------
# multigrid


def test_vcycle_reduces_elastic_residual():
    g = unit_geometry(32)
    mg = ElasticMultigrid(g, 1.0, 0.0, MultigridOptions())
    op = mg.levels[0].op
    rng = np.random.default_rng(3)
    b = rng.standard_normal(op.shape[0])
    x = mg.vcycle(b)
    r1 = np.linalg.norm(op @ x - b)
    x = mg.vcycle(b, x)
    r2 = np.linalg.norm(op @ x - b)
    assert r2 < 0.5 * r1


def test_contraction_factor_small_grid():
    g = unit_geometry(16)
    mg = ElasticMultigrid(g, 1.0, 0.0, MultigridOptions())
    rho = measure_contraction(mg, cycles=8)
    assert rho <= 0.5


def test_apply_elastic_inverse_accuracy():
    g = unit_geometry(16)
    mg = ElasticMultigrid(g, 1.0, 0.0, MultigridOptions())
    op = mg.levels[0].op
    rng = np.random.default_rng(4)
    b = rng.standard_normal(op.shape[0])
    y = mg.apply_elastic_inverse(b)
    assert np.linalg.norm(op @ y - b) <= 0.8 * np.linalg.norm(b)


def test_multigrid_augmented_path_lambda_positive():
    g = unit_geometry(16)
    mg = ElasticMultigrid(g, 1.0, 10.0, MultigridOptions())
    rho = measure_contraction(mg, cycles=8)
    assert rho <= 0.5


# ---------------------------------------------------------------------------
# Schur pieces


def _full_rank_instance(n=8, seed=5):
    g = unit_geometry(n)
    rng = np.random.default_rng(seed)
    model = fit(smooth_image(g, seed=seed))
    ref = CellField(g, 0.5 + 0.4 * rng.random(g.num_cells))
    u = random_displacement(g, rng)
    dofs = interior_dofs(g)
    B = evaluate(u, model, ref).jacobian[:, dofs].tocsr()
    A = assemble(g, 1.0, 0.0).matrix_reduced
    return g, A, B


def test_solve_bbt_full_rank():
    _, A, B = _full_rank_instance()
    schur = build_schur(B, A)
    assert not schur.mass_gauge
    rng = np.random.default_rng(6)
    v = rng.standard_normal(B.shape[0])
    y = schur.solve_bbt(v)
    assert np.abs((B @ B.T) @ y - v).max() <= 1e-8 * np.abs(v).max()


def test_solve_bbt_gauge_deflation():
    """Constant-template instances carry an exact rank-one defect that is
    deflated onto mean-zero multipliers instead of failing."""
    g = unit_geometry(8)
    model = fit(CellField(g, np.ones(g.num_cells)))
    ref = smooth_image(g, seed=7)
    u = random_displacement(g, np.random.default_rng(7))
    dofs = interior_dofs(g)
    B = evaluate(u, model, ref).jacobian[:, dofs].tocsr()
    A = assemble(g, 1.0, 0.0).matrix_reduced
    schur = build_schur(B, A)
    assert schur.mass_gauge
    rng = np.random.default_rng(8)
    v = rng.standard_normal(B.shape[0])
    v -= v.mean()                      # consistent right-hand side
    y = schur.solve_bbt(v)
    assert abs(y.mean()) <= 1e-10 * max(1.0, np.abs(y).max())
    assert np.abs((B @ B.T) @ y - v).max() <= 1e-8 * np.abs(v).max()


def test_build_schur_rejects_genuine_rank_deficiency():
    _, A, B = _full_rank_instance()
    Bd = sp.vstack([B, B[-1]]).tocsr()  # duplicated row, not a gauge defect
    with pytest.raises(SolverError):
        build_schur(Bd, A)


def test_apply_schur_inverse_commuted_formula():
    _, A, B = _full_rank_instance(n=6, seed=9)
    schur = build_schur(B, A)
    rng = np.random.default_rng(9)
    v = rng.standard_normal(B.shape[0])
    got = apply_schur_inverse(schur, v)
    bbt = (B @ B.T).toarray()
    expect = np.linalg.solve(bbt, (B @ (A @ (B.T @ np.linalg.solve(bbt, v)))))
    assert np.abs(got - expect).max() <= 1e-8 * np.abs(expect).max()


# ---------------------------------------------------------------------------
# KKT operator and preconditioner


def test_kkt_matvec_matches_assembled_matrix():
    _, A, B = _full_rank_instance(n=6, seed=10)
    K = assemble_kkt(A, B)
    mv = kkt_matvec(A, B)
    rng = np.random.default_rng(10)
    x = rng.standard_normal(K.shape[0])
    assert np.abs(mv(x) - K @ x).max() <= 1e-12 * np.abs(K @ x).max()


def test_kkt_preconditioner_exact_limit_few_iterations():
    """Exact sub-inverses make the preconditioned operator's minimal
    polynomial degree two, so a handful of Krylov steps suffice."""
    _, A, B = _full_rank_instance(n=6, seed=11)
    n_u, n_p = B.shape[1], B.shape[0]
    A_inv = np.linalg.inv(A.toarray())
    S = B.toarray() @ A_inv @ B.toarray().T
    S_inv = np.linalg.inv(S)
    schur = build_schur(B, A)
    pc = KKTPreconditioner(elastic_solve=lambda v: A_inv @ v, schur=schur,
                           schur_solve=lambda v: S_inv @ v)
    mv = kkt_matvec(A, B)
    rng = np.random.default_rng(11)
    b = rng.standard_normal(n_u + n_p)
    res = gmres(mv, b, precond=pc, rel_tol=1e-10, max_iter=10, restart=10)
    assert res.converged
    assert res.iterations <= 3


def test_kkt_preconditioner_default_schur_path():
    g, A, B = _full_rank_instance(n=8, seed=12)
    mg = ElasticMultigrid(g, 1.0, 0.0, MultigridOptions())
    pc = KKTPreconditioner(elastic_solve=mg.apply_elastic_inverse,
                           schur=build_schur(B, A))
    mv = kkt_matvec(A, B)
    rng = np.random.default_rng(12)
    b = rng.standard_normal(B.shape[1] + B.shape[0])
    res = gmres(mv, b, precond=pc, rel_tol=1e-8, max_iter=200, restart=50)
    assert res.converged
