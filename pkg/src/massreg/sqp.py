"""Constrained registration by inexact sequential quadratic programming.

minimize  S(u)  subject to  c(u) = V(u) T(phi(u)) - R = 0,  min V(u) >= delta.

Each outer iteration solves the KKT system

    [ A      B(u)^T ] [du]     [ A u + B^T p ]
    [ B(u)   0      ] [dp] = - [ c(u)        ]

inexactly with preconditioned GMRES (W = A Gauss-Newton style Hessian
model), then globalizes with a backtracking line search on the augmented
Lagrangian merit

    g(u) = S(u) + <p, c(u)> + sigma/2 ||c(u)||^2      (p frozen during the
                                                       backtracking),

accepting a step only if it also keeps every deformed cell volume above the
folding floor delta.  The penalty sigma is raised to ||p + dp||_inf + 1
whenever the directional derivative fails to be sufficiently negative and
never decreases.  Multipliers move along the same step length as u.

The multilevel driver restricts both images, registers coarse to fine with
per-level feasibility thresholds growth^level * tol, and carries (u, p)
upward by bilinear interpolation of physical values.

A quadratic-penalty Gauss-Newton solver for the unconstrained reformulation
J = h^2 ||c||^2 + alpha S is included for comparison sweeps; it shares the
line-search safeguards and the elastic multigrid preconditioner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from massreg import constraint as con
from massreg import image as im
from massreg.elastic import ElasticOperator, assemble
from massreg.grid import (CellField, GridGeometry, StaggeredField,
                          interior_dofs, prolong_cells, prolong_staggered,
                          restrict_cells)
from massreg.solver import (ElasticMultigrid, KKTPreconditioner,
                            MultigridOptions, SolverError, assemble_kkt,
                            build_schur, gmres, kkt_matvec)


class LineSearchError(RuntimeError):
    """Backtracking reached the minimal step length without acceptance."""


@dataclass
class SQPConfig:
    mu: float = 1.0
    lam: float = 0.0
    dmp_tolerance: float = 1e-3      # finest-level feasibility target
    level_tol_growth: float = 4.0    # coarse levels stop at growth^rl * tol
    max_outer: int = 50              # per level
    sigma0: float = 1.0
    eta: float = 1e-4                # Armijo fraction
    backtrack: float = 0.5
    max_backtracks: int = 20
    delta_fold: float = 0.03         # volume floor for acceptance
    inner_tol: float | None = None   # None: adaptive min(0.5, sqrt(||rhs||))
    inner_floor: float = 1e-8
    inner_max_iter: int = 500
    inner_restart: int = 50
    inner_method: str = "gmres"      # "gmres" | "direct"
    max_step_retries: int = 12        # forcing-tolerance tightenings per step
    stationarity_rtol: float = 1e-6
    alpha: float = 1e-3              # penalty weight for the regularized solver
    reg_stop_on_dmp: bool = False    # regularized solver also stops at dmp_tolerance


@dataclass
class IterationRecord:
    level: int
    k: int
    elas: float
    dmp: float
    de: float
    dmp_global: float
    tau: float
    inner_iterations: int
    merit: float
    stationarity: float = math.nan


@dataclass
class RegistrationReport:
    records: list[IterationRecord] = field(default_factory=list)
    u: StaggeredField | None = None
    p: CellField | None = None
    converged: bool = False
    stationarity: float = math.nan
    message: str = ""

    def level_records(self, level: int) -> list[IterationRecord]:
        return [r for r in self.records if r.level == level]

    def accepted_iterations(self) -> int:
        return sum(r.k > 0 for r in self.records)


def merit(elastic: ElasticOperator, u: StaggeredField, p: np.ndarray,
          sigma: float, c: np.ndarray) -> float:
    """Augmented Lagrangian merit value."""
    return elastic.energy(u) + float(p @ c) + 0.5 * sigma * float(c @ c)


def metrics(elastic: ElasticOperator, u: StaggeredField, c: np.ndarray,
            ground_truth: StaggeredField | None = None):
    """(Elas, DMP, DE, DMP_global) for one iterate."""
    elas = elastic.energy(u)
    dmp = float(np.abs(c).max())
    dmp_global = abs(float(c.sum())) * u.geometry.h ** 2
    de = math.nan
    if ground_truth is not None:
        de = float(np.abs(u.vector() - ground_truth.vector()).max())
    return elas, dmp, de, dmp_global


def _trial_residual(u: StaggeredField, template: im.BSplineImage,
                    reference: CellField):
    """Constraint residual and volumes without Jacobian assembly."""
    V = con.volume(u)
    warped = im.warp(template, u)
    return V.values * warped.values - reference.values, V.values


@dataclass
class _LevelWork:
    """Factorized per-level machinery shared across outer iterations."""

    geom: GridGeometry
    elastic: ElasticOperator
    mg: ElasticMultigrid
    template_model: im.BSplineImage
    reference: CellField
    dofs: np.ndarray

    @classmethod
    def build(cls, geom: GridGeometry, template: CellField, reference: CellField,
              config: SQPConfig) -> "_LevelWork":
        elastic = assemble(geom, config.mu, config.lam)
        mg = ElasticMultigrid(geom, config.mu, config.lam, MultigridOptions())
        return cls(geom, elastic, mg, im.fit(template), reference,
                   interior_dofs(geom))


def _has_mass_gauge(B: sp.csr_matrix) -> bool:
    """True when the constant vector is a left null vector of B.

    A (locally) constant template makes the total deformed volume invariant,
    so B^T 1 = 0 exactly: the multiplier is determined only up to a constant
    and the mean of the constraint residual is data the step cannot change.
    """
    m = B.shape[0]
    scale = float(np.abs(B).max()) if B.nnz else 0.0
    return float(np.abs(B.T @ np.ones(m)).max()) <= 1e-10 * max(1.0, scale)


def sqp_step(work: _LevelWork, u: StaggeredField, p: np.ndarray,
             ce: con.ConstraintEvaluation, config: SQPConfig,
             tol_override: float | None = None):
    """One inexact KKT solve.

    Returns (du_full, dp, inner_iters, rhs_norm, schur) where schur is the
    constraint-block factorization when the Krylov path built one (None for
    the direct path).  tol_override replaces the configured forcing
    tolerance; the outer loop uses it to re-solve more accurately when a
    loose step fails to give a descent direction.
    """
    A = work.elastic.matrix_reduced
    B = ce.jacobian[:, work.dofs].tocsr()
    n, m = A.shape[0], B.shape[0]
    u_red = u.vector()[work.dofs]
    b_u = A @ u_red + B.T @ p
    rhs = -np.concatenate([b_u, ce.residual.values])
    gauge = _has_mass_gauge(B)
    if gauge:
        # the mean of c is invariant under any du; solve the reachable part
        rhs[n:] -= rhs[n:].mean()
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros(u.geometry.num_u), np.zeros(p.shape[0]), 0, 0.0, None

    schur = None
    if config.inner_method == "direct":
        kkt = assemble_kkt(A, B)
        if gauge:
            border = np.concatenate([np.zeros(n), np.ones(m)])[:, None]
            kkt = sp.bmat([[kkt, border], [border.T, None]])
            sol = spla.splu(kkt.tocsc()).solve(np.append(rhs, 0.0))[:-1]
        else:
            sol = spla.splu(kkt.tocsc()).solve(rhs)
        iters = 0
    else:
        tol = tol_override if tol_override is not None else config.inner_tol
        if tol is None:
            tol = max(config.inner_floor, min(0.5, math.sqrt(rhs_norm)))
        schur = build_schur(B, A)
        precond = KKTPreconditioner(work.mg.apply_elastic_inverse, schur)
        result = gmres(kkt_matvec(A, B), rhs, precond=precond, rel_tol=tol,
                       max_iter=config.inner_max_iter,
                       restart=config.inner_restart)
        sol = result.x
        iters = result.iterations

    du = np.zeros(u.geometry.num_u)
    du[work.dofs] = sol[:n]
    return du, sol[n:], iters, rhs_norm, schur


def line_search(work: _LevelWork, u: StaggeredField, p: np.ndarray,
                sigma: float, du: np.ndarray, slope: float,
                g0: float, config: SQPConfig, correction=None):
    """Backtrack until Armijo decrease and the volume floor both hold.

    Returns (tau, u_new, c_new).  When the full step is rejected and a
    correction callable is given, a single corrected trial u + du +
    correction(c(u + du)) is tested against the tau = 1 Armijo bound before
    backtracking starts; the correction restores the linearized constraint
    at the stepped point, which rescues full steps that fail only through
    constraint curvature.  Raises :class:`LineSearchError` when tau would
    fall below backtrack^max_backtracks, and ValueError for a zero direction
    or a nonnegative slope.
    """
    if not np.any(du):
        raise ValueError("line search needs a nonzero direction")
    if slope >= 0:
        raise ValueError(f"direction is not a descent direction (slope {slope:.3e})")
    tau = 1.0
    base = u.vector()
    for _ in range(config.max_backtracks + 1):
        trial = StaggeredField.from_vector(work.geom, base + tau * du)
        c_trial, volumes = _trial_residual(trial, work.template_model, work.reference)
        g_trial = merit(work.elastic, trial, p, sigma, c_trial)
        if volumes.min() >= config.delta_fold and \
                g_trial <= g0 + config.eta * tau * slope:
            return tau, trial, c_trial
        if tau == 1.0 and correction is not None:
            corr = correction(c_trial)
            if corr is not None and np.any(corr):
                fixed = StaggeredField.from_vector(work.geom, base + du + corr)
                c_fix, vol_fix = _trial_residual(fixed, work.template_model,
                                                 work.reference)
                g_fix = merit(work.elastic, fixed, p, sigma, c_fix)
                if vol_fix.min() >= config.delta_fold and \
                        g_fix <= g0 + config.eta * slope:
                    return 1.0, fixed, c_fix
        tau *= config.backtrack
    raise LineSearchError(
        f"no acceptable step above tau = {tau / config.backtrack:.2e} "
        f"(merit {g0:.6e}, slope {slope:.3e})")


def register_one_level(reference: CellField, template: CellField,
                       config: SQPConfig, level: int = 0,
                       tol: float | None = None,
                       u0: StaggeredField | None = None,
                       p0: CellField | None = None,
                       ground_truth: StaggeredField | None = None,
                       report: RegistrationReport | None = None,
                       require_stationarity: bool = True) -> RegistrationReport:
    """Run the SQP iteration on one grid until the stopping rule or max_outer.

    The stopping rule is DMP <= tol together with the stationarity test;
    intermediate pyramid levels pass require_stationarity=False and stop on
    the feasibility threshold alone, since their result only seeds the next
    level.
    """
    geom = reference.geometry
    work = _LevelWork.build(geom, template, reference, config)
    tol = config.dmp_tolerance if tol is None else tol
    report = report if report is not None else RegistrationReport()

    u = (u0.copy() if u0 is not None else StaggeredField.zeros(geom)).apply_boundary()
    p = p0.values.copy() if p0 is not None else np.zeros(geom.num_cells)
    sigma = config.sigma0
    if con.min_volume(u) < config.delta_fold:
        raise ValueError("initial displacement violates the volume floor")

    A = work.elastic.matrix_reduced
    tau, inner = math.nan, 0
    # problem-scale stationarity tolerance: the raw image mismatch is the
    # constraint residual at zero displacement, so warm starts stop at the
    # same absolute scale as cold runs on the same images
    c0 = con.evaluate(StaggeredField.zeros(geom), work.template_model,
                      work.reference).residual.values
    stat_tol = config.stationarity_rtol * (1.0 + float(np.linalg.norm(c0)))
    tighten = 1.0
    converged = False
    message = ""

    for k in range(config.max_outer + 1):
        ce = con.evaluate(u, work.template_model, work.reference)
        elas, dmp, de, dmp_g = metrics(work.elastic, u, ce.residual.values, ground_truth)
        g_now = merit(work.elastic, u, p, sigma, ce.residual.values)
        u_red = u.vector()[work.dofs]
        grad_l = A @ u_red + ce.jacobian[:, work.dofs].T @ p
        stat = float(np.abs(grad_l).max())
        if dmp <= tol and stat > stat_tol:
            # the multiplier carried by the iteration lags behind the
            # displacement; certify stationarity with the least-squares
            # multiplier of the current point instead
            B = ce.jacobian[:, work.dofs].tocsr()
            try:
                p_ls = build_schur(B, A).solve_bbt(-(B @ (A @ u_red)))
            except SolverError:
                p_ls = None
            if p_ls is not None:
                g_ls = A @ u_red + B.T @ p_ls
                if float(np.abs(g_ls).max()) < stat:
                    p, grad_l = p_ls, g_ls
                    stat = float(np.abs(g_ls).max())
                    g_now = merit(work.elastic, u, p, sigma, ce.residual.values)
        report.records.append(IterationRecord(level, k, elas, dmp, de, dmp_g,
                                              tau, inner, g_now, stat))
        if dmp <= tol and (stat <= stat_tol or not require_stationarity):
            converged = True
            break
        if k == config.max_outer:
            message = (f"level {level}: max_outer reached with "
                       f"DMP {dmp:.3e}, stationarity {stat:.3e}")
            break

        # One accepted step per outer iteration.  A loose forcing tolerance
        # can produce an unusable direction (zero primal part, no descent at
        # any penalty, or a line-search stall); each of those re-solves the
        # KKT system four times tighter before giving up.  The reduction
        # sticks across iterations (relaxing again after full steps), so a
        # stretch of crawling steps cannot stall on cheap, bad directions.
        c = ce.residual.values
        threshold = -1e-14 * max(1.0, abs(g_now))
        c_eff = c - c.mean() if _has_mass_gauge(ce.jacobian[:, work.dofs].tocsr()) else c
        b_norm = math.hypot(float(np.linalg.norm(grad_l)),
                            float(np.linalg.norm(c_eff)))
        base_tol = config.inner_tol
        if base_tol is None:
            base_tol = max(config.inner_floor, min(0.5, math.sqrt(b_norm)))
        tol_k = max(config.inner_floor, base_tol * tighten)
        cur = tol_k
        du = dp = None
        accepted = None
        failure = ""
        for _ in range(config.max_step_retries + 1):
            du, dp, inner, _, schur = sqp_step(work, u, p, ce, config,
                                               tol_override=tol_k)
            cur = tol_k
            exhausted = (config.inner_method == "direct"
                         or cur <= config.inner_floor * (1.0 + 1e-12))
            tol_k = max(config.inner_floor, 0.25 * cur)
            if not np.any(du):
                failure = "zero primal direction"
                if exhausted:
                    break
                continue
            Bdu = ce.jacobian @ du
            slope_base = float(grad_l @ du[work.dofs])
            pen = float(Bdu @ c)
            slope = slope_base + sigma * pen
            if slope >= threshold and pen < 0:
                # raising the penalty strengthens descent only while the
                # step reduces ||c||^2 to first order
                sigma = max(sigma, float(np.abs(p + dp).max()) + 1.0,
                            2.0 * max(slope_base, 0.0) / (-pen))
                slope = slope_base + sigma * pen
            if slope >= threshold:
                failure = (f"no descent direction (slope {slope:.3e} "
                           f"at sigma {sigma:.3e})")
                if exhausted:
                    break
                continue
            correction = None
            if schur is not None:
                Bred = ce.jacobian[:, work.dofs].tocsr()

                def correction(c_full, _s=schur, _B=Bred):
                    out = np.zeros(work.geom.num_u)
                    out[work.dofs] = -(_B.T @ _s.solve_bbt(
                        np.asarray(c_full, dtype=float)))
                    return out if np.isfinite(out).all() else None

            g_now = merit(work.elastic, u, p, sigma, c)
            try:
                accepted = line_search(work, u, p, sigma, du, slope, g_now,
                                       config, correction=correction)
                break
            except LineSearchError as exc:
                failure = str(exc)
                if exhausted:
                    break

        if accepted is None:
            if du is not None and not np.any(du) and np.any(dp):
                # the constraint block was satisfied by multiplier motion
                # alone (the first Krylov vector has no primal part); take
                # the dual update and rebuild the step from the new
                # multiplier
                p = p + dp
                tau = 1.0
                continue
            message = f"level {level}, iteration {k}: {failure}"
            break
        tau, u, _ = accepted
        p = p + tau * dp
        u.apply_boundary()
        # carry the tolerance that produced the accepted step into the next
        # iteration; crawling steps tighten it further, full steps relax it
        tighten = cur / base_tol
        if tau < 0.125:
            tighten *= 0.25
        elif tau == 1.0:
            tighten *= 2.0
        tighten = min(1.0, max(tighten, 1e-12))

    ce = con.evaluate(u, work.template_model, work.reference)
    u_red = u.vector()[work.dofs]
    stationarity = float(np.abs(A @ u_red + ce.jacobian[:, work.dofs].T @ p).max())

    report.u = u
    report.p = CellField(geom, p)
    report.converged = converged
    report.stationarity = stationarity
    if message:
        report.message = (report.message + "; " + message).lstrip("; ")
    return report


def _fit_initial(u: StaggeredField, config: SQPConfig) -> StaggeredField:
    """Scale a warm start back until it satisfies the volume floor."""
    for _ in range(30):
        if con.min_volume(u) >= config.delta_fold:
            return u
        u = StaggeredField(u.geometry, 0.5 * u.u1, 0.5 * u.u2)
    return StaggeredField.zeros(u.geometry)


def register_multilevel(reference: CellField, template: CellField,
                        config: SQPConfig, num_levels: int = 3,
                        ground_truth: StaggeredField | None = None,
                        require_stationarity: bool = False) -> RegistrationReport:
    """Coarse-to-fine registration with per-level feasibility thresholds.

    Level rl = num_levels-1 is the coarsest; level 0 the finest.  Level rl
    stops at growth^rl * dmp_tolerance.  Displacements and multipliers are
    carried upward by bilinear interpolation.

    Every level stops on its feasibility threshold; the multiplier is
    refreshed there so the reported stationarity is the best certificate of
    the returned point.  Prolongation re-injects tangential error at each
    level change, so demanding the single-level stationarity test on the
    finest level mostly re-runs work a cold solve would do anyway; pass
    require_stationarity=True to enforce it regardless.
    """
    geom = reference.geometry
    if num_levels < 1:
        raise ValueError("need at least one level")
    side = min(geom.n1, geom.n2) >> (num_levels - 1)
    if side < 4 or (min(geom.n1, geom.n2) % (1 << (num_levels - 1))):
        raise ValueError(f"{geom.n1}x{geom.n2} grid does not support "
                         f"{num_levels} levels")

    refs = im.ImagePyramid.build(reference, num_levels - 1)
    tmps = im.ImagePyramid.build(template, num_levels - 1)

    report = RegistrationReport()
    u = None
    p = None
    converged = True
    for rl in range(num_levels - 1, -1, -1):
        level_ref = refs[rl]
        level_tmp = tmps[rl]
        tol = (config.level_tol_growth ** rl) * config.dmp_tolerance
        truth = ground_truth if (rl == 0) else None
        if u is not None:
            u = _fit_initial(prolong_staggered(u, level_ref.geometry).apply_boundary(),
                             config)
            p = prolong_cells(p, level_ref.geometry)
        report = register_one_level(level_ref, level_tmp, config, level=rl,
                                    tol=tol, u0=u, p0=p, ground_truth=truth,
                                    report=report,
                                    require_stationarity=(rl == 0 and
                                                          require_stationarity))
        converged = converged and report.converged
        u, p = report.u, report.p
    report.converged = converged
    return report


def solve_regularized(reference: CellField, template: CellField,
                      config: SQPConfig,
                      ground_truth: StaggeredField | None = None) -> RegistrationReport:
    """Gauss-Newton on J(u) = h^2 ||c(u)||^2 + alpha S(u), one level.

    Stops at stationarity (gradient sup-norm below the relative tolerance),
    at max_outer, or optionally once DMP reaches dmp_tolerance.  Records use
    the same schema as the constrained solver with J in the merit column.
    """
    geom = reference.geometry
    work = _LevelWork.build(geom, template, reference, config)
    alpha = config.alpha
    h2 = geom.h ** 2
    A = work.elastic.matrix_reduced
    report = RegistrationReport()

    u = StaggeredField.zeros(geom)
    tau, inner = math.nan, 0
    stat_tol = None
    converged = False

    for k in range(config.max_outer + 1):
        ce = con.evaluate(u, work.template_model, work.reference)
        c = ce.residual.values
        elas, dmp, de, dmp_g = metrics(work.elastic, u, c, ground_truth)
        jval = h2 * float(c @ c) + alpha * elas
        report.records.append(IterationRecord(0, k, elas, dmp, de, dmp_g,
                                              tau, inner, jval))

        B = ce.jacobian[:, work.dofs].tocsr()
        u_red = u.vector()[work.dofs]
        grad = 2.0 * h2 * (B.T @ c) + alpha * (A @ u_red)
        gnorm = float(np.abs(grad).max())
        if stat_tol is None:
            stat_tol = config.stationarity_rtol * (1.0 + gnorm)
        if gnorm <= stat_tol:
            converged = True
            break
        if config.reg_stop_on_dmp and dmp <= config.dmp_tolerance:
            converged = True
            break
        if k == config.max_outer:
            report.message = f"regularized: max_outer reached with |grad| {gnorm:.3e}"
            break

        def gn_matvec(v, B=B):
            return 2.0 * h2 * (B.T @ (B @ v)) + alpha * (A @ v)

        def precond(v):
            return work.mg.apply_elastic_inverse(v) / alpha

        tol = max(config.inner_floor, min(0.5, math.sqrt(gnorm)))
        result = gmres(gn_matvec, -grad, precond=precond, rel_tol=tol,
                       max_iter=config.inner_max_iter,
                       restart=config.inner_restart)
        inner = result.iterations
        du = np.zeros(geom.num_u)
        du[work.dofs] = result.x
        slope = float(grad @ result.x)
        if slope >= 0:
            report.message = f"regularized: no descent at iteration {k}"
            break

        tau = 1.0
        base = u.vector()
        accepted = False
        for _ in range(config.max_backtracks + 1):
            trial = StaggeredField.from_vector(geom, base + tau * du)
            c_t, volumes = _trial_residual(trial, work.template_model, work.reference)
            j_t = h2 * float(c_t @ c_t) + alpha * work.elastic.energy(trial)
            if volumes.min() >= config.delta_fold and \
                    j_t <= jval + config.eta * tau * slope:
                accepted = True
                break
            tau *= config.backtrack
        if not accepted:
            report.message = f"regularized: line search failed at iteration {k}"
            break
        u = trial.apply_boundary()

    report.u = u
    report.p = CellField.zeros(geom)
    report.converged = converged
    ce = con.evaluate(u, work.template_model, work.reference)
    u_red = u.vector()[work.dofs]
    grad = 2.0 * h2 * (ce.jacobian[:, work.dofs].T @ ce.residual.values) \
        + alpha * (A @ u_red)
    report.stationarity = float(np.abs(grad).max())
    return report
