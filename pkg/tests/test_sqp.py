"""Constrained registration loop: stopping rules, safeguards, multilevel."""

import math

import numpy as np
import pytest

import massreg.sqp as sqp
from conftest import unit_geometry
from massreg.constraint import evaluate, min_volume, volume
from massreg.grid import CellField, StaggeredField, interior_dofs
from massreg.image import fit
from massreg.sqp import (LineSearchError, SQPConfig, line_search, merit,
                         metrics, register_multilevel, register_one_level,
                         solve_regularized)
from massreg.synthetic import build_ex1, build_ex2_synthetic


def test_identical_images_converge_immediately():
    prob = build_ex1(16)
    rep = register_one_level(prob.reference, prob.reference, SQPConfig())
    assert rep.converged
    assert len(rep.records) == 1
    assert rep.records[0].k == 0
    assert rep.records[0].dmp <= 1e-13
    assert not np.any(rep.u.vector())


def test_ex1_small_grid_converges():
    prob = build_ex1(16)
    rep = register_one_level(prob.reference, prob.template, SQPConfig(),
                             ground_truth=prob.ground_truth)
    assert rep.converged
    last = rep.records[-1]
    assert last.dmp <= 1e-3
    assert math.isfinite(last.de)
    assert min_volume(rep.u) >= SQPConfig().delta_fold
    ks = [r.k for r in rep.records]
    assert ks == sorted(ks) and ks[0] == 0


def test_merit_decreases_at_every_accepted_step(monkeypatch):
    """Instrumented line search: each accepted iterate lowers the merit
    evaluated with the multiplier and penalty it was accepted under, and
    respects the volume floor."""
    seen = []
    orig = sqp.line_search

    def spy(work, u, p, sigma, du, slope, g0, config, correction=None):
        tau, trial, c_trial = orig(work, u, p, sigma, du, slope, g0, config,
                                   correction)
        seen.append((g0, merit(work.elastic, trial, p, sigma, c_trial),
                     min_volume(trial)))
        return tau, trial, c_trial

    monkeypatch.setattr(sqp, "line_search", spy)
    prob = build_ex1(16)
    cfg = SQPConfig()
    rep = register_one_level(prob.reference, prob.template, cfg)
    assert rep.converged and seen
    for g0, g_new, minv in seen:
        assert g_new < g0
        assert minv >= cfg.delta_fold


def test_folding_direction_is_cut_back():
    """A descent direction scaled to fold cells at full step is only accepted
    at a step length that keeps every volume above the floor."""
    prob = build_ex1(8)
    cfg = SQPConfig()
    work = sqp._LevelWork.build(prob.geometry, prob.template, prob.reference,
                                cfg)
    u = StaggeredField.zeros(prob.geometry)
    p = np.zeros(prob.geometry.num_cells)
    sigma = 1.0
    ce = evaluate(u, work.template_model, prob.reference)
    c0 = ce.residual.values
    g0 = merit(work.elastic, u, p, sigma, c0)
    grad = work.elastic.matrix @ u.vector() + ce.jacobian.T @ (p + sigma * c0)
    dofs = interior_dofs(prob.geometry)
    d = np.zeros(prob.geometry.num_u)
    d[dofs] = -grad[dofs]
    # scale until the full step folds a cell
    beta = 1.0
    for _ in range(60):
        trial = StaggeredField.from_vector(prob.geometry, beta * d)
        if volume(trial).values.min() < 0:
            break
        beta *= 2.0
    du = beta * d
    assert volume(StaggeredField.from_vector(prob.geometry, du)).values.min() < 0
    slope = float(grad @ du)
    assert slope < 0
    tau, accepted, c_acc = line_search(work, u, p, sigma, du, slope, g0, cfg)
    assert tau < 1.0
    assert min_volume(accepted) >= cfg.delta_fold
    assert merit(work.elastic, accepted, p, sigma, c_acc) < g0


def test_line_search_rejects_bad_directions():
    prob = build_ex1(8)
    cfg = SQPConfig()
    work = sqp._LevelWork.build(prob.geometry, prob.template, prob.reference,
                                cfg)
    u = StaggeredField.zeros(prob.geometry)
    p = np.zeros(prob.geometry.num_cells)
    c0 = evaluate(u, work.template_model, prob.reference).residual.values
    g0 = merit(work.elastic, u, p, 1.0, c0)
    with pytest.raises(ValueError):
        line_search(work, u, p, 1.0, np.zeros(prob.geometry.num_u), -1.0, g0,
                    cfg)
    with pytest.raises(ValueError):
        line_search(work, u, p, 1.0, np.ones(prob.geometry.num_u), 1.0, g0,
                    cfg)


def test_feasibility_only_stop_is_earlier():
    prob = build_ex1(16)
    full = register_one_level(prob.reference, prob.template, SQPConfig())
    feas = register_one_level(prob.reference, prob.template, SQPConfig(),
                              require_stationarity=False)
    assert feas.converged
    assert feas.records[-1].dmp <= 1e-3
    assert len(feas.records) <= len(full.records)


def test_warm_start_at_solution_stops_immediately():
    prob = build_ex1(16)
    first = register_one_level(prob.reference, prob.template, SQPConfig(),
                               require_stationarity=False)
    again = register_one_level(prob.reference, prob.template, SQPConfig(),
                               u0=first.u, p0=first.p,
                               require_stationarity=False)
    assert again.converged
    assert len(again.records) == 1


def test_direct_inner_method_converges():
    prob = build_ex1(12)
    rep = register_one_level(prob.reference, prob.template,
                             SQPConfig(inner_method="direct"))
    assert rep.converged
    assert rep.records[-1].dmp <= 1e-3


def test_records_schema_and_metrics():
    prob = build_ex1(16)
    rep = register_one_level(prob.reference, prob.template, SQPConfig(),
                             ground_truth=prob.ground_truth)
    for r in rep.records:
        assert r.level == 0
        assert r.elas >= 0 and r.dmp >= 0
        assert math.isfinite(r.merit)
    elastic = sqp.assemble(prob.geometry, 1.0, 0.0)
    c = evaluate(rep.u, fit(prob.template), prob.reference).residual.values
    elas, dmp, de, dmp_g = metrics(elastic, rep.u, c, prob.ground_truth)
    assert elas == pytest.approx(rep.records[-1].elas, rel=1e-12)
    assert dmp == pytest.approx(rep.records[-1].dmp, rel=1e-12)
    assert de == np.abs(rep.u.vector() - prob.ground_truth.vector()).max()
    assert abs(dmp_g) <= dmp  # integral residual is dominated by the max


def test_multilevel_ex2_meets_level_thresholds():
    prob = build_ex2_synthetic(32)
    cfg = SQPConfig()
    rep = register_multilevel(prob.reference, prob.template, cfg,
                              num_levels=2)
    assert rep.converged
    levels = [r.level for r in rep.records]
    assert levels == sorted(levels, reverse=True)
    for rl in (1, 0):
        recs = rep.level_records(rl)
        assert recs, f"no records for level {rl}"
        assert recs[-1].dmp <= cfg.level_tol_growth ** rl * cfg.dmp_tolerance
    # rows strictly increasing in (level desc, k asc)
    pairs = [(r.level, r.k) for r in rep.records]
    for a, b in zip(pairs, pairs[1:]):
        assert a[0] > b[0] or (a[0] == b[0] and a[1] < b[1])


def test_solve_regularized_descends_and_reports():
    prob = build_ex1(16)
    rep = solve_regularized(prob.reference, prob.template,
                            SQPConfig(alpha=1e-2))
    assert rep.converged
    vals = [r.merit for r in rep.records]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert rep.records[-1].dmp < rep.records[0].dmp


def test_solve_regularized_optional_feasibility_stop():
    """With a weight small enough that the penalty path crosses the
    feasibility target, the optional stop exits there instead of iterating
    on to stationarity."""
    prob = build_ex1(16)
    plain = solve_regularized(prob.reference, prob.template,
                              SQPConfig(alpha=1e-4))
    early = solve_regularized(prob.reference, prob.template,
                              SQPConfig(alpha=1e-4, reg_stop_on_dmp=True))
    assert early.converged
    assert early.records[-1].dmp <= 1e-3
    assert len(early.records) < len(plain.records)
