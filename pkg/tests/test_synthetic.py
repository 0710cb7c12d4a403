"""Benchmark problem builders."""

import numpy as np
import pytest

from massreg.constraint import volume
from massreg.elastic import assemble
from massreg.synthetic import AnalyticDeformation, build_ex1, build_ex2_synthetic


def test_ex1_structure():
    prob = build_ex1(32)
    g = prob.geometry
    assert (g.n1, g.n2) == (32, 32)
    assert g.origin == (-0.5, -0.5)
    assert g.h == pytest.approx(1.0 / 32)
    assert np.all(prob.template.values == 1.0)
    assert prob.reference.values.min() > 0
    assert prob.ground_truth is not None


def test_ex1_reference_is_determinant_of_truth_map():
    prob = build_ex1(48)
    x1, x2 = prob.geometry.cell_centers()
    det = AnalyticDeformation().det_grad(x1, x2)
    assert np.abs(prob.reference.values - det.reshape(-1)).max() == 0.0


def test_ex1_elas_max_is_energy_of_truth():
    prob = build_ex1(24, mu=1.0, lam=0.5)
    expect = assemble(prob.geometry, 1.0, 0.5).energy(prob.ground_truth)
    assert prob.elas_max == pytest.approx(expect, rel=1e-14)


def test_ex1_truth_keeps_volumes_positive():
    prob = build_ex1(64)
    assert volume(prob.ground_truth).values.min() > 0.03


def test_ex1_requires_minimum_size():
    with pytest.raises(ValueError):
        build_ex1(3)


def test_ex2_preprocessed_pair():
    prob = build_ex2_synthetic(64)
    r, t = prob.reference.values, prob.template.values
    assert abs(r.sum() - t.sum()) <= 1e-12 * r.sum()    # masses equalized
    assert r.min() == pytest.approx(0.03, abs=1e-15)    # offset floor
    assert r.max() == pytest.approx(1.0, abs=1e-12)
    assert t.min() > 0
    assert prob.ground_truth is None and prob.elas_max is None


def test_ex2_deterministic():
    a = build_ex2_synthetic(32, seed=3)
    b = build_ex2_synthetic(32, seed=3)
    assert np.array_equal(a.reference.values, b.reference.values)
    assert np.array_equal(a.template.values, b.template.values)


def test_ex2_seed_changes_layout():
    a = build_ex2_synthetic(32, seed=0)
    b = build_ex2_synthetic(32, seed=1)
    assert not np.array_equal(a.reference.values, b.reference.values)


def test_ex2_requires_multiple_of_four():
    with pytest.raises(ValueError):
        build_ex2_synthetic(30)
