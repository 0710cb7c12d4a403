"""Synthetic registration problems with known analytic structure.

The primary benchmark deforms the unit square Omega = [-1/2, 1/2]^2 with
phi(x) = x + 4 (q'(x1) q(x2), q(x1) q'(x2)) built from

    q(z) = (-z^2/(8 pi) + 1/(256 pi^3) + 1/(32 pi)) cos(8 pi z)
           + z sin(8 pi z) / (32 pi^2),

whose derivatives collapse to

    q'(z)  = (z^2 - 1/4) sin(8 pi z),
    q''(z) = 2 z sin(8 pi z) + 8 pi (z^2 - 1/4) cos(8 pi z).

q' and q'' vanish on the boundary z = +-1/2, so phi keeps boundary points on
the boundary (normal components exactly; the tangential slide is of size
q(1/2) = 1/(256 pi^3) ~ 1.3e-4).  The reference density is det(grad phi) and
the template is identically one, which makes the displacement field
recoverable and the continuum constraint satisfied exactly.

A second generator produces a deterministic pair of smooth blob images with
a two-cell relative shift for multilevel experiments on [0, 1]^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from massreg.elastic import assemble
from massreg.grid import CellField, GridGeometry, StaggeredField
from massreg.image import preprocess

_PI = np.pi


def q(z):
    z = np.asarray(z, dtype=float)
    amp = -z ** 2 / (8 * _PI) + 1 / (256 * _PI ** 3) + 1 / (32 * _PI)
    return amp * np.cos(8 * _PI * z) + z * np.sin(8 * _PI * z) / (32 * _PI ** 2)


def q_prime(z):
    z = np.asarray(z, dtype=float)
    return (z ** 2 - 0.25) * np.sin(8 * _PI * z)


def q_second(z):
    z = np.asarray(z, dtype=float)
    return 2 * z * np.sin(8 * _PI * z) + 8 * _PI * (z ** 2 - 0.25) * np.cos(8 * _PI * z)


@dataclass
class AnalyticDeformation:
    """phi(x) = x + u(x) with u = 4 (q'(x1) q(x2), q(x1) q'(x2))."""

    def u1(self, x1, x2):
        return 4.0 * q_prime(x1) * q(x2)

    def u2(self, x1, x2):
        return 4.0 * q(x1) * q_prime(x2)

    def phi(self, x1, x2):
        return x1 + self.u1(x1, x2), x2 + self.u2(x1, x2)

    def grad_phi(self, x1, x2):
        """Entries ((d1 phi1, d2 phi1), (d1 phi2, d2 phi2))."""
        g11 = 1.0 + 4.0 * q_second(x1) * q(x2)
        g12 = 4.0 * q_prime(x1) * q_prime(x2)
        g21 = g12
        g22 = 1.0 + 4.0 * q(x1) * q_second(x2)
        return (g11, g12), (g21, g22)

    def det_grad(self, x1, x2):
        (g11, g12), (g21, g22) = self.grad_phi(x1, x2)
        return g11 * g22 - g12 * g21

    def displacement(self, geom: GridGeometry) -> StaggeredField:
        """Sample u on the staggered lattices, boundary entries included."""
        return StaggeredField.sample(geom, self.u1, self.u2)


@dataclass
class SyntheticProblem:
    geometry: GridGeometry
    reference: CellField
    template: CellField
    ground_truth: StaggeredField | None
    elas_max: float | None


def build_ex1(n: int, mu: float = 1.0, lam: float = 0.0) -> SyntheticProblem:
    """Analytic benchmark on n x n cells over [-1/2, 1/2]^2.

    reference = det(grad phi) at cell centers, template = 1, together with
    the sampled exact displacement and its discrete strain energy (an upper
    bound for the energy of any recovered solution).
    """
    if n < 4:
        raise ValueError("benchmark needs at least 4 cells per axis")
    geom = GridGeometry(n, n, 1.0 / n, (-0.5, -0.5))
    deform = AnalyticDeformation()
    xc1, xc2 = geom.cell_centers()
    reference = CellField(geom, deform.det_grad(xc1, xc2))
    template = CellField(geom, np.ones(geom.num_cells))
    truth = deform.displacement(geom)
    elas_max = assemble(geom, mu, lam).energy(truth)
    return SyntheticProblem(geom, reference, template, truth, elas_max)


def build_ex2_synthetic(n: int, seed: int = 0) -> SyntheticProblem:
    """Deterministic smooth blob pair on [0, 1]^2 with a two-cell shift.

    Both images sample the same sum of Gaussians; the template samples it at
    x1 - 2h, so the apparent motion is a rightward shift by two cells.  The
    pair is returned already preprocessed (intensities in [0.03, 1], equal
    masses), ready for registration.
    """
    if n % 4:
        raise ValueError("multilevel benchmark needs n divisible by 4")
    geom = GridGeometry(n, n, 1.0 / n, (0.0, 0.0))
    rng = np.random.default_rng(seed)
    k = 7
    cx = rng.uniform(0.2, 0.8, size=k)
    cy = rng.uniform(0.2, 0.8, size=k)
    s = rng.uniform(0.05, 0.12, size=k)
    w = rng.uniform(0.4, 1.0, size=k)

    def blobs(x1, x2):
        acc = np.zeros_like(x1)
        for i in range(k):
            acc += w[i] * np.exp(-((x1 - cx[i]) ** 2 + (x2 - cy[i]) ** 2) / (2 * s[i] ** 2))
        return acc

    xc1, xc2 = geom.cell_centers()
    reference = CellField(geom, blobs(xc1, xc2))
    template = CellField(geom, blobs(xc1 - 2.0 * geom.h, xc2))
    reference, template, _ = preprocess(reference, template, delta=0.03)
    return SyntheticProblem(geom, reference, template, None, None)
