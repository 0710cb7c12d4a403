"""Linear elastic strain energy on the staggered grid.

For boundary-constrained displacements the strain energy with Lame constants
(mu, lambda) equals

    S(u) = 1/2 int  mu |curl u|^2 + (2 mu + lambda) (div u)^2,

so the discrete energy is assembled from the mimetic curl and divergence as
a weighted Gram matrix

    A = h^2 (mu C^T C + (2 mu + lambda) D^T D),    S(u) = 1/2 <u, A u>,

with cell-based curl rows and interior-node divergence rows.  A is symmetric
positive semidefinite on the full edge lattice and positive definite on the
boundary-constrained subspace.

For lambda > 0 plain relaxation degrades, so the solver works with an
equivalent augmented first-order system in (u, q), q = -lambda div u on
interior nodes:

    A_aug = h^2 [ mu C^T C + 2 mu D^T D   -D^T      ]
                [ D                        I/lambda ]

together with the distribution matrix

    M = [ I      D^T        ]
        [ mu D   2 mu D D^T ].

Because C D^T = 0 holds exactly, A_aug M is block lower triangular with
Laplace-type diagonal blocks, which is what makes collective Gauss-Seidel on
the transformed variable an effective smoother.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from massreg.grid import (GridGeometry, StaggeredField, curl_op, div_op,
                          interior_dofs, interior_node_mask)


def _symmetrized(m: sp.spmatrix) -> sp.csr_matrix:
    # Gram products are symmetric in exact arithmetic; enforce it bitwise.
    m = m.tocsr()
    return (0.5 * (m + m.T)).tocsr()


@dataclass
class ElasticOperator:
    """Assembled strain-energy operator for one grid and one (mu, lambda)."""

    geometry: GridGeometry
    mu: float
    lam: float

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")

    @cached_property
    def curl(self) -> sp.csr_matrix:
        return curl_op(self.geometry)

    @cached_property
    def div(self) -> sp.csr_matrix:
        return div_op(self.geometry)

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """A = h^2 (mu C^T C + (2 mu + lam) D^T D) on the full edge lattice."""
        g = self.geometry
        C, D = self.curl, self.div
        A = (g.h ** 2) * (self.mu * (C.T @ C) + (2.0 * self.mu + self.lam) * (D.T @ D))
        return _symmetrized(A)

    @cached_property
    def matrix_reduced(self) -> sp.csr_matrix:
        """A restricted to interior unknowns; symmetric positive definite."""
        dofs = interior_dofs(self.geometry)
        return self.matrix[np.ix_(dofs, dofs)].tocsr()

    def energy(self, u: StaggeredField) -> float:
        v = u.vector()
        return 0.5 * float(v @ (self.matrix @ v))

    def energy_gradient(self, u: StaggeredField) -> np.ndarray:
        """Gradient A u over the full edge lattice."""
        return self.matrix @ u.vector()


def assemble(geom: GridGeometry, mu: float, lam: float) -> ElasticOperator:
    return ElasticOperator(geom, mu, lam)


def _interior_div(geom: GridGeometry) -> sp.csr_matrix:
    """Divergence as interior-nodes x interior-unknowns, no zero padding."""
    rows = np.flatnonzero(interior_node_mask(geom))
    cols = interior_dofs(geom)
    return div_op(geom)[np.ix_(rows, cols)].tocsr()


def assemble_augmented(geom: GridGeometry, mu: float, lam: float) -> sp.csr_matrix:
    """Augmented operator over (reduced u, interior-node q).

    Solving A_aug (u, q) = (b, 0) reproduces the reduced elastic solve
    A u = b with q = -lambda div u.
    """
    if lam <= 0:
        raise ValueError("the augmented form is only defined for lambda > 0")
    h2 = geom.h ** 2
    dofs = interior_dofs(geom)
    C = curl_op(geom)[:, dofs].tocsr()
    D = _interior_div(geom)
    upper_left = _symmetrized(h2 * (mu * (C.T @ C) + 2.0 * mu * (D.T @ D)))
    eye = sp.identity(D.shape[0], format="csr")
    return sp.bmat([[upper_left, -h2 * D.T],
                    [h2 * D, (h2 / lam) * eye]], format="csr")


def assemble_distribution(geom: GridGeometry, mu: float) -> sp.csr_matrix:
    """Distribution matrix M over (reduced u, interior-node q)."""
    D = _interior_div(geom)
    eye_u = sp.identity(D.shape[1], format="csr")
    return sp.bmat([[eye_u, D.T],
                    [mu * D, 2.0 * mu * (D @ D.T)]], format="csr")
