"""Cubic B-spline image model and image preprocessing.

An image is a cell-centered sample array.  The continuous model places the
spline knots at the cell centers, so with s = (x - origin)/h - 1/2 the value
is

    I(x) = sum_{i=0..3} sum_{j=0..3} B_i(t1) B_j(t2) gamma[a-1+i, b-1+j],

where a = floor(s1), t1 = s1 - a (same along x2) and B_0..B_3 are the cubic
B-spline segment polynomials

    B_0(t) = (1-t)^3/6          B_1(t) = (4 - 6t^2 + 3t^3)/6
    B_2(t) = (1 + 3t + 3t^2 - 3t^3)/6          B_3(t) = t^3/6.

The coefficients gamma come from the standard recursive prefilter (pole
sqrt(3) - 2) with whole-sample mirror boundary handling, so the model
interpolates the samples exactly; two mirror-extended coefficient layers per
side cover the half-cell margin between the outermost centers and the domain
boundary.  Queries outside the domain box are clamped to it, which keeps
line-search trial points evaluable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from massreg.grid import (CellField, GridGeometry, StaggeredField,
                          p_u1_to_cells, p_u2_to_cells, restrict_cells)


def _mirror_indices(k: np.ndarray, n: int) -> np.ndarray:
    """Fold indices into 0..n-1 by whole-sample reflection."""
    if n == 1:
        return np.zeros_like(k)
    period = 2 * n - 2
    m = np.mod(k, period)
    return np.where(m >= n, period - m, m)


def _prefilter(samples: np.ndarray) -> np.ndarray:
    """Spline coefficients with two mirror-extended layers per side."""
    c = ndimage.spline_filter1d(samples, order=3, axis=0, mode="mirror", output=np.float64)
    c = ndimage.spline_filter1d(c, order=3, axis=1, mode="mirror", output=np.float64)
    rows, cols = samples.shape
    ri = _mirror_indices(np.arange(-2, rows + 2), rows)
    ci = _mirror_indices(np.arange(-2, cols + 2), cols)
    return np.ascontiguousarray(c[np.ix_(ri, ci)])


def _basis(t: np.ndarray):
    omt = 1.0 - t
    return ((omt ** 3) / 6.0,
            (4.0 - 6.0 * t ** 2 + 3.0 * t ** 3) / 6.0,
            (1.0 + 3.0 * t + 3.0 * t ** 2 - 3.0 * t ** 3) / 6.0,
            (t ** 3) / 6.0)


def _basis_deriv(t: np.ndarray):
    omt = 1.0 - t
    return (-(omt ** 2) / 2.0,
            t * (3.0 * t - 4.0) / 2.0,
            (1.0 + 2.0 * t - 3.0 * t ** 2) / 2.0,
            (t ** 2) / 2.0)


@dataclass
class BSplineImage:
    """Interpolating cubic spline model of a cell-centered image."""

    geometry: GridGeometry
    coeffs: np.ndarray  # (n2 + 4, n1 + 4), mirror-extended

    def _locate(self, x1, x2):
        """Clamp to the domain box and split into segment index and offset."""
        g = self.geometry
        L1, L2 = g.extent
        y1 = np.clip(np.asarray(x1, dtype=float), g.origin[0], g.origin[0] + L1)
        y2 = np.clip(np.asarray(x2, dtype=float), g.origin[1], g.origin[1] + L2)
        s1 = (y1 - g.origin[0]) / g.h - 0.5
        s2 = (y2 - g.origin[1]) / g.h - 0.5
        a = np.clip(np.floor(s1).astype(np.int64), -1, g.n1 - 1)
        b = np.clip(np.floor(s2).astype(np.int64), -1, g.n2 - 1)
        return a, s1 - a, b, s2 - b

    def _tensor_eval(self, a, t1, b, t2, w1, w2):
        acc = np.zeros(np.broadcast(t1, t2).shape)
        for j in range(4):
            row = b + 1 + j
            for i in range(4):
                acc += w2[j] * w1[i] * self.coeffs[row, a + 1 + i]
        return acc

    def eval(self, x1, x2) -> np.ndarray:
        a, t1, b, t2 = self._locate(x1, x2)
        return self._tensor_eval(a, t1, b, t2, _basis(t1), _basis(t2))

    def eval_gradient(self, x1, x2):
        """Partial derivatives (d/dx1, d/dx2) of the clamped model."""
        a, t1, b, t2 = self._locate(x1, x2)
        w1, w2 = _basis(t1), _basis(t2)
        d1, d2 = _basis_deriv(t1), _basis_deriv(t2)
        g1 = self._tensor_eval(a, t1, b, t2, d1, w2) / self.geometry.h
        g2 = self._tensor_eval(a, t1, b, t2, w1, d2) / self.geometry.h
        return g1, g2


def fit(image: CellField) -> BSplineImage:
    return BSplineImage(image.geometry, _prefilter(image.as_matrix()))


def shifted_centers(u: StaggeredField):
    """Cell centers moved by the cell-averaged displacement (unclamped)."""
    g = u.geometry
    xc1, xc2 = g.cell_centers()
    y1 = xc1.reshape(-1) + p_u1_to_cells(g) @ u.u1
    y2 = xc2.reshape(-1) + p_u2_to_cells(g) @ u.u2
    return y1, y2


def warp(model: BSplineImage, u: StaggeredField) -> CellField:
    """Template intensities at the displaced cell centers."""
    y1, y2 = shifted_centers(u)
    return CellField(u.geometry, model.eval(y1, y2))


def warp_derivative(model: BSplineImage, u: StaggeredField):
    """Template gradient components at the displaced cell centers."""
    y1, y2 = shifted_centers(u)
    g1, g2 = model.eval_gradient(y1, y2)
    return CellField(u.geometry, g1), CellField(u.geometry, g2)


# ---------------------------------------------------------------------------
# pyramid and preprocessing

def coarsen(image: CellField) -> CellField:
    """Four-cell average; halves the resolution and conserves total mass."""
    return restrict_cells(image)


@dataclass
class ImagePyramid:
    """Cell images from finest (index 0) to coarsest."""

    levels: list

    @classmethod
    def build(cls, image: CellField, depth: int) -> "ImagePyramid":
        levels = [image]
        for _ in range(depth):
            levels.append(coarsen(levels[-1]))
        return cls(levels)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> CellField:
        return self.levels[i]


def smooth3x3(image: CellField, sigma: float = 0.8) -> CellField:
    """Gaussian smoothing with a 3x3 kernel."""
    sm = ndimage.gaussian_filter(image.as_matrix(), sigma=sigma, radius=1, mode="nearest")
    return CellField(image.geometry, sm)


def preprocess(reference: CellField, template: CellField, delta: float = 0.03,
               smooth: bool = False):
    """Rescale both images to [delta, 1] and equalize their total masses.

    Returns (reference, template, info).  Each image is mapped affinely onto
    [delta, 1] (a constant image maps to 1), then the template is multiplied
    by the mass ratio so the two discrete masses agree exactly.  The template
    minimum can therefore undershoot delta by at most the mass-correction
    factor.  Raises ValueError on negative intensities or zero-mass input.
    """
    if reference.geometry != template.geometry:
        raise ValueError("reference and template must share a geometry")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")

    def rescale(img: CellField, name: str) -> CellField:
        v = img.values
        if v.min() < 0:
            raise ValueError(f"{name} image has negative intensities")
        if v.max() <= 0:
            raise ValueError(f"{name} image has zero mass")
        lo, hi = v.min(), v.max()
        if hi == lo:
            return CellField(img.geometry, np.ones_like(v))
        return CellField(img.geometry, delta + (1.0 - delta) * (v - lo) / (hi - lo))

    ref = smooth3x3(reference) if smooth else reference.copy()
    tmp = smooth3x3(template) if smooth else template.copy()
    ref = rescale(ref, "reference")
    tmp = rescale(tmp, "template")
    factor = ref.values.sum() / tmp.values.sum()
    tmp = CellField(tmp.geometry, factor * tmp.values)
    info = {"mass_factor": factor, "delta": delta, "smoothed": smooth}
    return ref, tmp, info
