"""File formats for registration artifacts.

Images travel as binary PGM (P5) with a 16-bit sample depth.  Intensities
are mapped affinely from [min, max] onto [0, 65535]; the mapping is returned
to the caller so it can be recorded alongside the image (run.json).  Raster
rows are written top to bottom, so row 0 of the file is the top of the
picture while cell row 0 of a :class:`~massreg.grid.CellField` is the bottom;
the writers and readers flip consistently.

Displacement dumps are raw little-endian float64, row-major, one file per
component, with the dimensions in a one-line sidecar header next to the
payload.  This keeps them exact for test replay.

The deformed-lattice SVG draws every 2nd grid line pushed forward by the
displacement, interpolated from the staggered components to the nodes.
"""

from __future__ import annotations

import csv
import json
import os
import re

import numpy as np

from massreg.grid import CellField, GridGeometry, StaggeredField

PGM_MAXVAL = 65535


# ---------------------------------------------------------------------------
# PGM images


def quantize(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Affine map of an array onto uint16 [0, maxval]; returns (q, lo, hi)."""
    values = np.asarray(values, dtype=float)
    if not np.isfinite(values).all():
        raise ValueError("cannot quantize non-finite values")
    lo = float(values.min())
    hi = float(values.max())
    if hi > lo:
        q = np.rint((values - lo) / (hi - lo) * PGM_MAXVAL)
    elif lo > 0:
        # constant positive image: full scale, so it stays distinguishable
        # from black without the recorded (lo, hi) map
        q = np.full_like(values, PGM_MAXVAL)
    else:
        q = np.zeros_like(values)
    return q.astype(np.uint16), lo, hi


def dequantize(q: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Invert :func:`quantize` up to one quantization step."""
    return lo + np.asarray(q, dtype=float) / PGM_MAXVAL * (hi - lo)


def write_pgm(path: str, values: np.ndarray) -> tuple[float, float]:
    """Write a 2d array as 16-bit binary PGM; returns the (lo, hi) map.

    Row 0 of ``values`` is treated as the bottom of the picture.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError(f"expected a 2d array, got shape {values.shape}")
    q, lo, hi = quantize(values)
    rows, cols = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n{PGM_MAXVAL}\n".encode("ascii"))
        # PGM stores 16-bit samples big-endian, top row first.
        f.write(q[::-1].astype(">u2").tobytes())
    return lo, hi


def read_pgm(path: str) -> np.ndarray:
    """Read a binary PGM into a uint16 array, row 0 at the bottom."""
    with open(path, "rb") as f:
        data = f.read()
    # Header: magic, width, height, maxval, separated by whitespace and
    # optional '#' comments, then a single whitespace byte before the raster.
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = re.match(rb"(?:\s*(?:#[^\n]*\n)?)*(\S+)", data[pos:])
        if not m:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos += m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval <= PGM_MAXVAL:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # the single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    raster = data[pos:pos + rows * cols * dtype.itemsize]
    if len(raster) != rows * cols * dtype.itemsize:
        raise ValueError(f"{path}: raster shorter than {rows}x{cols}")
    q = np.frombuffer(raster, dtype=dtype).reshape(rows, cols)
    return q[::-1].astype(np.uint16)


def read_image(path: str) -> np.ndarray:
    """Read a PGM as floats in [0, 1] (sample / maxval against 65535)."""
    return read_pgm(path).astype(float) / PGM_MAXVAL


# ---------------------------------------------------------------------------
# Raw field dumps


def write_field(path: str, values: np.ndarray) -> None:
    """Raw little-endian float64 dump plus a one-line sidecar header."""
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.ndim != 2:
        raise ValueError(f"expected a 2d array, got shape {values.shape}")
    with open(path, "wb") as f:
        f.write(values.tobytes())
    with open(path + ".hdr", "w", encoding="ascii") as f:
        f.write(f"{values.shape[0]} {values.shape[1]} float64 little-endian row-major\n")


def read_field(path: str) -> np.ndarray:
    """Read a dump written by :func:`write_field` using its sidecar."""
    with open(path + ".hdr", "r", encoding="ascii") as f:
        header = f.readline().split()
    rows, cols = int(header[0]), int(header[1])
    values = np.fromfile(path, dtype="<f8")
    if values.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, got {values.size}")
    return values.reshape(rows, cols)


def write_displacement(outdir: str, u: StaggeredField) -> None:
    write_field(os.path.join(outdir, "u1.f64"), u.u1_matrix())
    write_field(os.path.join(outdir, "u2.f64"), u.u2_matrix())


def read_displacement(geom: GridGeometry, u1_path: str, u2_path: str) -> StaggeredField:
    u1 = read_field(u1_path)
    u2 = read_field(u2_path)
    if u1.shape != geom.u1_shape or u2.shape != geom.u2_shape:
        raise ValueError(
            f"displacement shapes {u1.shape}/{u2.shape} do not match "
            f"grid {geom.u1_shape}/{geom.u2_shape}")
    return StaggeredField(geom, u1, u2)


# ---------------------------------------------------------------------------
# CSV traces


REPORT_HEADER = ["rl", "k", "Elas", "DMP", "DE", "DMP_global", "tau",
                 "inner_iters", "merit"]
SWEEP_HEADER = ["run", "alpha", "k", "Elas", "DMP", "DE", "inner_iters",
                "avg_inner"]


def write_report_csv(path: str, records) -> None:
    """One row per recorded iteration, coarsest level first."""
    with open(path, "w", newline="", encoding="ascii") as f:
        w = csv.writer(f)
        w.writerow(REPORT_HEADER)
        for r in records:
            w.writerow([r.level, r.k, f"{r.elas:.12e}", f"{r.dmp:.12e}",
                        f"{r.de:.12e}", f"{r.dmp_global:.12e}", f"{r.tau:.6g}",
                        r.inner_iterations, f"{r.merit:.12e}"])


def write_sweep_csv(path: str, runs: list[tuple[str, float, object]]) -> None:
    """Combined trace of (label, alpha, report) runs.

    alpha is nan for the constrained run.  avg_inner repeats the run's mean
    inner-iteration count on every row so each line is self-contained.
    """
    with open(path, "w", newline="", encoding="ascii") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_HEADER)
        for label, alpha, report in runs:
            inner = [r.inner_iterations for r in report.records]
            avg = sum(inner) / len(inner) if inner else 0.0
            for r in report.records:
                w.writerow([label, f"{alpha:.6g}", r.k, f"{r.elas:.12e}",
                            f"{r.dmp:.12e}", f"{r.de:.12e}",
                            r.inner_iterations, f"{avg:.6g}"])


# ---------------------------------------------------------------------------
# Run manifest


def write_run_json(path: str, config_dict: dict, pgm_maps: dict,
                   extra: dict | None = None) -> None:
    payload = {"config": config_dict, "pgm_maps": pgm_maps}
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="ascii") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# Deformed lattice


def node_displacement(u: StaggeredField) -> tuple[np.ndarray, np.ndarray]:
    """Average the staggered components onto nodes, (n2+1, n1+1) each.

    Interior nodes take the mean of the two adjacent edge values; wall nodes
    copy the nearest edge value (constant extrapolation).
    """
    geom = u.geometry
    u1 = u.u1_matrix()  # (n2+1, n1): rows on node lines, columns on centers
    u2 = u.u2_matrix()  # (n2, n1+1): rows on centers, columns on node lines
    n1, n2 = geom.n1, geom.n2
    U1 = np.empty((n2 + 1, n1 + 1))
    U1[:, 1:-1] = 0.5 * (u1[:, :-1] + u1[:, 1:])
    U1[:, 0] = u1[:, 0]
    U1[:, -1] = u1[:, -1]
    U2 = np.empty((n2 + 1, n1 + 1))
    U2[1:-1, :] = 0.5 * (u2[:-1, :] + u2[1:, :])
    U2[0, :] = u2[0, :]
    U2[-1, :] = u2[-1, :]
    return U1, U2


def write_grid_svg(path: str, u: StaggeredField, stride: int = 2,
                   size: int = 640) -> None:
    """Deformed lattice as SVG polylines, every ``stride``-th line."""
    geom = u.geometry
    U1, U2 = node_displacement(u)
    x1 = geom.origin[0] + np.arange(geom.n1 + 1) * geom.h
    x2 = geom.origin[1] + np.arange(geom.n2 + 1) * geom.h
    X1 = x1[None, :] + U1
    X2 = x2[:, None] + U2
    # Map the undeformed domain onto the viewport with a small margin;
    # SVG y grows downward, the x2 axis grows upward.
    margin = 0.05 * max(geom.n1, geom.n2) * geom.h
    lo1, hi1 = x1[0] - margin, x1[-1] + margin
    lo2, hi2 = x2[0] - margin, x2[-1] + margin
    scale = size / max(hi1 - lo1, hi2 - lo2)
    width = (hi1 - lo1) * scale
    height = (hi2 - lo2) * scale

    def to_px(a1: np.ndarray, a2: np.ndarray) -> list[str]:
        px = (a1 - lo1) * scale
        py = (hi2 - a2) * scale
        return [f"{x:.2f},{y:.2f}" for x, y in zip(px, py)]

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.2f} {height:.2f}">',
        '<g fill="none" stroke="#1f3a5f" stroke-width="1">',
    ]
    rows = list(range(0, geom.n2 + 1, stride))
    if rows[-1] != geom.n2:
        rows.append(geom.n2)
    cols = list(range(0, geom.n1 + 1, stride))
    if cols[-1] != geom.n1:
        cols.append(geom.n1)
    for j in rows:
        pts = " ".join(to_px(X1[j, :], X2[j, :]))
        lines.append(f'<polyline points="{pts}"/>')
    for i in cols:
        pts = " ".join(to_px(X1[:, i], X2[:, i]))
        lines.append(f'<polyline points="{pts}"/>')
    lines.append("</g>")
    lines.append("</svg>")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def image_to_cells(geom: GridGeometry, values: np.ndarray) -> CellField:
    """Wrap a (n2, n1) intensity array as a cell field on ``geom``."""
    values = np.asarray(values, dtype=float)
    if values.shape != geom.cell_shape:
        raise ValueError(f"image shape {values.shape} does not match grid "
                         f"{geom.cell_shape}")
    return CellField(geom, values.reshape(-1))
