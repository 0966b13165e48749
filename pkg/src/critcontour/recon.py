"""Slant reconstruction from a critical-contour scaffold.

A scaffold pins slant values on the occluding-boundary ring (where the
normal is perpendicular to the view direction, so the slant is pi/2)
and along rasterized critical contours.  Contour values come either
from the true slant field ("oracle" mode) or from a harmonic diffusion
of the boundary data sampled on the contours ("boundary_diffusion"
mode; note that with the ring as the only data the harmonic solution is
constant pi/2, so this mode is labeled and kept for comparison rather
than accuracy).

Inpainting solves the discrete Laplace equation on unconstrained pixels
with Dirichlet data at constrained ones (5-point stencil, direct sparse
solve).  The completion is intentionally non-unique in spirit: nothing
here asserts pointwise equality to the true slant, only comparative
quality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import spsolve

from .errors import ArgumentError, NumericalError
from .field import ScalarField
from .surface import SlantField

__all__ = [
    "Scaffold",
    "build_scaffold",
    "inpaint",
    "rms_difference",
]

HALF_PI = math.pi / 2.0

#: Residual tolerance of the Laplace solve (relative to the data range).
SOLVER_TOL = 1e-8


@dataclass
class Scaffold:
    """Dirichlet constraints for the reconstruction.

    ``constraint_values`` is valid where ``constraint_mask`` is True;
    all values lie in [0, pi/2].  ``provenance`` records which contours
    and value mode produced each constraint set.
    """

    constraint_mask: np.ndarray
    constraint_values: np.ndarray
    provenance: dict
    spacing: float = 1.0

    def __post_init__(self) -> None:
        vals = self.constraint_values[self.constraint_mask]
        if vals.size and (vals.min() < -1e-12 or vals.max() > HALF_PI + 1e-12):
            raise ArgumentError("constraint values must lie in [0, pi/2]")


def _boundary_ring(silhouette: np.ndarray) -> np.ndarray:
    return silhouette & ~ndimage.binary_erosion(silhouette)


def _rasterize(polyline: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Dense 1-px rasterization; returns (iy, ix) pixel indices."""
    pts = np.asarray(polyline, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    n = max(int(seg.sum() / 0.4) + 1, len(pts))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.linspace(0, arc[-1], n)
    x = np.interp(s, arc, pts[:, 0])
    y = np.interp(s, arc, pts[:, 1])
    ix = np.clip(np.rint(x).astype(int), 0, shape[1] - 1)
    iy = np.clip(np.rint(y).astype(int), 0, shape[0] - 1)
    return iy, ix


def _laplace_solve(values: np.ndarray, known: np.ndarray,
                   domain: np.ndarray) -> np.ndarray:
    """Harmonic fill of ``domain & ~known`` with Dirichlet data."""
    unknown = domain & ~known
    if not unknown.any():
        return values.copy()
    h, w = values.shape
    idx = -np.ones((h, w), dtype=np.int64)
    uy, ux = np.nonzero(unknown)
    idx[uy, ux] = np.arange(uy.size)

    rows, cols, data = [], [], []
    rhs = np.zeros(uy.size)
    diag = np.zeros(uy.size)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        ny, nx = uy + dy, ux + dx
        ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        ok &= domain[np.clip(ny, 0, h - 1), np.clip(nx, 0, w - 1)]
        diag += ok.astype(float)
        nb_unknown = ok & unknown[np.clip(ny, 0, h - 1), np.clip(nx, 0, w - 1)]
        rows.append(idx[uy[nb_unknown], ux[nb_unknown]])
        cols.append(idx[ny[nb_unknown], nx[nb_unknown]])
        data.append(-np.ones(int(nb_unknown.sum())))
        nb_known = ok & ~nb_unknown
        rhs[nb_known] += values[ny[nb_known], nx[nb_known]]
    rows.append(np.arange(uy.size))
    cols.append(np.arange(uy.size))
    data.append(diag)
    a = sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(uy.size, uy.size))
    sol = spsolve(a, rhs)

    residual = np.abs(a @ sol - rhs)
    scale = max(np.abs(rhs).max(), 1.0)
    if residual.max() > 1e3 * SOLVER_TOL * scale:
        raise NumericalError(
            f"Laplace solve residual {residual.max():.3e} exceeds tolerance "
            f"(scale {scale:.3e})")
    out = values.copy()
    out[uy, ux] = sol
    return out


def build_scaffold(contours: list, boundary: np.ndarray,
                   seed_values: str = "from_true_slant",
                   true_slant: SlantField | None = None,
                   provenance: dict | None = None) -> Scaffold:
    """Rasterize contours and boundary into Dirichlet constraints.

    ``boundary`` is the silhouette mask; its 1-px inner ring is always
    constrained to pi/2.  ``seed_values`` picks the contour values:
    "from_true_slant" samples ``true_slant`` along each contour;
    "from_boundary_diffusion" solves a Laplace problem from the ring
    into the domain and samples it on the contours.
    """
    silhouette = np.asarray(boundary, dtype=bool)
    shape = silhouette.shape
    ring = _boundary_ring(silhouette)
    mask = ring.copy()
    values = np.zeros(shape)
    values[ring] = HALF_PI

    if seed_values == "from_true_slant":
        if true_slant is None:
            raise ArgumentError("from_true_slant mode needs the slant field")
        source = true_slant.grid.values
    elif seed_values == "from_boundary_diffusion":
        source = _laplace_solve(values, ring, silhouette)
    else:
        raise ArgumentError(f"unknown seed_values mode {seed_values!r}")

    acc = np.zeros(shape)
    cnt = np.zeros(shape)
    for poly in contours:
        iy, ix = _rasterize(np.asarray(poly), shape)
        if not silhouette[iy, ix].all():
            raise ArgumentError("contour leaves the silhouette")
        np.add.at(acc, (iy, ix), source[iy, ix])
        np.add.at(cnt, (iy, ix), 1.0)
    on_contour = (cnt > 0) & ~ring
    values[on_contour] = np.clip(acc[on_contour] / cnt[on_contour], 0.0, HALF_PI)
    mask |= on_contour
    spacing = true_slant.grid.spacing if true_slant is not None else 1.0
    return Scaffold(
        constraint_mask=mask,
        constraint_values=values,
        provenance={"seed_values": seed_values,
                    "n_contours": len(contours), **(provenance or {})},
        spacing=spacing,
    )


def inpaint(scaffold: Scaffold, domain: np.ndarray,
            method: str = "harmonic") -> SlantField:
    """Fill the domain from the scaffold constraints.

    "harmonic" solves the Laplace equation (default, used everywhere);
    "biharmonic" delegates to scikit-image's biharmonic inpainter for a
    smoother completion.  Output values are clamped to [0, pi/2].
    """
    domain = np.asarray(domain, dtype=bool)
    if not scaffold.constraint_mask.any():
        raise ArgumentError("scaffold has no constraints")
    if method == "harmonic":
        filled = _laplace_solve(scaffold.constraint_values,
                                scaffold.constraint_mask, domain)
    elif method == "biharmonic":
        from skimage.restoration import inpaint_biharmonic

        img = scaffold.constraint_values.copy()
        missing = domain & ~scaffold.constraint_mask
        filled = inpaint_biharmonic(img, missing)
    else:
        raise ArgumentError(f"unknown inpainting method {method!r}")
    filled = np.clip(filled, 0.0, HALF_PI)
    filled[~domain] = 0.0
    grid = ScalarField(filled, spacing=scaffold.spacing, mask=domain)
    return SlantField(grid)


def rms_difference(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Root-mean-square difference over a mask."""
    d = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))[mask]
    return float(np.sqrt(np.mean(d**2))) if d.size else 0.0
