"""Synthetic height-field surfaces and their normal/slant fields.

All surfaces are height fields z = h(x, y) over the square [-1, 1]^2
under orthographic projection with view direction e3 = (0, 0, 1).  The
silhouette marks pixels where the surface exists.  Generators are pure
and deterministic: identical arguments give bit-identical outputs.

Default shape parameters below are implementation choices, not measured
data; the CLI echoes them into every output's metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .field import ScalarField, _masked_differences

__all__ = [
    "HeightField",
    "NormalField",
    "SlantField",
    "make_rotated_sigmoid",
    "make_furrow",
    "make_blob",
    "normals_of",
    "slant_of",
    "gaussian_curvature",
]

#: Slant (radians) that silhouette-adjacent pixels of a surface with a
#: true occluding boundary are expected to exceed.
BOUNDARY_SLANT_MIN = 1.0


@dataclass
class HeightField:
    """Height z over the image plane plus the silhouette mask."""

    grid: ScalarField

    @property
    def silhouette(self) -> np.ndarray:
        return self.grid.mask

    @property
    def spacing(self) -> float:
        return self.grid.spacing


@dataclass
class NormalField:
    """Per-pixel unit surface normals (n1, n2, n3), n3 >= 0."""

    n: np.ndarray  # (H, W, 3)
    silhouette: np.ndarray
    spacing: float

    def __post_init__(self) -> None:
        norms = np.linalg.norm(self.n[self.silhouette], axis=-1)
        if norms.size and not np.allclose(norms, 1.0, atol=1e-9):
            raise ArgumentError("normals must be unit length on the silhouette")
        if np.any(self.n[..., 2] < 0):
            raise ArgumentError("normals must be front-facing (n3 >= 0)")


@dataclass
class SlantField:
    """Angle between the normal and the view direction, in [0, pi/2]."""

    grid: ScalarField


def _image_grid(resolution: int) -> tuple[np.ndarray, np.ndarray, float]:
    coords = np.linspace(-1.0, 1.0, resolution)
    spacing = 2.0 / (resolution - 1)
    x, y = np.meshgrid(coords, coords)
    return x, y, spacing


def make_rotated_sigmoid(resolution: int, perturbation_amplitude: float = 0.0,
                         height: float = 0.55, steepness: float = 16.0,
                         radius: float = 0.55) -> HeightField:
    """Bump with a sigmoid radial profile, rotationally symmetric up to a
    fixed order-3 angular harmonic scaled by ``perturbation_amplitude``.

    The radial profile is ``height / (1 + exp(steepness * (r - radius)))``;
    the perturbation is confined to a Gaussian band around the flank so
    the center stays smooth.
    """
    if resolution < 64:
        raise ArgumentError("resolution must be >= 64")
    x, y, spacing = _image_grid(resolution)
    r = np.hypot(x, y)
    h = height / (1.0 + np.exp(steepness * (r - radius)))
    if perturbation_amplitude != 0.0:
        theta = np.arctan2(y, x)
        band = np.exp(-((r - radius) ** 2) / (2.0 * 0.1**2))
        h = h + perturbation_amplitude * height * np.cos(3.0 * theta) * band
    return HeightField(ScalarField(h, spacing))


def make_furrow(resolution: int, view_tilt: float = 0.0,
                dome_height: float = 0.5, radius_x: float = 0.85,
                radius_y: float = 0.6, crease_depth: float = 0.45,
                crease_width: float = 0.05) -> HeightField:
    """Elongated dome with a crease: two smooth lobes split by a valley.

    ``view_tilt`` rotates the parameterization in-plane (a cheap change
    of viewpoint under orthographic projection).  The dome is an
    elliptical half-spheroid, so the silhouette has a true occluding
    boundary; the crease is a multiplicative Gaussian trough along y = 0.
    """
    if resolution < 64:
        raise ArgumentError("resolution must be >= 64")
    if not 0.0 <= view_tilt <= 0.6:
        raise ArgumentError(f"view_tilt must be in [0, 0.6] rad, got {view_tilt}")
    x, y, spacing = _image_grid(resolution)
    c, s = math.cos(view_tilt), math.sin(view_tilt)
    xr = c * x + s * y
    yr = -s * x + c * y
    q = (xr / radius_x) ** 2 + (yr / radius_y) ** 2
    silhouette = q < 1.0
    dome = dome_height * np.sqrt(np.clip(1.0 - q, 0.0, None))
    trough = 1.0 - crease_depth * np.exp(-(yr**2) / (2.0 * crease_width**2))
    h = np.where(silhouette, dome * trough, 0.0)
    return HeightField(ScalarField(h, spacing, silhouette))


def _blob_radius(d1: np.ndarray, d2: np.ndarray, coeffs: np.ndarray,
                 base_radius: float, amplitude: float) -> np.ndarray:
    """Radius of the blob in direction (d1, d2, d3), |d| = 1.

    The perturbation is a sum of sectoral harmonics: the k-th term is
    Re/Im of (d1 + i d2)^k, which depends on the polar angle through
    sin^k(theta) and is even in d3 -- so the occluding boundary of the
    front half lies exactly on the equator, where the slant is pi/2.
    """
    zc = d1 + 1j * d2
    pert = np.zeros_like(d1, dtype=np.float64)
    power = np.ones_like(zc)
    for a_k, b_k in coeffs:
        power = power * zc
        pert = pert + a_k * power.real + b_k * power.imag
    return base_radius * (1.0 + amplitude * pert)


def make_blob(resolution: int, seed: int, n_harmonics: int = 4,
              amplitude: float = 0.08, base_radius: float = 0.8) -> HeightField:
    """Hemisphere-like surface with a seeded harmonic radius perturbation.

    The radial function R(direction) must stay positive; the first
    nonpositive sample (if any) is reported in the raised error.
    """
    if resolution < 64:
        raise ArgumentError("resolution must be >= 64")
    if n_harmonics < 1:
        raise ArgumentError("n_harmonics must be >= 1")
    rng = np.random.default_rng(seed)
    # 1/k falloff keeps high harmonics gentle.
    ks = np.arange(1, n_harmonics + 1, dtype=np.float64)
    coeffs = rng.normal(size=(n_harmonics, 2)) / ks[:, None]

    # Positivity check on a dense direction sampling.
    phi = np.linspace(0.0, 2.0 * math.pi, 720, endpoint=False)
    theta = np.linspace(0.0, math.pi / 2, 180)
    pg, tg = np.meshgrid(phi, theta)
    d1 = np.sin(tg) * np.cos(pg)
    d2 = np.sin(tg) * np.sin(pg)
    r_test = _blob_radius(d1, d2, coeffs, base_radius, amplitude)
    if np.any(r_test <= 0.0):
        bad = np.unravel_index(int(np.argmin(r_test)), r_test.shape)
        raise ArgumentError(
            "amplitude too large: radius is nonpositive at "
            f"phi={pg[bad]:.3f}, theta={tg[bad]:.3f} (R={r_test[bad]:.4f})"
        )

    x, y, spacing = _image_grid(resolution)
    r_img = np.hypot(x, y)
    # Silhouette: equatorial rim radius in the pixel's azimuthal direction.
    safe_r = np.where(r_img > 0, r_img, 1.0)
    rim = _blob_radius(x / safe_r, y / safe_r, coeffs, base_radius, amplitude)
    silhouette = r_img < rim
    silhouette[r_img == 0] = True

    # Solve |(x, y, z)| = R(direction) for z >= 0 by bisection.
    z_hi = base_radius * (1.0 + abs(amplitude) * (np.abs(coeffs).sum() + 1.0))
    lo = np.zeros_like(x)
    hi = np.full_like(x, z_hi)

    def above_surface(z: np.ndarray) -> np.ndarray:
        norm = np.sqrt(x**2 + y**2 + z**2)
        norm = np.where(norm > 0, norm, 1.0)
        return np.sqrt(x**2 + y**2 + z**2) - _blob_radius(
            x / norm, y / norm, coeffs, base_radius, amplitude) > 0

    for _ in range(60):
        mid = 0.5 * (lo + hi)
        up = above_surface(mid)
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
    h = np.where(silhouette, 0.5 * (lo + hi), 0.0)
    return HeightField(ScalarField(h, spacing, silhouette))


def normals_of(h: HeightField) -> NormalField:
    """Unit normals N = (-h_x, -h_y, 1)/|.| from central differences.

    One-sided differences are used at the silhouette boundary.
    """
    if not h.silhouette.any():
        raise ArgumentError("silhouette is empty")
    g = h.grid
    hx = _masked_differences(g.values, g.mask, g.spacing, axis=1)
    hy = _masked_differences(g.values, g.mask, g.spacing, axis=0)
    norm = np.sqrt(1.0 + hx**2 + hy**2)
    n = np.stack([-hx / norm, -hy / norm, 1.0 / norm], axis=-1)
    n[~g.mask] = (0.0, 0.0, 1.0)
    return NormalField(n, g.mask.copy(), g.spacing)


def slant_of(n: NormalField) -> SlantField:
    """Pointwise arccos(n3), clipped into [0, pi/2]."""
    slant = np.arccos(np.clip(n.n[..., 2], 0.0, 1.0))
    slant[~n.silhouette] = 0.0
    return SlantField(ScalarField(slant, n.spacing, n.silhouette.copy()))


def gaussian_curvature(h: HeightField) -> ScalarField:
    """Gaussian curvature diagnostic (h_xx h_yy - h_xy^2) / (1+|grad|^2)^2."""
    g = h.grid
    hx = _masked_differences(g.values, g.mask, g.spacing, axis=1)
    hy = _masked_differences(g.values, g.mask, g.spacing, axis=0)
    hxx = _masked_differences(hx, g.mask, g.spacing, axis=1)
    hyy = _masked_differences(hy, g.mask, g.spacing, axis=0)
    hxy = _masked_differences(hx, g.mask, g.spacing, axis=0)
    k = (hxx * hyy - hxy**2) / (1.0 + hx**2 + hy**2) ** 2
    k[~g.mask] = 0.0
    return ScalarField(k, g.spacing, g.mask.copy())
