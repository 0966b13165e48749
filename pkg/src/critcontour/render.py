"""Rendering functions on the unit sphere and their diagnostics.

A rendering function F maps unit surface normals to intensity; an image
is the pointwise application I(x, y) = F(N(x, y)).  Built-in kinds:

``lambertian``
    sum_i w_i * max(0, L_i . N).  The clamp makes attached shadows flat;
    clamped pixels are flagged separately because the kink breaks
    differentiability there.
``specular``
    sum_i w_i * max(0, (L_i - 2 (N . L_i) N) . e3) ** p.  The bracket can
    be negative; it is clamped at zero before exponentiation.
``slant_cue``
    e3 . N, i.e. n3 pointwise (a texture-foreshortening style cue).
``custom_table``
    a sampled function over the visible hemisphere, stored on a regular
    (n1, n2) grid; gaps (NaN nodes inside the unit disk) are an error
    when touched.

Any spec can additionally carry named monotone value transforms
(arctan, affine, cubic_odd), applied after the base evaluation; this
composition is exact, so rendering with the composed spec equals
transforming the rendered image pixelwise.

Admissibility of a spec is probed by sampling the visible hemisphere:
the gradient bound C1 and the concavity of the second derivative are
estimated with geodesic central differences in tangent-plane
coordinates.  Samples whose difference stencil straddles a clamp kink
are skipped (and counted): the bounds describe the smooth part of the
cue, which is also the only part used for contour scoring.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, SpecError
from .field import ScalarField
from .surface import NormalField

__all__ = [
    "RenderingSpec",
    "HemisphereTable",
    "AdmissibilityReport",
    "GenericityReport",
    "render",
    "attached_shadows",
    "check_admissibility",
    "check_genericity",
    "spec_to_json",
    "spec_from_json",
]

#: Concavity tolerance: Lambertian shading sits exactly on the boundary
#: of the concave class, so "concave" means max D2F(u,u) <= this.
CONCAVITY_TOL = 1e-6

#: Geodesic step (radians) for derivative estimation on the sphere.
SPHERE_FD_STEP = 1e-3

# Genericity thresholds (all measured quantities must exceed these).
GENERIC_MIN_ANGLE = 0.02      # rad away from orthogonality
GENERIC_MIN_DF_NORM = 1e-3
GENERIC_MIN_RANK_MARGIN = 1e-4

E3 = np.array([0.0, 0.0, 1.0])


def _monotone_transforms(transforms: tuple) -> list:
    """Resolve (name, params) pairs into (g, dg) callable pairs."""
    out = []
    for name, params in transforms:
        if name == "arctan":
            out.append((np.arctan, lambda x: 1.0 / (1.0 + x**2)))
        elif name == "affine":
            a, b = float(params.get("a", 1.0)), float(params.get("b", 0.0))
            if a <= 0:
                raise SpecError("affine transform must have positive slope")
            out.append((lambda x, a=a, b=b: a * x + b, lambda x, a=a: np.full_like(np.asarray(x, float), a)))
        elif name == "cubic_odd":
            c = float(params.get("c", 0.5))
            if c < 0:
                raise SpecError("cubic_odd transform requires c >= 0")
            out.append((lambda x, c=c: x**3 + c * x, lambda x, c=c: 3.0 * x**2 + c))
        else:
            raise SpecError(f"unknown value transform {name!r}")
    return out


class HemisphereTable:
    """Sampled rendering function on a regular (n1, n2) grid over [-1, 1]^2.

    NaN nodes strictly inside the unit disk are gaps; touching one
    during evaluation raises `SpecError`.  Nodes outside the disk are
    filled from the nearest disk node so spline evaluation has support.
    """

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise SpecError("table must be a square 2D array")
        if values.shape[0] < 8:
            raise SpecError("table resolution must be at least 8")
        self.values = values
        n = values.shape[0]
        axis = np.linspace(-1.0, 1.0, n)
        g1, g2 = np.meshgrid(axis, axis)
        on_disk = g1**2 + g2**2 <= 1.0
        self.gap_mask = on_disk & ~np.isfinite(values)
        filled = values.copy()
        invalid = ~np.isfinite(values)
        if invalid.any():
            _, (iy, ix) = ndimage.distance_transform_edt(invalid, return_indices=True)
            filled = filled[iy, ix]
        self._filled = filled
        self._axis = axis

    def __call__(self, n1: np.ndarray, n2: np.ndarray) -> np.ndarray:
        n = self.values.shape[0]
        fx = (np.asarray(n1, dtype=np.float64) + 1.0) / 2.0 * (n - 1)
        fy = (np.asarray(n2, dtype=np.float64) + 1.0) / 2.0 * (n - 1)
        if self.gap_mask.any():
            hit = ndimage.map_coordinates(
                self.gap_mask.astype(np.float64), np.array([fy, fx]),
                order=1, mode="constant") > 1e-12
            if np.any(hit):
                raise SpecError("custom table has gaps on the queried hemisphere region")
        return ndimage.map_coordinates(
            self._filled, np.array([fy, fx]), order=3, mode="nearest")

    @classmethod
    def from_function(cls, fn, resolution: int = 257) -> "HemisphereTable":
        """Sample fn(N) over the visible hemisphere onto a table."""
        axis = np.linspace(-1.0, 1.0, resolution)
        g1, g2 = np.meshgrid(axis, axis)
        rr = g1**2 + g2**2
        c1 = np.where(rr <= 1.0, g1, g1 / np.sqrt(np.maximum(rr, 1e-300)))
        c2 = np.where(rr <= 1.0, g2, g2 / np.sqrt(np.maximum(rr, 1e-300)))
        n3 = np.sqrt(np.clip(1.0 - c1**2 - c2**2, 0.0, None))
        normals = np.stack([c1, c2, n3], axis=-1)
        return cls(fn(normals))

    def save(self, path: Path | str) -> None:
        np.save(path, self.values)

    @classmethod
    def load(cls, path: Path | str) -> "HemisphereTable":
        return cls(np.load(path))


@dataclass
class RenderingSpec:
    """A parameterized rendering function F: S^2 -> R.

    ``lights`` holds (direction, weight) pairs; directions are
    normalized on construction.  ``transforms`` is an ordered tuple of
    named monotone value maps applied after the base evaluation.
    """

    kind: str
    lights: list = dc_field(default_factory=list)
    specular_exponent: float = 4.0
    table: HemisphereTable | None = None
    transforms: tuple = ()
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("lambertian", "specular", "slant_cue", "custom_table"):
            raise SpecError(f"unknown rendering kind {self.kind!r}")
        norm_lights = []
        for dir_, weight in self.lights:
            d = np.asarray(dir_, dtype=np.float64)
            n = np.linalg.norm(d)
            if n == 0:
                raise SpecError("light direction must be nonzero")
            if weight < 0:
                raise SpecError("light weight must be nonnegative")
            norm_lights.append((d / n, float(weight)))
        self.lights = norm_lights
        if self.kind in ("lambertian", "specular") and not self.lights:
            raise SpecError(f"{self.kind} spec requires at least one light")
        if self.kind == "specular" and self.specular_exponent < 1:
            raise SpecError("specular exponent must be >= 1")
        if self.kind == "custom_table" and self.table is None:
            raise SpecError("custom_table spec requires a table")
        _monotone_transforms(self.transforms)  # validate early

    # -- evaluation ---------------------------------------------------

    def _base_evaluate(self, normals: np.ndarray) -> np.ndarray:
        n = np.asarray(normals, dtype=np.float64)
        if self.kind == "lambertian":
            out = np.zeros(n.shape[:-1])
            for L, w in self.lights:
                out += w * np.maximum(0.0, n @ L)
            return out
        if self.kind == "specular":
            out = np.zeros(n.shape[:-1])
            for L, w in self.lights:
                ndl = n @ L
                bracket = L[2] - 2.0 * ndl * n[..., 2]
                out += w * np.maximum(0.0, bracket) ** self.specular_exponent
            return out
        if self.kind == "slant_cue":
            return n[..., 2].copy()
        return self.table(n[..., 0], n[..., 1])  # custom_table

    def evaluate(self, normals: np.ndarray) -> np.ndarray:
        """F(N) for an (..., 3) array of unit normals."""
        out = self._base_evaluate(normals)
        for g, _ in _monotone_transforms(self.transforms):
            out = g(out)
        return out

    def compose(self, name: str, **params) -> "RenderingSpec":
        """Spec with an additional monotone value transform appended."""
        return RenderingSpec(
            kind=self.kind, lights=[(d.copy(), w) for d, w in self.lights],
            specular_exponent=self.specular_exponent, table=self.table,
            transforms=self.transforms + ((name, dict(params)),),
            name=f"{self.name}+{name}" if self.name else name,
        )

    def near_kink(self, normals: np.ndarray, margin: float) -> np.ndarray:
        """True where a clamp kink lies within ``margin`` of the sample.

        Derivative estimates straddling these points are meaningless;
        admissibility probing skips them.
        """
        n = np.asarray(normals, dtype=np.float64)
        flag = np.zeros(n.shape[:-1], dtype=bool)
        if self.kind == "lambertian":
            for L, w in self.lights:
                if w > 0:
                    flag |= np.abs(n @ L) < margin
        elif self.kind == "specular" and self.specular_exponent < 3:
            for L, w in self.lights:
                if w > 0:
                    bracket = L[2] - 2.0 * (n @ L) * n[..., 2]
                    flag |= np.abs(bracket) < margin
        return flag

    def gradient(self, normals: np.ndarray) -> np.ndarray:
        """Tangential (sphere) gradient of F as an (..., 3) array.

        Estimated by geodesic central differences; exact enough for the
        genericity diagnostics.
        """
        n = np.asarray(normals, dtype=np.float64)
        t1, t2 = _tangent_basis(n)
        h = SPHERE_FD_STEP
        d1 = (self.evaluate(_sphere_step(n, t1, h))
              - self.evaluate(_sphere_step(n, t1, -h))) / (2 * h)
        d2 = (self.evaluate(_sphere_step(n, t2, h))
              - self.evaluate(_sphere_step(n, t2, -h))) / (2 * h)
        return d1[..., None] * t1 + d2[..., None] * t2


def _tangent_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal tangent pairs for an (..., 3) array of unit vectors."""
    n = np.asarray(n, dtype=np.float64)
    ref = np.zeros_like(n)
    use_x = np.abs(n[..., 0]) < 0.9
    ref[..., 0] = np.where(use_x, 1.0, 0.0)
    ref[..., 1] = np.where(use_x, 0.0, 1.0)
    t1 = ref - (ref * n).sum(-1, keepdims=True) * n
    t1 = t1 / np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(n, t1)
    return t1, t2


def _sphere_step(n: np.ndarray, tangent: np.ndarray, h: float) -> np.ndarray:
    """Geodesic step of length h from n along a unit tangent."""
    return math.cos(h) * n + math.sin(h) * tangent


def render(n: NormalField, spec: RenderingSpec) -> ScalarField:
    """Apply the rendering function pointwise: I(x, y) = F(N(x, y)).

    Output values are physical (unnormalized); the silhouette mask is
    carried through.  Callers are responsible for checking admissibility
    or explicitly forcing an inadmissible spec.
    """
    values = spec.evaluate(n.n)
    values = np.where(n.silhouette, values, 0.0)
    return ScalarField(values, n.spacing, n.silhouette.copy())


def attached_shadows(n: NormalField, spec: RenderingSpec) -> np.ndarray:
    """Pixels where clamping flattens the rendering (per-light shadows).

    For lambertian: any light with L . N < 0.  For specular: all bracket
    terms clamped (the image is locally constant zero).  Other kinds
    never clamp.
    """
    flags = np.zeros(n.silhouette.shape, dtype=bool)
    if spec.kind == "lambertian":
        for L, w in spec.lights:
            if w > 0:
                flags |= (n.n @ L) < 0
    elif spec.kind == "specular":
        all_clamped = np.ones(n.silhouette.shape, dtype=bool)
        for L, w in spec.lights:
            if w > 0:
                bracket = L[2] - 2.0 * (n.n @ L) * n.n[..., 2]
                all_clamped &= bracket <= 0
        flags = all_clamped
    return flags & n.silhouette


@dataclass(frozen=True)
class AdmissibilityReport:
    """Hemisphere-sampled bounds on the rendering function.

    ``concavity_violation`` is the max of D2F(u, u) over samples; the
    spec is admissible iff it does not exceed `CONCAVITY_TOL`.
    """

    C1_estimate: float
    concavity_violation: float
    C2_estimate: float
    samples: int
    skipped_near_kink: int = 0

    @property
    def admissible(self) -> bool:
        return self.concavity_violation <= CONCAVITY_TOL

    def to_dict(self) -> dict:
        return {
            "C1_estimate": self.C1_estimate,
            "concavity_violation": self.concavity_violation,
            "C2_estimate": self.C2_estimate,
            "samples": self.samples,
            "skipped_near_kink": self.skipped_near_kink,
            "admissible": self.admissible,
            "concavity_tol": CONCAVITY_TOL,
        }


def _hemisphere_samples(count: int) -> np.ndarray:
    """Deterministic mix of stratified (Fibonacci) and uniform samples."""
    n_fib = count // 2
    i = np.arange(n_fib, dtype=np.float64)
    z = (i + 0.5) / n_fib
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    r = np.sqrt(1.0 - z**2)
    fib = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    rng = np.random.default_rng(20260810)
    n_mc = count - n_fib
    zu = rng.uniform(0.0, 1.0, n_mc)
    pu = rng.uniform(0.0, 2.0 * math.pi, n_mc)
    ru = np.sqrt(1.0 - zu**2)
    mc = np.stack([ru * np.cos(pu), ru * np.sin(pu), zu], axis=-1)
    return np.concatenate([fib, mc], axis=0)


def check_admissibility(spec: RenderingSpec, samples: int = 4000) -> AdmissibilityReport:
    """Estimate C1 / concavity bounds of a spec over the visible hemisphere.

    Monte-Carlo plus stratified normals; for each sample, the gradient
    and the second derivative D2F(u, u) along four tangent directions
    are estimated with geodesic central differences.
    """
    if samples < 1000:
        raise ArgumentError("samples must be >= 1000")
    normals = _hemisphere_samples(samples)
    keep = ~spec.near_kink(normals, margin=10.0 * SPHERE_FD_STEP)
    skipped = int(np.count_nonzero(~keep))
    normals = normals[keep]

    grad = spec.gradient(normals)
    c1 = float(np.linalg.norm(grad, axis=-1).max())

    t1, t2 = _tangent_basis(normals)
    h = SPHERE_FD_STEP
    f0 = spec.evaluate(normals)
    worst_max = -np.inf
    worst_min = np.inf
    for ang in (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4):
        u = math.cos(ang) * t1 + math.sin(ang) * t2
        d2 = (spec.evaluate(_sphere_step(normals, u, h)) - 2.0 * f0
              + spec.evaluate(_sphere_step(normals, u, -h))) / h**2
        worst_max = max(worst_max, float(d2.max()))
        worst_min = min(worst_min, float(d2.min()))
    return AdmissibilityReport(
        C1_estimate=c1,
        concavity_violation=worst_max,
        C2_estimate=worst_min,
        samples=samples,
        skipped_near_kink=skipped,
    )


@dataclass(frozen=True)
class GenericityReport:
    """Degeneracy margins of a (surface, rendering, curve) interaction.

    ``min_angle`` is the smallest deviation from orthogonality between
    the rendering gradient and the probed normal-field derivative
    vectors: zero means the differential of the cue is blind to the
    surface variation along the curve.  ``d2n_rank_margin`` is the
    smallest second singular value of the [D2N(u,u), D2N(u,w), D2N(w,w)]
    column triple.
    """

    min_angle: float
    min_DF_norm: float
    d2n_rank_margin: float
    thresholds: tuple = (GENERIC_MIN_ANGLE, GENERIC_MIN_DF_NORM, GENERIC_MIN_RANK_MARGIN)

    @property
    def generic(self) -> bool:
        ta, tn, tr = self.thresholds
        return (self.min_angle > ta and self.min_DF_norm > tn
                and self.d2n_rank_margin > tr)

    def to_dict(self) -> dict:
        return {
            "min_angle": self.min_angle,
            "min_DF_norm": self.min_DF_norm,
            "d2n_rank_margin": self.d2n_rank_margin,
            "thresholds": list(self.thresholds),
            "generic": self.generic,
        }


def _normal_jets(n: NormalField):
    """Full-grid first and second derivatives of the normal components."""
    s = n.spacing
    first = []   # (3, 2): component c, axis a
    second = []  # (3, 2, 2)
    for c in range(3):
        comp = n.n[..., c]
        gy, gx = np.gradient(comp, s)
        first.append((gx, gy))
        gxy, gxx = np.gradient(gx, s)
        gyy, gyx = np.gradient(gy, s)
        second.append(((gxx, 0.5 * (gxy + gyx)), (0.5 * (gxy + gyx), gyy)))
    return first, second


def _sample_grid(arr: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(arr, np.array([pts[:, 1], pts[:, 0]]),
                                   order=1, mode="nearest")


def _angle_from_orthogonal(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Deviation (rad) of the angle between vectors from 90 degrees.

    Zero-length vectors count as fully degenerate (angle 0).
    """
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    cos = np.zeros_like(denom)
    ok = denom > 1e-12
    cos[ok] = np.abs((a * b).sum(-1)[ok]) / denom[ok]
    return np.arcsin(np.clip(cos, 0.0, 1.0)) * np.where(ok, 1.0, 0.0)


def _angle_from_orthogonal_subspace(a: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Deviation of ``a`` from the orthogonal complement of span(cols).

    ``cols`` is (m, 3, k); the angle is arcsin(|proj a| / |a|).  The
    derivative-of-normals operator condition is on its whole column
    space: the cue is blind to the surface exactly when its gradient is
    orthogonal to everything the operator can produce.  Rank-deficient
    spans count only their actual column space.
    """
    m = a.shape[0]
    out = np.zeros(m)
    for i in range(m):
        an = np.linalg.norm(a[i])
        if an < 1e-12:
            continue
        u, s, _ = np.linalg.svd(cols[i], full_matrices=False)
        basis = u[:, s > 1e-10 * max(1.0, s.max(initial=0.0))]
        if basis.shape[1] == 0:
            continue
        proj = basis @ (basis.T @ a[i])
        out[i] = math.asin(min(1.0, np.linalg.norm(proj) / an))
    return out


def check_genericity(n: NormalField, spec: RenderingSpec,
                     curve: np.ndarray) -> GenericityReport:
    """Probe the generic-interaction conditions along a polyline.

    ``curve`` is an (m, 2) array of (x, y) pixel points with m >= 3,
    inside the silhouette.  DN and D2N are estimated by finite
    differences of the normal field; the report returns minima over the
    curve of the angle conditions, the cue-gradient norm, and the D2N
    rank margin.
    """
    curve = np.asarray(curve, dtype=np.float64)
    if curve.ndim != 2 or curve.shape[0] < 3:
        raise ArgumentError("curve must have at least 3 samples")
    ix = np.clip(np.rint(curve[:, 0]).astype(int), 0, n.silhouette.shape[1] - 1)
    iy = np.clip(np.rint(curve[:, 1]).astype(int), 0, n.silhouette.shape[0] - 1)
    if not n.silhouette[iy, ix].all():
        raise ArgumentError("curve leaves the silhouette")

    tangents = np.gradient(curve, axis=0)
    tnorm = np.linalg.norm(tangents, axis=1, keepdims=True)
    tangents = tangents / np.where(tnorm > 0, tnorm, 1.0)
    wvecs = np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)

    first, second = _normal_jets(n)
    m = curve.shape[0]
    dn_u = np.zeros((m, 3))
    dn_w = np.zeros((m, 3))
    d2n = np.zeros((m, 3, 3))  # columns: (u,u), (u,w), (w,w)
    for c in range(3):
        gx = _sample_grid(first[c][0], curve)
        gy = _sample_grid(first[c][1], curve)
        dn_u[:, c] = gx * tangents[:, 0] + gy * tangents[:, 1]
        dn_w[:, c] = gx * wvecs[:, 0] + gy * wvecs[:, 1]
        hxx = _sample_grid(second[c][0][0], curve)
        hxy = _sample_grid(second[c][0][1], curve)
        hyy = _sample_grid(second[c][1][1], curve)
        for col, (a, b) in enumerate(((tangents, tangents),
                                      (tangents, wvecs), (wvecs, wvecs))):
            d2n[:, c, col] = (hxx * a[:, 0] * b[:, 0]
                              + hxy * (a[:, 0] * b[:, 1] + a[:, 1] * b[:, 0])
                              + hyy * a[:, 1] * b[:, 1])

    pts_n = np.stack([
        _sample_grid(n.n[..., 0], curve),
        _sample_grid(n.n[..., 1], curve),
        _sample_grid(n.n[..., 2], curve),
    ], axis=-1)
    pts_n = pts_n / np.linalg.norm(pts_n, axis=-1, keepdims=True)
    grad_f = spec.gradient(pts_n)

    dn_cols = np.stack([dn_u, dn_w], axis=-1)
    angles = np.stack([
        _angle_from_orthogonal_subspace(grad_f, dn_cols),
        _angle_from_orthogonal(grad_f, d2n[:, :, 0]),
        _angle_from_orthogonal(grad_f, d2n[:, :, 2]),
    ], axis=0)
    svals = np.linalg.svd(d2n, compute_uv=False)
    return GenericityReport(
        min_angle=float(angles.min()),
        min_DF_norm=float(np.linalg.norm(grad_f, axis=-1).min()),
        d2n_rank_margin=float(svals[:, 1].min()),
    )


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def spec_to_json(spec: RenderingSpec, table_dir: Path | str | None = None) -> dict:
    """Serialize a spec; a custom table is written next to ``table_dir``."""
    out: dict = {"kind": spec.kind}
    if spec.name:
        out["name"] = spec.name
    if spec.lights:
        out["lights"] = [{"dir": [float(v) for v in d], "weight": w}
                         for d, w in spec.lights]
    if spec.kind == "specular":
        out["exponent"] = spec.specular_exponent
    if spec.table is not None:
        if table_dir is None:
            raise ArgumentError("table_dir required to serialize a custom_table spec")
        path = Path(table_dir) / f"{spec.name or 'table'}.npy"
        spec.table.save(path)
        out["table_path"] = path.name
    if spec.transforms:
        out["transforms"] = [{"name": nm, "params": pr} for nm, pr in spec.transforms]
    return out


def spec_from_json(data: dict, base_dir: Path | str = ".") -> RenderingSpec:
    """Inverse of `spec_to_json`."""
    if not isinstance(data, dict) or "kind" not in data:
        raise SpecError(f"rendering spec must be an object with a 'kind': {data!r}")
    table = None
    if data.get("table_path"):
        table = HemisphereTable.load(Path(base_dir) / data["table_path"])
    transforms = tuple(
        (t["name"], dict(t.get("params", {}))) for t in data.get("transforms", [])
    )
    return RenderingSpec(
        kind=data["kind"],
        lights=[(np.asarray(l["dir"], dtype=np.float64), float(l.get("weight", 1.0)))
                for l in data.get("lights", [])],
        specular_exponent=float(data.get("exponent", 4.0)),
        table=table,
        transforms=transforms,
        name=data.get("name", ""),
    )


def light_from_az_el(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """Unit light direction from azimuth (CCW from +x, degrees) and
    elevation above the image plane (degrees; 90 = view direction)."""
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    return np.array([math.cos(el) * math.cos(az),
                     math.cos(el) * math.sin(az),
                     math.sin(el)])
