"""Contour scoring, the shading-limit harness, and suggestive contours.

Scoring measures, per MS 1-cell, the certificate quantities of a
critical contour: ``K_achieved`` is the smallest transversal second
derivative magnitude |I_ww| over the interior of the cell, folded with
the tangential |I_uu| demanded at the endpoints; ``M_achieved`` is the
largest |DI| and |I_uw| anywhere on it.  A cell is critical at level
(K, M) iff ``K_achieved > K`` and ``M_achieved < M``.  No thresholds
are imposed here: achieved constants are reported and ranked, because
strong cells (large K) are the ones that stay put across renderings.

The shading-limit harness realizes a 1D intensity-carrying curve as a
family of blurred images I^sigma = (profile * G_sigma)(xi) *
exp(-eta^2 / 2 sigma^2) in the local tangent/transversal frame, and
measures how the frame derivatives behave as sigma shrinks: the
transversal second derivative diverges like -1/sigma^2, the tangential
second derivative diverges at the endpoints, the first derivatives and
the mixed derivative stay bounded (the tangential one approaches half
the endpoint profile slope).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ArgumentError
from .field import GaussianJet, ScalarField
from .surface import NormalField, SlantField
from .morse import MSComplex

log = logging.getLogger(__name__)

__all__ = [
    "ContourScore",
    "IdealContour",
    "ShadingSequence",
    "LimitReport",
    "score_contours",
    "score_polyline",
    "make_ideal_contour",
    "read_ideal_contour",
    "write_ideal_contour",
    "build_shading_sequence",
    "verify_shading_limit",
    "suggestive_contours",
]

#: Arc-length fraction at each end of a cell treated as "endpoint" for
#: the tangential |I_uu| condition.
ENDPOINT_FRACTION = 0.05

#: Suggestive contours need a well-defined projected view direction, so
#: the surface gradient must clear this floor.
SUGGESTIVE_GRAD_FLOOR = 1e-3

#: Contour pieces shorter than this (pixels of arc length) are noise.
SUGGESTIVE_MIN_ARC = 3.0


def _resample_polyline(points: np.ndarray, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Uniform arc-length resampling; returns (points, arc_positions)."""
    pts = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total <= 0:
        return pts[:1], np.array([0.0])
    n = max(int(round(total / step)) + 1, 2)
    s = np.linspace(0.0, total, n)
    x = np.interp(s, arc, pts[:, 0])
    y = np.interp(s, arc, pts[:, 1])
    return np.stack([x, y], axis=1), s


def _tangents_of(points: np.ndarray) -> np.ndarray:
    t = np.gradient(points, axis=0)
    n = np.linalg.norm(t, axis=1, keepdims=True)
    return t / np.where(n > 0, n, 1.0)


@dataclass
class ContourScore:
    """Critical-contour certificate for one 1-cell.

    ``K_achieved`` is the minimum of |I_ww| over the interior;
    ``K_endpoint`` is the tangential |I_uu| available in the endpoint
    windows; ``M_achieved`` the maximum of |DI| and |I_uw| anywhere.
    ``profile`` columns: t (arc length, px), I_ww, I_uu, I_uw, |DI|.
    """

    one_cell_id: int
    K_achieved: float
    M_achieved: float
    K_endpoint: float
    profile: np.ndarray
    derivative_scale: float
    boundary_flagged: bool = False

    def is_critical_at(self, K: float, M: float) -> bool:
        """Literal level test: both K conditions exceed K, M stays below M."""
        return (self.K_achieved > K and self.K_endpoint > K
                and self.M_achieved < M)

    def to_dict(self) -> dict:
        return {
            "one_cell_id": self.one_cell_id,
            "K_achieved": self.K_achieved,
            "M_achieved": self.M_achieved,
            "K_endpoint": self.K_endpoint,
            "derivative_scale": self.derivative_scale,
            "boundary_flagged": self.boundary_flagged,
            "n_samples": int(self.profile.shape[0]),
        }


def score_polyline(image: ScalarField, polyline: np.ndarray, scale: float,
                   one_cell_id: int = -1, jet: GaussianJet | None = None,
                   ) -> ContourScore | None:
    """Score an arbitrary polyline on an image (cells come from
    `score_contours`; this is the shared kernel and is also handy for
    synthetic curves)."""
    pts, s = _resample_polyline(polyline, step=1.0)
    if len(pts) < 3:
        return None
    if jet is None:
        jet = GaussianJet(image, scale)
    tangents = _tangents_of(pts)
    d = jet.probe_many(pts, tangents)

    total = s[-1]
    end_len = max(ENDPOINT_FRACTION * total, 1.0)
    start_w = s <= end_len
    end_w = s >= total - end_len
    interior = ~(start_w | end_w)
    if not interior.any():
        interior = np.ones_like(start_w)

    abs_ww = np.abs(d["I_ww"])
    abs_uu = np.abs(d["I_uu"])
    k_interior = float(abs_ww[interior].min())
    k_ends = float(min(abs_uu[start_w].max(), abs_uu[end_w].max()))
    m_achieved = float(np.maximum(d["grad_norm"], np.abs(d["I_uw"])).max())

    margins = np.array([jet.margin_at((p[0], p[1])) for p in pts[:: max(len(pts) // 16, 1)]])
    flagged = bool((margins < 3.0 * scale).any())

    profile = np.column_stack([s, d["I_ww"], d["I_uu"], d["I_uw"], d["grad_norm"]])
    return ContourScore(
        one_cell_id=one_cell_id,
        K_achieved=k_interior,
        M_achieved=m_achieved,
        K_endpoint=k_ends,
        profile=profile,
        derivative_scale=scale,
        boundary_flagged=flagged,
    )


def score_contours(image: ScalarField, complex_: MSComplex, scale: float,
                   ) -> list:
    """Score every 1-cell of a complex on an image.

    The complex may come from this image or from any other field on the
    same grid; scoring only reads the geometry.  Returns scores sorted
    by descending K_achieved; cells shorter than 3 samples are skipped
    with a warning.
    """
    if not scale > 0:
        raise ArgumentError("derivative scale must be > 0")
    jet = GaussianJet(image, scale)
    scores = []
    for oc in complex_.one_cells:
        sc = score_polyline(image, oc.polyline, scale, one_cell_id=oc.id, jet=jet)
        if sc is None:
            log.warning("one-cell %d shorter than 3 samples; skipped", oc.id)
            continue
        sc.boundary_flagged = sc.boundary_flagged or oc.on_boundary
        scores.append(sc)
    scores.sort(key=lambda sc: -sc.K_achieved)
    return scores


# ---------------------------------------------------------------------------
# Ideal contours and the shading limit
# ---------------------------------------------------------------------------

@dataclass
class IdealContour:
    """Arc-length parameterized curve carrying positive intensity.

    Intensity is exactly zero at the endpoints.  ``taylor_coeffs``
    holds (c0, c1, c2) of the intensity at the start endpoint (c0 = 0);
    ``max_curvature`` reports the largest discrete planar curvature.
    """

    polyline: np.ndarray
    intensities: np.ndarray
    taylor_coeffs: tuple[float, float, float]
    max_curvature: float

    @property
    def length(self) -> float:
        d = np.diff(self.polyline, axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())


def make_ideal_contour(points: np.ndarray, intensities: np.ndarray,
                       ) -> IdealContour:
    """Build an ideal contour from sampled points and intensities.

    The curve is resampled to half-pixel arc-length steps; intensities
    must vanish at both ends and be positive inside.
    """
    points = np.asarray(points, dtype=np.float64)
    intensities = np.asarray(intensities, dtype=np.float64)
    if len(points) != len(intensities) or len(points) < 3:
        raise ArgumentError("need matching points/intensities with >= 3 samples")
    if intensities[0] != 0.0 or intensities[-1] != 0.0:
        raise ArgumentError("intensity must be exactly 0 at the endpoints")
    if not np.all(intensities[1:-1] > 0):
        raise ArgumentError("interior intensities must be positive")

    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    pts, s = _resample_polyline(points, step=0.5)
    vals = np.interp(s, arc, intensities)
    vals[0] = 0.0
    vals[-1] = 0.0

    # quadratic fit near the start endpoint: I(s) ~ c1 s + c2 s^2
    k = min(9, len(s))
    a = np.vstack([s[:k], s[:k] ** 2]).T
    c1, c2 = np.linalg.lstsq(a, vals[:k], rcond=None)[0]

    t = _tangents_of(pts)
    dt = np.gradient(t, axis=0)
    ds = s[1] - s[0] if len(s) > 1 else 1.0
    curvature = np.linalg.norm(dt, axis=1) / ds
    return IdealContour(polyline=pts, intensities=vals,
                        taylor_coeffs=(0.0, float(c1), float(c2)),
                        max_curvature=float(curvature.max()))


def write_ideal_contour(ic: IdealContour, path) -> None:
    """Plain-text polyline format: one "x y intensity" triple per line."""
    with open(path, "w") as fh:
        for (x, y), v in zip(ic.polyline, ic.intensities):
            fh.write(f"{x:.6f} {y:.6f} {v:.8f}\n")


def read_ideal_contour(path) -> IdealContour:
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] != 3:
        raise ArgumentError(f"{path}: expected 'x y intensity' triples")
    return make_ideal_contour(data[:, :2], data[:, 2])


@dataclass
class ShadingSequence:
    """Blur ladder of an ideal contour, rasterized to fields.

    ``profiles[i]`` is the blurred 1D intensity on ``arc_grid`` (pixel
    units, zero-padded past the endpoints); the image construction is
    profile(s) * exp(-eta^2 / 2 sigma^2) in the per-point frame.
    """

    contour: IdealContour
    sigma_list: list
    images: list
    tangents: np.ndarray
    normals: np.ndarray
    arc_grid: np.ndarray
    profiles: list
    construction_error: list


def build_shading_sequence(ic: IdealContour, sigma_list,
                           shape: tuple[int, int] | None = None,
                           spacing: float = 1.0) -> ShadingSequence:
    """Rasterize the blur ladder of an ideal contour.

    ``sigma_list`` must be strictly decreasing, positive, with the
    smallest at least 2 px.  The construction is exact for straight
    contours; for curved ones the local-frame approximation error
    against a direct 2D convolution is recorded per sigma.
    """
    sigma_list = [float(s) for s in sigma_list]
    if not sigma_list or any(s <= 0 for s in sigma_list):
        raise ArgumentError("sigmas must be positive")
    if any(b >= a for a, b in zip(sigma_list, sigma_list[1:])):
        raise ArgumentError("sigma_list must be strictly decreasing")
    if min(sigma_list) / spacing < 2.0:
        raise ArgumentError("smallest sigma must be at least 2 px")

    sig_max_px = max(sigma_list) / spacing
    pts = ic.polyline
    if shape is None:
        pad = int(math.ceil(4 * sig_max_px + 4))
        w = int(math.ceil(pts[:, 0].max())) + pad + 1
        h = int(math.ceil(pts[:, 1].max())) + pad + 1
        if pts[:, 0].min() < pad or pts[:, 1].min() < pad:
            raise ArgumentError(
                "contour too close to the grid origin for the blur pad; "
                "shift it or pass an explicit shape")
        shape = (h, w)

    ds = 0.25
    dense, s_dense = _resample_polyline(pts, step=ds)
    vals = np.interp(s_dense, np.concatenate(
        [[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))]),
        ic.intensities)
    tang = _tangents_of(dense)
    norm = np.stack([-tang[:, 1], tang[:, 0]], axis=1)

    # arc grid padded past both endpoints (zero-extended intensity)
    pad_arc = 5.0 * sig_max_px
    n_pad = int(math.ceil(pad_arc / ds))
    arc_grid = np.concatenate([
        s_dense[0] - ds * np.arange(n_pad, 0, -1), s_dense,
        s_dense[-1] + ds * np.arange(1, n_pad + 1)])
    profile0 = np.concatenate([np.zeros(n_pad), vals, np.zeros(n_pad)])

    # per-pixel frame coordinates via nearest contour point
    ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]]
    q = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    tree = cKDTree(dense)
    _, idx = tree.query(q)
    rel = q - dense[idx]
    s_eff = s_dense[idx] + (rel * tang[idx]).sum(1)
    eta = (rel * norm[idx]).sum(1)

    images = []
    profiles = []
    errors = []
    for sigma in sigma_list:
        sig_px = sigma / spacing
        p_sigma = ndimage.gaussian_filter1d(profile0, sig_px / ds, mode="constant")
        vals_q = np.interp(s_eff, arc_grid, p_sigma, left=0.0, right=0.0)
        img = (vals_q * np.exp(-(eta**2) / (2.0 * sig_px**2))).reshape(shape)
        images.append(ScalarField(img, spacing))
        profiles.append(p_sigma)

        # local-frame error against the direct 2D convolution, scaled to
        # the same transversal normalization
        splat = np.zeros(shape)
        np.add.at(splat, (np.clip(np.rint(dense[:, 1]).astype(int), 0, shape[0] - 1),
                          np.clip(np.rint(dense[:, 0]).astype(int), 0, shape[1] - 1)),
                  vals * ds)
        direct = ndimage.gaussian_filter(splat, sig_px) * math.sqrt(2 * math.pi) * sig_px
        denom = max(img.max(), 1e-30)
        errors.append(float(np.abs(direct - img).max() / denom))

    return ShadingSequence(contour=ic, sigma_list=sigma_list, images=images,
                           tangents=tang, normals=norm, arc_grid=arc_grid,
                           profiles=profiles, construction_error=errors)


def _sample_image(field: ScalarField, pts: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(field.values, np.array([pts[:, 1], pts[:, 0]]),
                                   order=1, mode="constant")


@dataclass
class LimitReport:
    """Measured limit behavior of a shading sequence.

    Slopes are log-log regressions against sigma.  ``inconclusive`` is
    set when a regression cannot be conditioned (degenerate sigmas or
    nonpositive measurements).
    """

    slope_ww: float
    ww_sigma2_smallest: float
    slope_uu_endpoint: float
    uu_endpoint_positive: bool
    endpoint_I_u: float
    bounded_max: dict
    bound_trend_slopes: dict
    interior_I_w_max: float
    inconclusive: bool
    per_sigma: dict | None = None

    def to_dict(self) -> dict:
        return {
            "slope_ww": self.slope_ww,
            "ww_sigma2_smallest": self.ww_sigma2_smallest,
            "slope_uu_endpoint": self.slope_uu_endpoint,
            "uu_endpoint_positive": self.uu_endpoint_positive,
            "endpoint_I_u": self.endpoint_I_u,
            "bounded_max": self.bounded_max,
            "bound_trend_slopes": self.bound_trend_slopes,
            "interior_I_w_max": self.interior_I_w_max,
            "inconclusive": self.inconclusive,
            "per_sigma": self.per_sigma,
        }


def _loglog_slope(sigmas: np.ndarray, values: np.ndarray, floor: float) -> float:
    v = np.maximum(np.abs(values), floor)
    x = np.log(sigmas)
    y = np.log(v)
    if len(np.unique(np.round(x, 12))) < 2:
        return float("nan")
    return float(np.polyfit(x, y, 1)[0])


def verify_shading_limit(seq: ShadingSequence) -> LimitReport:
    """Measure the derivative limits of a blur ladder on its images.

    Needs at least 4 sigmas spanning a decade.  All derivatives are
    estimated from the rasterized images: transversal second derivative
    by a log-parabola fit across the contour, the rest by unit-pixel
    central differences in the local frame.
    """
    sigmas = np.array(seq.sigma_list, dtype=np.float64)
    if len(sigmas) < 4 or sigmas.max() / sigmas.min() < 10.0:
        raise ArgumentError("need >= 4 sigmas spanning at least a decade")

    ic = seq.contour
    spacing = seq.images[0].spacing
    pts_all, s_all = _resample_polyline(ic.polyline, step=1.0)
    tang = _tangents_of(pts_all)
    norm = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    total = s_all[-1]
    interior = (s_all > 0.25 * total) & (s_all < 0.75 * total)
    p_int = pts_all[interior]
    u_int = tang[interior]
    w_int = norm[interior]
    p0, u0, w0 = pts_all[0], tang[0], norm[0]

    etas = np.arange(-3, 4, dtype=np.float64)
    ww_means = []
    uu_end = []
    iu_end = []
    max_iw = []
    max_iu = []
    max_iuw = []
    int_iw = []
    inconclusive = False
    for sigma, img in zip(sigmas, seq.images):
        # transversal log-parabola fit at interior points
        vals = np.stack([_sample_image(img, p_int + k * w_int) for k in etas])
        good = (vals > 0).all(axis=0)
        if not good.any():
            inconclusive = True
            ww_means.append(np.nan)
        else:
            lv = np.log(vals[:, good])
            coef = np.polyfit(etas, lv, 2)
            v0 = vals[etas.size // 2, good]
            ww = 2.0 * coef[0] * v0 / spacing**2
            ww_means.append(float(np.mean(ww)))

        def at(p, a, b, base_u, base_w):
            return _sample_image(img, p[None] + a * base_u[None] + b * base_w[None])[0]

        # endpoint tangential derivatives
        v_p = at(p0, 1.0, 0.0, u0, w0)
        v_m = at(p0, -1.0, 0.0, u0, w0)
        v_0 = at(p0, 0.0, 0.0, u0, w0)
        iu_end.append((v_p - v_m) / (2.0 * spacing))
        uu_end.append((v_p - 2.0 * v_0 + v_m) / spacing**2)

        # boundedness along the whole contour
        vp = np.stack([_sample_image(img, pts_all + k * tang) for k in (-1.0, 1.0)])
        wp = np.stack([_sample_image(img, pts_all + k * norm) for k in (-1.0, 1.0)])
        iu = (vp[1] - vp[0]) / (2.0 * spacing)
        iw = (wp[1] - wp[0]) / (2.0 * spacing)
        xy = np.stack([
            _sample_image(img, pts_all + a * tang + b * norm)
            for a, b in ((1, 1), (1, -1), (-1, 1), (-1, -1))])
        iuw = (xy[0] - xy[1] - xy[2] + xy[3]) / (4.0 * spacing**2)
        max_iu.append(float(np.abs(iu).max()))
        max_iw.append(float(np.abs(iw).max()))
        max_iuw.append(float(np.abs(iuw).max()))
        int_iw.append(float(np.abs(iw[interior]).max()))

    ww_arr = np.array(ww_means)
    scale_ref = max(float(np.abs(ic.intensities).max()), 1e-30)
    floor = 1e-9 * scale_ref
    slope_ww = _loglog_slope(sigmas, ww_arr, floor)
    slope_uu = _loglog_slope(sigmas, np.array(uu_end), floor)
    if math.isnan(slope_ww) or math.isnan(slope_uu):
        inconclusive = True

    return LimitReport(
        slope_ww=slope_ww,
        ww_sigma2_smallest=float(ww_arr[-1] * sigmas[-1] ** 2),
        slope_uu_endpoint=slope_uu,
        uu_endpoint_positive=bool(np.all(np.array(uu_end) > 0)),
        endpoint_I_u=float(iu_end[-1]),
        bounded_max={"I_w": max(max_iw), "I_u": max(max_iu), "I_uw": max(max_iuw)},
        bound_trend_slopes={
            "I_w": _loglog_slope(sigmas, np.array(max_iw), floor),
            "I_u": _loglog_slope(sigmas, np.array(max_iu), floor),
            "I_uw": _loglog_slope(sigmas, np.array(max_iuw), floor),
        },
        interior_I_w_max=max(int_iw),
        inconclusive=inconclusive,
        per_sigma={
            "sigma": [float(s) for s in sigmas],
            "ww_interior_mean": [float(v) for v in ww_arr],
            "uu_endpoint": [float(v) for v in uu_end],
            "I_u_endpoint": [float(v) for v in iu_end],
            "max_I_w": max_iw,
            "max_I_u": max_iu,
            "max_I_uw": max_iuw,
            "construction_error": list(seq.construction_error),
        },
    )


# ---------------------------------------------------------------------------
# Suggestive contours
# ---------------------------------------------------------------------------

def suggestive_contours(n: NormalField, slant: SlantField) -> list:
    """Zero crossings of (surface gradient . slant gradient) at slant maxima.

    Under orthographic projection the projected view direction is
    proportional to the surface gradient, so the generating equation is
    grad S . grad slant = 0, kept only where the slant is at a
    directional maximum along that direction.  Extraction is marching
    squares with linear interpolation; pieces are split at points
    failing the maximum condition and short fragments are dropped.
    """
    from skimage.measure import find_contours

    if n.silhouette.shape != slant.grid.values.shape:
        raise ArgumentError("normal and slant fields must share a grid")
    s = n.spacing
    n3 = n.n[..., 2]
    ok = n.silhouette & (n3 > 0.05)
    ok &= ndimage.binary_erosion(n.silhouette, iterations=2)

    with np.errstate(divide="ignore", invalid="ignore"):
        sx = np.where(ok, -n.n[..., 0] / n3, 0.0)
        sy = np.where(ok, -n.n[..., 1] / n3, 0.0)
    gy, gx = np.gradient(slant.grid.values, s)
    grad_s_norm = np.hypot(sx, sy)
    g = sx * gx + sy * gy

    valid = ok & (grad_s_norm > SUGGESTIVE_GRAD_FLOOR)
    gm = np.where(valid, g, np.nan)
    contours = find_contours(gm, 0.0)

    # slant Hessian for the directional-maximum condition
    hyx, hxx = np.gradient(gx, s)
    hyy, hxy = np.gradient(gy, s)

    def d2_along_w(pts: np.ndarray) -> np.ndarray:
        coords = np.array([pts[:, 1], pts[:, 0]])
        wx = ndimage.map_coordinates(sx, coords, order=1)
        wy = ndimage.map_coordinates(sy, coords, order=1)
        nn = np.hypot(wx, wy)
        nn = np.where(nn > 0, nn, 1.0)
        wx, wy = wx / nn, wy / nn
        a = ndimage.map_coordinates(hxx, coords, order=1)
        b = ndimage.map_coordinates(0.5 * (hxy + hyx), coords, order=1)
        c = ndimage.map_coordinates(hyy, coords, order=1)
        return a * wx**2 + 2 * b * wx * wy + c * wy**2

    out = []
    for rc in contours:
        pts = rc[:, ::-1].copy()  # (row, col) -> (x, y)
        keep = d2_along_w(pts) < 0
        # split into maximal runs of kept points
        start = None
        for i in range(len(pts) + 1):
            inside = i < len(pts) and keep[i]
            if inside and start is None:
                start = i
            elif not inside and start is not None:
                piece = pts[start:i]
                if len(piece) >= 3:
                    d = np.diff(piece, axis=0)
                    if np.hypot(d[:, 0], d[:, 1]).sum() >= SUGGESTIVE_MIN_ARC:
                        out.append(piece)
                start = None
    return out
