"""Cross-rendering verification: tubes, box checks, and contour matching.

Around a candidate critical contour alpha we build a tube of half-width
delta (offsets beta1 = alpha + delta*w, beta2 = alpha - delta*w, straight
end caps through the endpoints).  For a second image of the same surface
three things are checked inside the tube:

* critical points of the target near the contour endpoints (for closed
  rings, a saddle/extremum pair on the ring substitutes for endpoints);
* the transversal derivative of the target along the offsets points
  consistently away from (valley) or toward (ridge) the contour -- the
  orientation depends on the sign of the target's own transversal
  curvature, which flips between renderings, so it is detected rather
  than assumed; degenerate zero-gradient samples count one half;
* an MS 1-cell chain of the target that traverses the tube from cap to
  cap.  Discrete persistence splits a continuum separatrix into chains
  of 1-cells through intermediate critical points, so matching accepts
  connected unions, not only single cells.

All geometric quantities here (delta, distances) are in pixels.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from matplotlib.path import Path as MplPath
from scipy.spatial import cKDTree

from .errors import ArgumentError
from .field import GaussianJet, ScalarField, gradient_field
from .surface import HeightField, normals_of, slant_of
from .render import RenderingSpec, render
from .morse import MSComplex, compute_ms_complex, enclosing_ring, local_critical_points, simplify
from .contour import score_contours

log = logging.getLogger(__name__)

__all__ = [
    "TubeSpec",
    "EpsilonBoxReport",
    "CorrespondenceReport",
    "build_tube",
    "check_epsilon_box",
    "match_one_cell",
    "invariance_matrix",
    "InvarianceResult",
]

#: Arc fraction of a candidate chain that must lie inside the tube.
INSIDE_FRACTION_MIN = 0.5

#: Gradient magnitudes below this (relative to range/px) are "zero
#: vectors" for flux counting and contribute one half.
FLUX_ZERO_FLOOR = 1e-12


def _resample(points: np.ndarray, step: float) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] <= 0:
        return pts[:1], np.array([0.0])
    n = max(int(round(arc[-1] / step)) + 1, 2)
    s = np.linspace(0.0, arc[-1], n)
    return np.stack([np.interp(s, arc, pts[:, 0]),
                     np.interp(s, arc, pts[:, 1])], axis=1), s


def _smooth_tangents(pts: np.ndarray, closed: bool) -> np.ndarray:
    """Tangents from a lightly averaged copy (stabilizes curvature)."""
    p = pts.copy()
    for _ in range(3):
        if closed:
            p = 0.5 * p + 0.25 * (np.roll(p, 1, axis=0) + np.roll(p, -1, axis=0))
        else:
            p[1:-1] = 0.5 * p[1:-1] + 0.25 * (p[:-2] + p[2:])
    t = np.gradient(p, axis=0)
    if closed:
        t[0] = t[-1] = 0.5 * (t[0] + t[-1])
    n = np.linalg.norm(t, axis=1, keepdims=True)
    return t / np.where(n > 0, n, 1.0)


@dataclass
class TubeSpec:
    """Tube of half-width delta around a candidate contour.

    ``omega_mask`` rasterizes the region bounded by {gamma1, beta1,
    gamma2, beta2} (for closed contours, the annulus between the two
    offset rings).
    """

    alpha: np.ndarray
    delta: float
    beta1: np.ndarray
    beta2: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    omega_mask: np.ndarray
    closed: bool
    arc_params: np.ndarray
    tangents: np.ndarray
    normals: np.ndarray

    @property
    def length(self) -> float:
        return float(self.arc_params[-1])

    def centroid(self) -> tuple[float, float]:
        return float(self.alpha[:, 0].mean()), float(self.alpha[:, 1].mean())


def _polygon_mask(shape: tuple[int, int], polygon: np.ndarray) -> np.ndarray:
    ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    inside = MplPath(polygon).contains_points(pts)
    return inside.reshape(shape)


def build_tube(alpha: np.ndarray, delta: float,
               shape: tuple[int, int]) -> TubeSpec:
    """Offset tube around a polyline (pixels); see module docstring.

    Raises an argument error when the contour's curvature radius drops
    below delta (the tube would self-intersect irreparably).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(alpha) < 5:
        raise ArgumentError("contour must have at least 5 samples")
    if delta < 2.0:
        raise ArgumentError("delta must be at least 2 px")
    closed = bool(np.linalg.norm(alpha[0] - alpha[-1]) < 1.0)
    pts, s = _resample(alpha, step=max(0.5, delta / 4.0))
    if closed:
        pts[-1] = pts[0]
    tang = _smooth_tangents(pts, closed)
    norm = np.stack([-tang[:, 1], tang[:, 0]], axis=1)

    ds = s[1] - s[0]
    dt = np.gradient(tang, axis=0)
    curvature = np.linalg.norm(dt, axis=1) / ds
    kmax = float(curvature.max())
    if kmax * delta > 1.0:
        raise ArgumentError(
            f"curvature radius {1.0 / max(kmax, 1e-12):.2f} px is below "
            f"delta={delta:g}; use a smaller delta")

    beta1 = pts + delta * norm
    beta2 = pts - delta * norm
    # cull offset points dragged inside by concavities
    tree = cKDTree(pts)
    for beta in (beta1, beta2):
        d, _ = tree.query(beta)
        bad = d < 0.7 * delta
        if bad.any():
            good = ~bad
            beta[bad] = np.stack([
                np.interp(s[bad], s[good], beta[good, 0]),
                np.interp(s[bad], s[good], beta[good, 1])], axis=1)

    if closed:
        gamma1 = np.array([beta1[0], beta2[0]])
        gamma2 = np.array([beta1[-1], beta2[-1]])
        outer = _polygon_mask(shape, beta1[:-1])
        inner = _polygon_mask(shape, beta2[:-1])
        omega = outer & ~inner
        # orientation of the offset may flip outer/inner
        if not omega.any() or inner.sum() > outer.sum():
            omega = inner & ~outer
    else:
        gamma1 = np.array([beta1[0], pts[0], beta2[0]])
        gamma2 = np.array([beta1[-1], pts[-1], beta2[-1]])
        polygon = np.vstack([beta1, gamma2[::2], beta2[::-1]])
        omega = _polygon_mask(shape, polygon)
    return TubeSpec(alpha=pts, delta=float(delta), beta1=beta1, beta2=beta2,
                    gamma1=gamma1, gamma2=gamma2, omega_mask=omega,
                    closed=closed, arc_params=s, tangents=tang, normals=norm)


@dataclass
class EpsilonBoxReport:
    """Endpoint critical points and offset flux statistics of a target."""

    endpoint_distances: dict
    flux_fractions: tuple[float, float]
    orientation: int  # +1 valley (outward flux), -1 ridge (inward)

    @property
    def flux_fraction(self) -> float:
        return 0.5 * (self.flux_fractions[0] + self.flux_fractions[1])


def check_epsilon_box(tube: TubeSpec, target: ScalarField,
                      scale: float | None = None) -> EpsilonBoxReport:
    """Check the box structure of a tube against a target image.

    (a) nearest target critical points: for open tubes per endpoint, for
    closed tubes the nearest saddle and nearest extremum to the ring;
    (b) the fraction of offset samples whose transversal derivative has
    the consistent away/toward sign (see module docstring).
    """
    if scale is None:
        scale = 1.5 * target.spacing

    # (a) critical points of the target near the endpoints / the ring
    crits = local_critical_points(target)
    tree = cKDTree(tube.alpha)

    def nearest(kinds: tuple, center: np.ndarray | None) -> float:
        best = float("inf")
        for cx, cy, kind in crits:
            if kind not in kinds:
                continue
            if center is None:  # distance to the whole ring
                d = float(tree.query([[cx, cy]])[0][0])
            else:
                d = math.hypot(cx - center[0], cy - center[1])
            best = min(best, d)
        return best

    if tube.closed:
        endpoint_distances = {
            "ring_saddle": nearest(("saddle",), None),
            "ring_extremum": nearest(("min", "max"), None),
        }
    else:
        endpoint_distances = {
            "start": nearest(("min", "max", "saddle"), tube.alpha[0]),
            "end": nearest(("min", "max", "saddle"), tube.alpha[-1]),
        }

    # (b) flux fractions along the offsets
    grad = gradient_field(target, scale)
    jet = GaussianJet(target, scale)
    probes = jet.probe_many(tube.alpha, tube.tangents)
    mean_ww = float(np.mean(probes["I_ww"]))
    orientation = 1 if mean_ww >= 0 else -1

    lo, hi = target.value_range()
    floor = FLUX_ZERO_FLOOR * max(hi - lo, 1e-30) / target.spacing

    def side_fraction(beta: np.ndarray, outward: np.ndarray) -> float:
        gx = _bilinear(grad[..., 0], beta)
        gy = _bilinear(grad[..., 1], beta)
        proj = gx * outward[:, 0] + gy * outward[:, 1]
        zero = np.abs(proj) < floor
        agree = np.sign(proj) == orientation
        return float((np.where(zero, 0.5, agree.astype(float))).mean())

    f1 = side_fraction(tube.beta1, tube.normals)
    f2 = side_fraction(tube.beta2, -tube.normals)
    return EpsilonBoxReport(endpoint_distances=endpoint_distances,
                            flux_fractions=(f1, f2), orientation=orientation)


def _bilinear(arr: np.ndarray, pts: np.ndarray) -> np.ndarray:
    from scipy import ndimage

    return ndimage.map_coordinates(arr, np.array([pts[:, 1], pts[:, 0]]),
                                   order=1, mode="nearest")


@dataclass
class CorrespondenceReport:
    """Result of hunting a source contour inside a target complex."""

    source_contour_id: int
    target_image_id: str
    found_one_cell_id: int | None
    member_cell_ids: list
    crossing_verified: bool
    inside_fraction: float
    mean_distance: float
    hausdorff_distance: float
    endpoint_critical_points: dict | None = None
    outward_flux_fractions: tuple | None = None
    orientation: int | None = None

    def to_row(self) -> dict:
        flux = (0.5 * (self.outward_flux_fractions[0] + self.outward_flux_fractions[1])
                if self.outward_flux_fractions else None)
        return {
            "source_contour_id": self.source_contour_id,
            "target": self.target_image_id,
            "matched": self.found_one_cell_id is not None,
            "crossing_verified": self.crossing_verified,
            "mean_dist": self.mean_distance,
            "hausdorff": self.hausdorff_distance,
            "flux_frac": flux,
        }


def _chain_components(cells: list) -> list:
    """Group 1-cells into connected chains by shared critical points."""
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for oc in cells:
        for node in (("s", oc.from_saddle), ("e", oc.to_extremum)):
            parent.setdefault(node, node)
        pa, pb = find(("s", oc.from_saddle)), find(("e", oc.to_extremum))
        parent[pa] = pb
    groups: dict = {}
    for oc in cells:
        groups.setdefault(find(("s", oc.from_saddle)), []).append(oc)
    return list(groups.values())


def match_one_cell(tube: TubeSpec, target_complex: MSComplex,
                   target_image: ScalarField | None = None,
                   scale: float | None = None) -> CorrespondenceReport:
    """Find the target 1-cell (chain) that traverses the tube.

    Selects the connected chain of 1-cells with the largest arc length
    inside the tube region that runs from the gamma1 side to the gamma2
    side (for closed tubes: around the ring).  Absence is reported, not
    raised.  When ``target_image`` is given, the epsilon-box fields are
    filled in as well.
    """
    tgt_id = target_complex.field_ref.get("source", "")
    atree = cKDTree(tube.alpha)
    h, w = tube.omega_mask.shape

    def clip_inside(poly: np.ndarray) -> tuple[float, np.ndarray]:
        """(fraction of arc inside omega, the inside points)."""
        pts, _ = _resample(poly, step=1.0)
        ix = np.clip(np.rint(pts[:, 0]).astype(int), 0, w - 1)
        iy = np.clip(np.rint(pts[:, 1]).astype(int), 0, h - 1)
        inside = tube.omega_mask[iy, ix]
        return float(inside.mean()), pts[inside]

    candidates = [oc for oc in target_complex.one_cells
                  if oc.to_extremum is not None]
    kept = []
    for oc in candidates:
        frac, pts = clip_inside(oc.polyline)
        if len(pts) >= 2:
            kept.append((oc, pts, frac))

    best = None  # (members, inside_pts, frac, crossing)
    if tube.closed:
        ring = enclosing_ring(target_complex, tube.centroid())
        if ring is not None:
            cell_ids, ring_poly = ring
            frac, pts = clip_inside(ring_poly)
            if frac >= INSIDE_FRACTION_MIN and len(pts):
                by_id = {oc.id: oc for oc in target_complex.one_cells}
                members = [by_id[c] for c in cell_ids]
                best = (members, pts, frac, True)
    else:
        cap_window = max(tube.delta, 0.05 * tube.length)
        max_gap = max(3.0 * tube.delta, 0.1 * tube.length)
        best_key = None
        for chain in _chain_components([oc for oc, _, _ in kept]):
            ids = {oc.id for oc in chain}
            pts = np.vstack([p for oc, p, _ in kept if oc.id in ids])
            fracs = [f for oc, _, f in kept if oc.id in ids]
            arcs = np.sort(tube.arc_params[atree.query(pts)[1]])
            gaps = np.diff(arcs, prepend=0.0, append=tube.length)
            crossing = bool(arcs[0] <= cap_window
                            and arcs[-1] >= tube.length - cap_window
                            and gaps.max() <= max_gap)
            coverage = float(arcs[-1] - arcs[0])
            mean_d = float(atree.query(pts)[0].mean())
            key = (crossing, coverage, -mean_d)
            if best_key is None or key > best_key:
                best_key = key
                best = (chain, pts, float(np.mean(fracs)), crossing)

    if best is None:
        report = CorrespondenceReport(
            source_contour_id=-1, target_image_id=tgt_id,
            found_one_cell_id=None, member_cell_ids=[],
            crossing_verified=False, inside_fraction=0.0,
            mean_distance=float("inf"), hausdorff_distance=float("inf"))
    else:
        members, pts, frac, crossing = best
        d_to_alpha = atree.query(pts)[0]
        mtree = cKDTree(pts)
        d_from_alpha = mtree.query(tube.alpha)[0]
        longest = max(members, key=lambda oc: oc.length())
        report = CorrespondenceReport(
            source_contour_id=-1, target_image_id=tgt_id,
            found_one_cell_id=longest.id,
            member_cell_ids=[oc.id for oc in members],
            crossing_verified=bool(crossing),
            inside_fraction=frac,
            mean_distance=float(d_to_alpha.mean()),
            hausdorff_distance=float(max(d_to_alpha.max(), d_from_alpha.max())),
        )
    if target_image is not None:
        box = check_epsilon_box(tube, target_image, scale=scale)
        report.endpoint_critical_points = box.endpoint_distances
        report.outward_flux_fractions = box.flux_fractions
        report.orientation = box.orientation
    return report


# ---------------------------------------------------------------------------
# The full experiment matrix
# ---------------------------------------------------------------------------

@dataclass
class InvarianceResult:
    """Renders, complexes, scores, and the cross-match records."""

    images: dict
    complexes: dict
    scores: dict
    records: list
    summary: dict
    tubes: dict = dc_field(default_factory=dict)


def invariance_matrix(surface: HeightField, specs: list, delta: float,
                      scale: float, persistence_rel: float = 0.05,
                      top_k: int = 4, jobs: int = 1,
                      include_slant: bool = True,
                      min_arc_px: float | None = None) -> InvarianceResult:
    """Render all specs, extract complexes, and cross-match top contours.

    Every spec is rendered (plus the true slant field as an extra
    admissible target); each image's complex is simplified at
    ``persistence_rel`` of its value range; the ``top_k`` strongest
    non-boundary contours of each image, skipping stubs shorter than
    ``min_arc_px``, are matched against every other image.  Records
    carry K_achieved, distances, and box statistics; the summary reports
    match fractions and the Spearman rank correlation between
    K_achieved and match Hausdorff distance.
    """
    if len(specs) < 2:
        raise ArgumentError("need at least 2 rendering specs")
    if min_arc_px is None:
        min_arc_px = max(5.0 * delta, 15.0)
    normals = normals_of(surface)
    images: dict[str, ScalarField] = {}
    for i, spec in enumerate(specs):
        name = spec.name or f"{spec.kind}_{i}"
        images[name] = render(normals, spec)
    if include_slant:
        images["slant"] = slant_of(normals).grid

    complexes = {}
    scores = {}
    shape = surface.grid.values.shape
    tubes = {}
    jobs_list = []
    for name, img in images.items():
        lo, hi = img.value_range()
        cx = simplify(compute_ms_complex(img, name=name),
                      persistence_rel * (hi - lo))
        cx.field_ref["source"] = name
        complexes[name] = cx
        by_id = {oc.id: oc for oc in cx.one_cells}
        picked = []
        for sc in score_contours(img, cx, scale):
            if len(picked) >= top_k:
                break
            if sc.boundary_flagged:
                continue
            oc = by_id[sc.one_cell_id]
            if oc.length() < min_arc_px:
                continue
            try:
                tube = build_tube(oc.polyline, delta, shape)
            except ArgumentError as exc:
                log.warning("tube for %s contour %d skipped: %s",
                            name, sc.one_cell_id, exc)
                continue
            tubes[(name, len(picked))] = tube
            picked.append((sc, tube))
        scores[name] = [sc for sc, _ in picked]

    for src, topk in scores.items():
        for rank, sc in enumerate(topk):
            tube = tubes[(src, rank)]
            for tgt in images:
                jobs_list.append((src, rank, sc, tube, tgt))

    def run(job):
        src, rank, sc, tube, tgt = job
        rep = match_one_cell(tube, complexes[tgt], target_image=images[tgt],
                             scale=scale)
        rep.source_contour_id = sc.one_cell_id
        return {
            "source": src, "target": tgt, "rank": rank,
            "one_cell_id": sc.one_cell_id,
            "K_achieved": sc.K_achieved, "M_achieved": sc.M_achieved,
            "matched": rep.found_one_cell_id is not None,
            "crossing_verified": rep.crossing_verified,
            "mean_dist": rep.mean_distance,
            "hausdorff": rep.hausdorff_distance,
            "inside_fraction": rep.inside_fraction,
            "flux_frac": (None if rep.outward_flux_fractions is None else
                          0.5 * (rep.outward_flux_fractions[0]
                                 + rep.outward_flux_fractions[1])),
            "orientation": rep.orientation,
            "endpoint_distances": rep.endpoint_critical_points,
            "member_cells": rep.member_cell_ids,
        }

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run, jobs_list))
    else:
        records = [run(j) for j in jobs_list]
    records.sort(key=lambda r: (r["source"], r["rank"], r["target"]))

    matched = [r for r in records if r["crossing_verified"]]
    ks = [r["K_achieved"] for r in records if math.isfinite(r["hausdorff"])]
    hs = [r["hausdorff"] for r in records if math.isfinite(r["hausdorff"])]
    spearman = None
    if len(ks) >= 3 and len(set(ks)) > 1 and len(set(hs)) > 1:
        from scipy.stats import spearmanr

        spearman = float(spearmanr(ks, hs).statistic)
    summary = {
        "n_records": len(records),
        "fraction_matched": (len(matched) / len(records)) if records else 0.0,
        "spearman_K_vs_hausdorff": spearman,
        "persistence_rel": persistence_rel,
        "delta_px": delta,
        "derivative_scale": scale,
        "top_k": top_k,
    }
    return InvarianceResult(images=images, complexes=complexes, scores=scores,
                            records=records, summary=summary, tubes=tubes)
