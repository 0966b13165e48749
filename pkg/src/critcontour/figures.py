"""Matplotlib figure rendering for the CLI report path.

Every report figure is written next to the delimited output it
illustrates.  Overlay colors follow one convention everywhere: 1-cells
blue, maxima yellow, saddles green, minima red; contour strength uses
the viridis ramp.  Figures are deterministic: the SVG hash salt is
pinned and no creation date is embedded, so identical runs produce
byte-identical files.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "critcontour"

import matplotlib.pyplot as plt
import numpy as np

from .field import ScalarField
from .morse import MSComplex

__all__ = [
    "save_field",
    "save_ms_overlay",
    "save_scores_overlay",
    "save_montage",
    "save_pair_overlay",
    "save_limit_plot",
    "save_recon_figure",
]

POINT_COLORS = {0: "red", 1: "green", 2: "gold"}
CELL_COLOR = "royalblue"
_SAVE_OPTS = {"metadata": {"Date": None}, "dpi": 130}


def _imshow(ax, field: ScalarField, cmap: str = "gray") -> None:
    vals = np.where(field.mask, field.values, np.nan)
    ax.imshow(vals, cmap=cmap, origin="upper", interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])


def _draw_complex(ax, c: MSComplex, lw: float = 1.0) -> None:
    for oc in c.one_cells:
        if oc.to_extremum is None:
            continue
        ax.plot(oc.polyline[:, 0], oc.polyline[:, 1], color=CELL_COLOR,
                lw=lw, solid_capstyle="round")
    h, w = c.two_cell_labels.shape
    for p in c.points:
        if p.virtual:
            continue
        x, y = p.location
        if not (0 <= x < w and 0 <= y < h):
            continue
        ax.plot([x], [y], marker="o", ms=3.5, mew=0,
                color=POINT_COLORS[p.index])


def save_field(field: ScalarField, path, title: str = "",
               cmap: str = "gray") -> None:
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    _imshow(ax, field, cmap)
    if title:
        ax.set_title(title, fontsize=9)
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_ms_overlay(image: ScalarField, c: MSComplex, path,
                    title: str = "") -> None:
    """Image with its MS complex: cells blue, max/saddle/min colored."""
    fig, ax = plt.subplots(figsize=(4.6, 4.6))
    _imshow(ax, image)
    _draw_complex(ax, c)
    if title:
        ax.set_title(title, fontsize=9)
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_scores_overlay(image: ScalarField, c: MSComplex, scores: list,
                        path, title: str = "") -> None:
    """1-cells colored by K_achieved on the viridis ramp."""
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    _imshow(ax, image)
    by_id = {oc.id: oc for oc in c.one_cells}
    ks = [s.K_achieved for s in scores if math.isfinite(s.K_achieved)]
    vmax = max(ks) if ks else 1.0
    cmap = plt.get_cmap("viridis")
    for s in scores:
        oc = by_id.get(s.one_cell_id)
        if oc is None:
            continue
        color = cmap(min(s.K_achieved / vmax, 1.0) if vmax > 0 else 0.0)
        ax.plot(oc.polyline[:, 0], oc.polyline[:, 1], color=color, lw=1.6)
    sm = plt.cm.ScalarMappable(cmap=cmap,
                               norm=plt.Normalize(vmin=0.0, vmax=vmax))
    fig.colorbar(sm, ax=ax, fraction=0.046, label="K_achieved")
    if title:
        ax.set_title(title, fontsize=9)
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_montage(images: dict, path, overlays: dict | None = None) -> None:
    """Grid of named images, optional MS overlays per name."""
    names = list(images)
    n = len(names)
    cols = min(n, 3)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.4 * cols, 3.4 * rows),
                             squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for i, name in enumerate(names):
        ax = axes[i // cols][i % cols]
        ax.axis("on")
        _imshow(ax, images[name])
        if overlays and name in overlays:
            _draw_complex(ax, overlays[name], lw=0.8)
        ax.set_title(name, fontsize=9)
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_pair_overlay(target_image: ScalarField, tube, report, path,
                      title: str = "") -> None:
    """Target image with the tube and the matched chain geometry."""
    fig, ax = plt.subplots(figsize=(4.6, 4.6))
    _imshow(ax, target_image)
    ax.plot(tube.alpha[:, 0], tube.alpha[:, 1], color="orange", lw=1.6,
            label="source contour")
    for beta in (tube.beta1, tube.beta2):
        ax.plot(beta[:, 0], beta[:, 1], color="orange", lw=0.7, ls="--")
    if report.crossing_verified:
        ax.set_xlabel(f"matched, Hausdorff {report.hausdorff_distance:.2f} px",
                      fontsize=8)
    else:
        ax.set_xlabel("no traversing 1-cell found", fontsize=8)
    if title:
        ax.set_title(title, fontsize=9)
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_limit_plot(per_sigma: dict, path) -> None:
    """Log-log derivative magnitudes of a shading sequence."""
    sig = np.array(per_sigma["sigma"])
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.loglog(sig, np.abs(per_sigma["ww_interior_mean"]), "o-",
              label="|I_ww| interior")
    ax.loglog(sig, np.abs(per_sigma["uu_endpoint"]), "s-",
              label="|I_uu| endpoint")
    floor = 1e-12
    ax.loglog(sig, np.maximum(per_sigma["max_I_w"], floor), "^-",
              label="max |I_w|")
    ax.loglog(sig, np.maximum(per_sigma["max_I_uw"], floor), "v-",
              label="max |I_uw|")
    ax.set_xlabel("sigma (length units)")
    ax.set_ylabel("derivative magnitude")
    ax.legend(fontsize=7)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_recon_figure(true_slant: ScalarField, recons: dict, path) -> None:
    """True slant next to each reconstruction, shared color scale."""
    names = list(recons)
    fig, axes = plt.subplots(1, len(names) + 1,
                             figsize=(3.2 * (len(names) + 1), 3.4),
                             squeeze=False)
    ax0 = axes[0][0]
    _imshow(ax0, true_slant, cmap="viridis")
    ax0.set_title("true slant", fontsize=9)
    for i, name in enumerate(names):
        ax = axes[0][i + 1]
        _imshow(ax, recons[name].grid, cmap="viridis")
        ax.set_title(f"recon: {name}", fontsize=9)
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)
