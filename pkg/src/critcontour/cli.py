"""Command-line front end: one subcommand per pipeline stage.

Configuration is JSON; command-line flags win over config values.  All
artifacts are deterministic for a fixed config and seed: every output
embeds the config hash, timestamps only ever go to stderr logging, and
figure rendering is salted (see `figures`).

Exit codes: 0 ok, 2 configuration/argument error, 3 numerical error,
4 I/O error.  On failure a machine-readable JSON object is printed to
stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DomainError, NumericalError, SpecError
from .field import ScalarField, read_field, write_field, write_pgm
from .surface import (HeightField, make_blob, make_furrow,
                      make_rotated_sigmoid, normals_of, slant_of)
from .render import (RenderingSpec, check_admissibility, light_from_az_el,
                     render, spec_from_json, spec_to_json)
from .morse import complex_to_json, compute_ms_complex, simplify
from .contour import (build_shading_sequence, read_ideal_contour,
                      score_contours, verify_shading_limit)
from .verify import invariance_matrix
from .recon import build_scaffold, inpaint, rms_difference
from . import figures

log = logging.getLogger("critcontour")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

DEFAULTS = {
    "scale_px": 1.5,
    "persistence_rel": 0.05,
    "delta_px": 3.0,
    "top_k": 3,
    "recon_top_k": 2,
    "seed": 0,
}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from exc


def build_surface(cfg: dict) -> HeightField:
    kind = cfg.get("kind")
    res = int(cfg.get("resolution", 256))
    if kind == "rotated_sigmoid":
        keys = ("perturbation_amplitude", "height", "steepness", "radius")
        return make_rotated_sigmoid(res, **{k: cfg[k] for k in keys if k in cfg})
    if kind == "furrow":
        keys = ("view_tilt", "dome_height", "radius_x", "radius_y",
                "crease_depth", "crease_width")
        return make_furrow(res, **{k: cfg[k] for k in keys if k in cfg})
    if kind == "blob":
        keys = ("n_harmonics", "amplitude", "base_radius")
        return make_blob(res, int(cfg.get("seed", 0)),
                         **{k: cfg[k] for k in keys if k in cfg})
    raise SpecError(f"unknown surface kind {kind!r}")


def build_specs(cfg_list: list, base_dir: Path, lights_override=None) -> list:
    specs = []
    for i, rc in enumerate(cfg_list):
        rc = dict(rc)
        rc.setdefault("name", f"{rc.get('kind', 'spec')}_{i}")
        az_lights = []
        for entry in rc.pop("lights", []):
            if "az_el" in entry:
                az, el = entry["az_el"]
                az_lights.append({"dir": [float(v) for v in light_from_az_el(az, el)],
                                  "weight": entry.get("weight", 1.0)})
            else:
                az_lights.append(entry)
        if az_lights:
            rc["lights"] = az_lights
        allow = rc.pop("allow_inadmissible", False)
        spec = spec_from_json(rc, base_dir)
        if lights_override and spec.kind in ("lambertian", "specular"):
            spec = RenderingSpec(kind=spec.kind, lights=lights_override,
                                 specular_exponent=spec.specular_exponent,
                                 table=spec.table, transforms=spec.transforms,
                                 name=spec.name)
        spec.allow_inadmissible = allow
        specs.append(spec)
    return specs


def _resolve_out(args, cfg: dict) -> Path:
    out = args.out or cfg.get("out_dir") or os.environ.get("CC_OUT") or "cc_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _experiment_params(args, cfg: dict) -> dict:
    p = dict(DEFAULTS)
    p.update({k: cfg[k] for k in DEFAULTS if k in cfg})
    if args.scale is not None:
        p["scale_px"] = args.scale
    if args.persistence is not None:
        p["persistence_rel"] = args.persistence
    if args.delta is not None:
        p["delta_px"] = args.delta
    if getattr(args, "seed", None) is not None:
        p["seed"] = args.seed
    p["jobs"] = args.jobs
    return p


def _lights_from_flags(args) -> list | None:
    if not args.light:
        return None
    out = []
    for triple in args.light:
        try:
            az, el, wgt = (float(v) for v in triple.split(","))
        except ValueError as exc:
            raise ArgumentError(f"--light expects az,el,weight, got {triple!r}") from exc
        out.append((light_from_az_el(az, el), wgt))
    return out


def _seeded_config(cfg: dict, seed: int | None) -> dict:
    cfg = dict(cfg)
    if seed is not None:
        cfg["seed"] = seed
        if "surface" in cfg and cfg["surface"].get("kind") == "blob":
            cfg["surface"] = dict(cfg["surface"], seed=seed)
    return cfg


def _write_csv(path: Path, rows: list, fieldnames: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(x) -> object:
    if isinstance(x, float):
        return round(x, 6) if math.isfinite(x) else None
    return x


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _render_experiment(cfg: dict, params: dict, out: Path):
    """Shared front half: surface, specs, images (+ slant), admissibility."""
    surface = build_surface(cfg["surface"])
    specs = build_specs(cfg.get("renderings", []), Path(cfg.get("_base_dir", ".")),
                        lights_override=cfg.get("_lights_override"))
    if not specs:
        raise SpecError("config has no renderings")
    normals = normals_of(surface)
    images = {}
    reports = {}
    for spec in specs:
        rep = check_admissibility(spec, samples=2000)
        reports[spec.name] = rep.to_dict()
        if not rep.admissible and not getattr(spec, "allow_inadmissible", False):
            raise SpecError(
                f"rendering {spec.name!r} is not admissible "
                f"(concavity violation {rep.concavity_violation:.3e}); "
                "set allow_inadmissible to force")
        images[spec.name] = render(normals, spec)
    images["slant"] = slant_of(normals).grid
    return surface, specs, images, reports


def cmd_render(args) -> int:
    cfg = load_config(args.config)
    cfg["_base_dir"] = str(Path(args.config).parent)
    cfg["_lights_override"] = _lights_from_flags(args)
    cfg = _seeded_config(cfg, args.seed)
    params = _experiment_params(args, cfg)
    out = _resolve_out(args, cfg)
    chash = config_hash({k: v for k, v in cfg.items() if not k.startswith("_")})
    surface, specs, images, reports = _render_experiment(cfg, params, out)

    rows = []
    for name, img in images.items():
        lo, hi = img.value_range()
        write_field(img, out / f"{name}.pgm",
                    extra_meta={"config_hash": chash, "image": name,
                                "derivative_scale_px": params["scale_px"]})
        rows.append({"image": name, "min": _fmt(lo), "max": _fmt(hi),
                     "admissible": reports.get(name, {}).get("admissible", True),
                     "C1_estimate": _fmt(reports.get(name, {}).get("C1_estimate")),
                     "concavity_violation": _fmt(
                         reports.get(name, {}).get("concavity_violation"))})
    _write_csv(out / "images.csv", rows,
               ["image", "min", "max", "admissible", "C1_estimate",
                "concavity_violation"])
    _write_json(out / "admissibility.json",
                {"config_hash": chash, "reports": reports})
    figures.save_montage(images, out / "images.svg")
    log.info("rendered %d images into %s", len(images), out)
    return EXIT_OK


def _complex_artifacts(img: ScalarField, name: str, rel_threshold: float,
                       out: Path, chash: str):
    lo, hi = img.value_range()
    cx = simplify(compute_ms_complex(img, name=name), rel_threshold * (hi - lo))
    cx.field_ref["source"] = name
    labels_path = out / f"{name}_two_cells.pgm"
    write_pgm(labels_path, np.clip(cx.two_cell_labels + 1, 0, 65535), 65535)
    payload = complex_to_json(cx, two_cells_path=labels_path.name)
    payload["meta"]["config_hash"] = chash
    _write_json(out / f"{name}_complex.json", payload)
    rows = [{"id": p.id, "index": p.index, "x": _fmt(p.location[0]),
             "y": _fmt(p.location[1]), "value": _fmt(p.value),
             "persistence": _fmt(p.persistence), "on_boundary": p.on_boundary}
            for p in cx.points]
    _write_csv(out / f"{name}_points.csv", rows,
               ["id", "index", "x", "y", "value", "persistence", "on_boundary"])
    figures.save_ms_overlay(img, cx, out / f"{name}_ms.svg", title=name)
    return cx


def cmd_ms(args) -> int:
    img = read_field(args.image)
    out = _resolve_out(args, {})
    rel = args.persistence if args.persistence is not None else DEFAULTS["persistence_rel"]
    name = Path(args.image).stem
    chash = config_hash({"image": name, "persistence_rel": rel})
    _complex_artifacts(img, name, rel, out, chash)
    log.info("complex for %s written to %s", name, out)
    return EXIT_OK


def cmd_contours(args) -> int:
    img = read_field(args.image)
    out = _resolve_out(args, {})
    rel = args.persistence if args.persistence is not None else DEFAULTS["persistence_rel"]
    scale_px = args.scale if args.scale is not None else DEFAULTS["scale_px"]
    name = Path(args.image).stem
    chash = config_hash({"image": name, "persistence_rel": rel,
                         "scale_px": scale_px})
    cx = _complex_artifacts(img, name, rel, out, chash)
    scores = score_contours(img, cx, scale_px * img.spacing)
    _write_json(out / f"{name}_scores.json",
                {"config_hash": chash, "color_ramp": "viridis",
                 "scores": [s.to_dict() for s in scores]})
    rows = [{k: _fmt(v) for k, v in s.to_dict().items()} for s in scores]
    _write_csv(out / f"{name}_scores.csv", rows,
               ["one_cell_id", "K_achieved", "K_endpoint", "M_achieved",
                "derivative_scale", "boundary_flagged", "n_samples"])
    figures.save_scores_overlay(img, cx, scores, out / f"{name}_scores.svg",
                                title=name)
    log.info("%d contour scores for %s written to %s", len(scores), name, out)
    return EXIT_OK


def _verify_experiment(cfg: dict, params: dict, out: Path, chash: str):
    surface = build_surface(cfg["surface"])
    specs = build_specs(cfg.get("renderings", []), Path(cfg.get("_base_dir", ".")),
                        lights_override=cfg.get("_lights_override"))
    scale = params["scale_px"] * surface.grid.spacing
    result = invariance_matrix(
        surface, specs, delta=params["delta_px"], scale=scale,
        persistence_rel=params["persistence_rel"], top_k=params["top_k"],
        jobs=params.get("jobs", 1))

    _write_json(out / "matrix.json", {
        "config_hash": chash,
        "summary": result.summary,
        "records": [{k: _fmt(v) if not isinstance(v, (dict, list)) else v
                     for k, v in r.items()} for r in result.records],
    })
    rows = [{"source": r["source"], "target": r["target"], "rank": r["rank"],
             "K_achieved": _fmt(r["K_achieved"]), "matched": r["matched"],
             "crossing_verified": r["crossing_verified"],
             "mean_dist": _fmt(r["mean_dist"]),
             "hausdorff": _fmt(r["hausdorff"]),
             "flux_frac": _fmt(r["flux_frac"])} for r in result.records]
    _write_csv(out / "summary.csv", rows,
               ["source", "target", "rank", "K_achieved", "matched",
                "crossing_verified", "mean_dist", "hausdorff", "flux_frac"])
    figures.save_montage(result.images, out / "overview.svg",
                         overlays=result.complexes)
    for (src, rank), tube in result.tubes.items():
        if rank > 0:
            continue
        for tgt, img in result.images.items():
            rec = next(r for r in result.records
                       if r["source"] == src and r["rank"] == rank
                       and r["target"] == tgt)

            class _R:
                crossing_verified = rec["crossing_verified"]
                hausdorff_distance = rec["hausdorff"]

            figures.save_pair_overlay(
                img, tube, _R, out / f"pair_{src}_to_{tgt}.svg",
                title=f"{src} contour on {tgt}")
    return result


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    cfg["_base_dir"] = str(Path(args.config).parent)
    cfg["_lights_override"] = _lights_from_flags(args)
    cfg = _seeded_config(cfg, args.seed)
    params = _experiment_params(args, cfg)
    out = _resolve_out(args, cfg)
    chash = config_hash({k: v for k, v in cfg.items() if not k.startswith("_")})
    result = _verify_experiment(cfg, params, out, chash)
    log.info("verify matrix: %s", result.summary)
    return EXIT_OK


def cmd_limit(args) -> int:
    ic = read_ideal_contour(args.contour)
    out = _resolve_out(args, {})
    sigmas = [float(v) for v in args.sigmas.split(",")]
    seq = build_shading_sequence(ic, sigmas)
    report = verify_shading_limit(seq)
    chash = config_hash({"contour": str(args.contour), "sigmas": sigmas})
    _write_json(out / "limit_report.json",
                {"config_hash": chash, **report.to_dict()})
    per = report.per_sigma
    rows = [{k: _fmt(per[k][i]) for k in per} for i in range(len(per["sigma"]))]
    _write_csv(out / "limit.csv", rows, list(per))
    figures.save_limit_plot(per, out / "limit.svg")
    log.info("limit report: slope_ww=%.3f endpoint I_u=%.4f",
             report.slope_ww, report.endpoint_I_u)
    return EXIT_OK


def _reconstruct_experiment(cfg: dict, params: dict, out: Path, chash: str):
    surface = build_surface(cfg["surface"])
    specs = build_specs(cfg.get("renderings", []), Path(cfg.get("_base_dir", ".")),
                        lights_override=cfg.get("_lights_override"))
    normals = normals_of(surface)
    true_slant = slant_of(normals)
    silhouette = surface.silhouette
    scale = params["scale_px"] * surface.grid.spacing
    seed_mode = cfg.get("seed_values", "from_true_slant")
    top_k = int(cfg.get("recon_top_k", params.get("recon_top_k", 2)))

    recons = {}
    contour_sets = {}
    for spec in specs:
        img = render(normals, spec)
        lo, hi = img.value_range()
        cx = simplify(compute_ms_complex(img, name=spec.name),
                      params["persistence_rel"] * (hi - lo))
        by_id = {oc.id: oc for oc in cx.one_cells}
        chosen = []
        for sc in score_contours(img, cx, scale):
            if sc.boundary_flagged:
                continue
            oc = by_id[sc.one_cell_id]
            if oc.length() < 10:
                continue
            chosen.append(oc.polyline)
            if len(chosen) >= top_k:
                break
        contour_sets[spec.name] = chosen
        scaffold = build_scaffold(chosen, silhouette, seed_values=seed_mode,
                                  true_slant=true_slant,
                                  provenance={"image": spec.name})
        recons[spec.name] = inpaint(scaffold, silhouette)

    baseline_scaffold = build_scaffold([], silhouette,
                                       seed_values="from_boundary_diffusion")
    baseline = inpaint(baseline_scaffold, silhouette)

    true_vals = np.clip(true_slant.grid.values, 0.0, math.pi / 2)
    names = list(recons)
    images_norm = {}
    for spec in specs:
        img = render(normals, spec)
        lo, hi = img.value_range()
        images_norm[spec.name] = (img.values - lo) / max(hi - lo, 1e-30)

    pair_rows = []
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            pair_rows.append({
                "pair": f"{a}|{b}",
                "rms_recon": _fmt(rms_difference(
                    recons[a].grid.values, recons[b].grid.values, silhouette)),
                "rms_images": _fmt(rms_difference(
                    images_norm[a], images_norm[b], silhouette)),
            })
    quality_rows = []
    base_rms = rms_difference(baseline.grid.values, true_vals, silhouette)
    for name in names:
        quality_rows.append({
            "image": name,
            "rms_to_true": _fmt(rms_difference(
                recons[name].grid.values, true_vals, silhouette)),
            "baseline_rms_to_true": _fmt(base_rms),
            "seed_values": seed_mode,
        })

    for name, sf in recons.items():
        write_field(sf.grid, out / f"recon_{name}.pgm", vmin=0.0,
                    vmax=math.pi / 2,
                    extra_meta={"config_hash": chash, "kind": "slant_recon"})
        diff = ScalarField(sf.grid.values - true_vals, sf.grid.spacing,
                           silhouette)
        write_field(diff, out / f"recon_{name}_diff.pgm",
                    vmin=-math.pi / 2, vmax=math.pi / 2,
                    extra_meta={"config_hash": chash, "kind": "signed_diff"})
    write_field(baseline.grid, out / "recon_boundary_only.pgm", vmin=0.0,
                vmax=math.pi / 2,
                extra_meta={"config_hash": chash, "kind": "slant_recon"})
    _write_csv(out / "recon_pairs.csv", pair_rows,
               ["pair", "rms_recon", "rms_images"])
    _write_csv(out / "recon_quality.csv", quality_rows,
               ["image", "rms_to_true", "baseline_rms_to_true", "seed_values"])
    figures.save_recon_figure(true_slant.grid, recons, out / "recon.svg")
    return pair_rows, quality_rows


def cmd_reconstruct(args) -> int:
    cfg = load_config(args.config)
    cfg["_base_dir"] = str(Path(args.config).parent)
    cfg["_lights_override"] = _lights_from_flags(args)
    cfg = _seeded_config(cfg, args.seed)
    params = _experiment_params(args, cfg)
    out = _resolve_out(args, cfg)
    chash = config_hash({k: v for k, v in cfg.items() if not k.startswith("_")})
    pair_rows, quality_rows = _reconstruct_experiment(cfg, params, out, chash)
    log.info("reconstruction: %d pair rows, %d quality rows",
             len(pair_rows), len(quality_rows))
    return EXIT_OK


def cmd_all(args) -> int:
    cfg = load_config(args.config)
    experiments = cfg.get("experiments")
    if not experiments:
        raise SpecError("'all' expects a config with an 'experiments' list")
    out_root = _resolve_out(args, cfg)
    for exp in experiments:
        exp = dict(exp)
        exp["_base_dir"] = str(Path(args.config).parent)
        exp["_lights_override"] = _lights_from_flags(args)
        exp = _seeded_config(exp, args.seed)
        params = _experiment_params(args, exp)
        name = exp.get("name", "experiment")
        out = out_root / name
        out.mkdir(parents=True, exist_ok=True)
        chash = config_hash({k: v for k, v in exp.items()
                             if not k.startswith("_")})
        log.info("=== experiment %s -> %s", name, out)

        # render artifacts
        surface, specs, images, reports = _render_experiment(exp, params, out)
        rows = []
        for img_name, img in images.items():
            lo, hi = img.value_range()
            write_field(img, out / f"{img_name}.pgm",
                        extra_meta={"config_hash": chash, "image": img_name})
            rows.append({"image": img_name, "min": _fmt(lo), "max": _fmt(hi)})
        _write_csv(out / "images.csv", rows, ["image", "min", "max"])
        _write_json(out / "admissibility.json",
                    {"config_hash": chash, "reports": reports})
        figures.save_montage(images, out / "images.svg")

        _verify_experiment(exp, params, out, chash)
        if exp.get("reconstruct"):
            _reconstruct_experiment(exp, params, out, chash)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cc",
        description="Critical-contour pipeline: render, extract, verify, "
                    "reconstruct.")
    parser.add_argument("--out", help="output directory (or env CC_OUT)")
    parser.add_argument("--scale", type=float, default=None,
                        help="derivative scale in pixels (default 1.5)")
    parser.add_argument("--persistence", type=float, default=None,
                        help="simplification threshold as a fraction of the "
                             "value range (default 0.05)")
    parser.add_argument("--delta", type=float, default=None,
                        help="tube half-width in pixels (default 3)")
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker threads for matrix entries")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed override for seeded surfaces")
    parser.add_argument("--light", action="append", default=[],
                        metavar="AZ,EL,WEIGHT",
                        help="light triple (repeatable); overrides config "
                             "lights of lit renderings")
    parser.add_argument("-v", "--verbose", action="store_true")

    subs = parser.add_subparsers(dest="command", required=True)
    p = subs.add_parser("render", help="render images of a configured surface")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_render)
    p = subs.add_parser("ms", help="Morse-Smale complex of an image")
    p.add_argument("image", help="16-bit PGM with JSON sidecar")
    p.set_defaults(fn=cmd_ms)
    p = subs.add_parser("contours", help="score 1-cells as critical contours")
    p.add_argument("image")
    p.set_defaults(fn=cmd_contours)
    p = subs.add_parser("verify", help="cross-rendering invariance matrix")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_verify)
    p = subs.add_parser("limit", help="shading-limit report for an ideal contour")
    p.add_argument("contour", help="text file of 'x y intensity' lines")
    p.add_argument("--sigmas", default="24,16,12,8,5,3,2",
                   help="comma-separated blur ladder in pixels, decreasing")
    p.set_defaults(fn=cmd_limit)
    p = subs.add_parser("reconstruct", help="slant from the contour scaffold")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_reconstruct)
    p = subs.add_parser("all", help="run every configured experiment")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_all)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ArgumentError, DomainError, SpecError) as exc:
        _emit_error(exc, EXIT_CONFIG)
        return EXIT_CONFIG
    except NumericalError as exc:
        _emit_error(exc, EXIT_NUMERIC)
        return EXIT_NUMERIC
    except OSError as exc:
        _emit_error(exc, EXIT_IO)
        return EXIT_IO


def _emit_error(exc: Exception, code: int) -> None:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc),
                         "exit_code": code}}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
