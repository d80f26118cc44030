"""The five pipeline commands: gen, maps, train, eval, report.

Each command takes a :class:`Context` and returns the path it wrote.
Refusals raise :class:`PreconditionError` before anything is written.
"""
from __future__ import annotations

import csv
import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, evaluation, workflow
from .baselines import LogisticModel
from .bundle import (
    DERIVED_COLUMNS,
    FORMAT_VERSION,
    NORM_FILES,
    RECORD_COLUMNS,
    Bundle,
    dump_json,
    grid_files,
    scan_files,
    sha256_bytes,
)
from .config import RunConfig, describe_phantom
from .errors import ConfigError, PreconditionError
from .hybrid import HybridModel
from .maps import REFLECTANCE_DB, THICKNESS_UM, RingProfileSet
from .phantom import CohortSpec, plan_cohort
from .workflow import MODEL_ARMS, GridStack


@dataclass
class Context:
    cfg: RunConfig = field(default_factory=RunConfig.from_dict)
    out: Path | None = None
    force: bool = False
    threads: int = 1
    log: object = None

    def say(self, msg):
        if self.log is not None:
            self.log(msg)


def _require_out(ctx):
    if ctx.out is None:
        raise PreconditionError("--out is required for this command")
    return Path(ctx.out)


def _prepare_dir(path: Path, force: bool):
    """Refuse a non-empty directory unless forced; with force, empty it."""
    if path.exists() and not path.is_dir():
        raise PreconditionError(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()):
        if not force:
            raise PreconditionError(f"{path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------- gen


def cmd_gen(ctx: Context) -> Path:
    out = _require_out(ctx)
    cfg = ctx.cfg
    _prepare_dir(out, ctx.force)
    render = cfg.render_spec()
    cohort = plan_cohort(cfg.cohort_spec(), cfg.phenotype_spec(), cfg.lesion_spec(), render)
    bundle = Bundle(out)
    manifest = {
        "format_version": FORMAT_VERSION,
        "tool": "octhybrid",
        "tool_version": __version__,
        "generator_version": cohort.version,
        "seed": cfg.seed,
        "generator": describe_phantom(cfg),
        "geometry": {
            "ring_diameters_mm": list(render.ring_diameters),
            "n_angles": render.n_angles,
            "angle_convention": "theta_j = 2*pi*j/n_angles",
            "layout": "ring-major: [ring, angle]",
        },
        "scans": [],
        "arrays": {},
        "ground_truth": {
            "note": "generator truth for tests; not a model input",
            "eyes": {},
            "scans": {},
        },
    }
    bundle.set_manifest(manifest)
    rows = []
    n = cohort.n_scans
    done = 0
    for plan in cohort.eyes:
        eye_key = f"{plan.subject_id}-{plan.eye}"
        manifest["ground_truth"]["eyes"][eye_key] = {
            "group": plan.group,
            "defects": [d.to_dict() for d in plan.defects],
            "targets": {k: float(v) for k, v in plan.targets.items()},
            "phenotype_rnfl_flv": plan.record.rnfl_flv,
        }
        for k in range(plan.n_scans):
            sid, eye = _render(cohort, plan, k)
            files = scan_files(sid)
            p = eye.profiles
            dims = [len(p.ring_diameters), p.n_angles]
            bundle.write_array(files["nfl_band_sum"], p.nfl_band_sum, dims, "a.u.")
            bundle.write_array(files["ppec_band_mean"], p.ppec_band_mean, dims, "a.u.")
            bundle.write_array(files["nfl_thickness"], p.nfl_thickness, dims, "um")
            bundle.write_array(files["shadow"], eye.vessel_mask.astype(np.float32), dims, "flag")
            manifest["scans"].append({
                "scan_id": sid,
                "subject_id": plan.subject_id,
                "eye": plan.eye,
                "scan_index": k,
                "group": plan.group,
                "disc_offset_mm": [float(v) for v in eye.disc_offset],
                "files": files,
            })
            manifest["ground_truth"]["scans"][sid] = {
                "bias_db": float(eye.bias[0]),
                "bias_phase": float(eye.bias[1]),
                "levels": eye.levels,
            }
            row = eye.record.to_dict()
            row["scan_id"] = sid
            row["label"] = eye.record.label
            rows.append(row)
            done += 1
            if done % 200 == 0:
                ctx.say(f"gen: {done}/{n} scans")
    bundle.write_records(rows, RECORD_COLUMNS)
    bundle.save_manifest()
    cfg.write(out / "gen_config.json")
    ctx.say(f"gen: wrote {n} scans from {len(cohort.eyes)} eyes to {out}")
    return out


def _render(cohort, plan, k):
    from .phantom import render_scan, scan_id

    return scan_id(plan, k), render_scan(cohort, plan, k)


# ---------------------------------------------------------------- maps


def _open_bundle(path, audit=False) -> Bundle:
    if path is None:
        raise PreconditionError("--bundle is required")
    bundle = Bundle(path, audit=audit)
    bundle.manifest  # noqa: B018 - loads and version-checks
    return bundle


def _load_profiles(bundle: Bundle, scan):
    f = scan["files"]
    diam = bundle.manifest["geometry"]["ring_diameters_mm"]
    prof = RingProfileSet(
        diam,
        bundle.read_array(f["nfl_band_sum"]),
        bundle.read_array(f["ppec_band_mean"]),
        bundle.read_array(f["nfl_thickness"]),
    )
    return prof, bundle.read_array(f["shadow"]) > 0.5, tuple(scan["disc_offset_mm"])


def cmd_maps(ctx: Context, bundle_path) -> Path:
    cfg = ctx.cfg
    bundle = _open_bundle(bundle_path)
    pipe = cfg.pipeline_config()
    scans = bundle.scans()
    inputs = [_load_profiles(bundle, s) for s in scans]
    ctx.say(f"maps: processing {len(inputs)} scans")
    grids = workflow.process_scans(inputs, pipe, threads=ctx.threads)
    records = bundle.read_records()
    by_id = {r["scan_id"]: r for r in records}
    records = [by_id[s["scan_id"]] for s in scans]

    split = workflow.split_for(records, cfg.split_fraction, cfg.split_seed)
    subjects = [r["subject_id"] for r in records]
    ref = split.train_mask(subjects) & (workflow.labels_of(records) == 0)
    norms = workflow.fit_norms(grids, ref, cfg.flv_percentile)
    derived = workflow.derived_scalars(grids, norms)
    for i, r in enumerate(records):
        for k, v in derived.items():
            r[k] = float(v[i])

    bundle.drop_arrays("grids/")
    bundle.drop_arrays("norms/")
    dims = [pipe.n_segments, pipe.n_tracks]
    axes = {"axes": ["segment", "track"]}
    for i, s in enumerate(scans):
        f = grid_files(s["scan_id"])
        bundle.write_array(f["thickness"], grids.thickness[i].T, dims, "um", axes)
        bundle.write_array(f["thickness_counts"], grids.thickness_counts[i].T, dims, "pixels", axes)
        bundle.write_array(f["reflectance"], grids.reflectance[i].T, dims, "dB", axes)
        bundle.write_array(f["reflectance_counts"], grids.reflectance_counts[i].T, dims, "pixels", axes)
        s["grid_files"] = f
    for kind, unit in ((THICKNESS_UM, "um"), (REFLECTANCE_DB, "dB")):
        nm = norms[kind]
        for part in ("mean", "sd", "cutoff"):
            bundle.write_array(NORM_FILES[(kind, part)], getattr(nm, part).T, dims, unit, axes)
    bundle.manifest["maps"] = {
        "pipeline": cfg.doc["maps"],
        "split_seed": cfg.split_seed,
        "split_fraction": cfg.split_fraction,
        "norm_reference": "normal-group scans of the training fold",
        "n_norm_scans": int(ref.sum()),
        "empty_cell_value": "NaN",
    }
    bundle.write_records(records, RECORD_COLUMNS + DERIVED_COLUMNS)
    bundle.save_manifest()
    cfg.write(Path(bundle.root) / "maps_config.json")
    ctx.say(f"maps: wrote grids for {len(scans)} scans")
    return Path(bundle.root)


def load_grids(bundle: Bundle, scans) -> GridStack:
    parts = {k: [] for k in ("thickness", "thickness_counts", "reflectance", "reflectance_counts")}
    for s in scans:
        f = s.get("grid_files") or grid_files(s["scan_id"])
        for k in parts:
            parts[k].append(bundle.read_array(f[k]).T)
    return GridStack(
        np.stack(parts["thickness"]),
        np.rint(np.stack(parts["thickness_counts"])).astype(np.int64),
        np.stack(parts["reflectance"]),
        np.rint(np.stack(parts["reflectance_counts"])).astype(np.int64),
    )


def _check_split(bundle: Bundle, cfg: RunConfig):
    if not bundle.has_grids():
        raise PreconditionError(
            f"{bundle.root} has no processed grids; run the `maps` command on it first"
        )
    m = bundle.manifest["maps"]
    if m["split_seed"] != cfg.split_seed or not math.isclose(m["split_fraction"], cfg.split_fraction):
        raise PreconditionError(
            f"bundle normative grids were built with split seed {m['split_seed']} / fraction "
            f"{m['split_fraction']}, but this run uses {cfg.split_seed} / {cfg.split_fraction}"
        )


def _fold(bundle: Bundle, cfg: RunConfig, which):
    scans = bundle.scans()
    records = {r["scan_id"]: r for r in bundle.read_records()}
    records = [records[s["scan_id"]] for s in scans]
    split = workflow.split_for(records, cfg.split_fraction, cfg.split_seed)
    subjects = [r["subject_id"] for r in records]
    mask = split.train_mask(subjects) if which == "train" else split.test_mask(subjects)
    idx = np.flatnonzero(mask)
    return [scans[i] for i in idx], [records[i] for i in idx]


# ---------------------------------------------------------------- train


def cmd_train(ctx: Context, bundle_path, arm, audit=None) -> Path:
    if arm not in MODEL_ARMS:
        raise ConfigError(f"unknown model arm {arm!r}; choose from {', '.join(MODEL_ARMS)}")
    cfg = ctx.cfg
    out = _require_out(ctx)
    model_dir = out / "models" / arm
    if model_dir.exists() and any(model_dir.iterdir()) and not ctx.force:
        raise PreconditionError(f"{model_dir} already holds a model (use --force to overwrite)")
    model_cfg = None
    if arm.startswith("hybrid"):
        model_cfg = cfg.model_config(2 if arm == "hybrid-2ch" else 1)
    bundle = _open_bundle(bundle_path, audit=audit is not None)
    _check_split(bundle, cfg)
    scans, records = _fold(bundle, cfg, "train")
    grids = load_grids(bundle, scans) if arm.startswith("hybrid") else None
    if audit is not None:
        audit.extend(bundle.accessed)
    idx = np.arange(len(records))
    ctx.say(f"train: {arm} on {len(records)} training scans")
    with threadpool_limits(limits=ctx.threads):
        model, history = workflow.fit_arm(
            arm, records, grids, idx, model_cfg=model_cfg, train_cfg=cfg.train_config(),
            lam=cfg.logistic_options()["lam"], log=ctx.say,
        )
    _prepare_dir(model_dir, True)
    meta = {
        "arm": arm,
        "split_seed": cfg.split_seed,
        "split_fraction": cfg.split_fraction,
        "bundle_manifest_sha256": sha256_bytes(bundle.manifest_path.read_bytes()),
        "n_train_scans": len(records),
    }
    if isinstance(model, LogisticModel):
        doc = model.to_json()
        doc["training"] = meta
        dump_json(model_dir / "model.json", doc)
    else:
        model.meta.update(meta)
        model.save(model_dir)
        history.to_csv(model_dir / "history.csv")
    cfg.write(out / "config.json")
    return model_dir


def _fit_logistic_opts(cfg):
    return cfg.logistic_options()


# ---------------------------------------------------------------- eval


def load_model(path):
    path = Path(path)
    if (path / "model.json").is_file():
        doc = json.loads((path / "model.json").read_text())
        model = LogisticModel.from_json(doc)
        return model, doc.get("training", {}), doc.get("training", {}).get("arm", model.variant)
    if (path / "checkpoint.json").is_file():
        model = HybridModel.load(path)
        return model, model.meta, model.meta.get("arm", path.name)
    raise PreconditionError(f"{path} holds no model (expected model.json or checkpoint.json)")


def _arm_order(name):
    base = name.split("#")[0]
    return (MODEL_ARMS.index(base) if base in MODEL_ARMS else len(MODEL_ARMS), name)


def cmd_eval(ctx: Context, bundle_path, model_dirs=None) -> Path:
    cfg = ctx.cfg
    out = _require_out(ctx)
    if not model_dirs:
        root = out / "models"
        model_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not model_dirs:
        raise PreconditionError(f"no models to evaluate (train into {out / 'models'} first)")
    bundle = _open_bundle(bundle_path)
    _check_split(bundle, cfg)
    scans, records = _fold(bundle, cfg, "test")
    grids = load_grids(bundle, scans)
    labels = workflow.labels_of(records)
    idx = np.arange(len(records))
    unit = cfg.doc["evaluation"]["unit"]
    threshold = float(cfg.doc["evaluation"]["threshold"])
    scores = {}
    for d in model_dirs:
        model, meta, name = load_model(d)
        if meta.get("split_seed") != cfg.split_seed:
            raise PreconditionError(
                f"model {d} was trained with split seed {meta.get('split_seed')}, "
                f"evaluation uses {cfg.split_seed}"
            )
        while name in scores:
            name = f"{name.split('#')[0]}#{int(name.split('#')[1]) + 1 if '#' in name else 2}"
        with threadpool_limits(limits=ctx.threads):
            s = workflow.score_arm(model, records, grids, idx)
        scores[name] = s
    y = labels
    if unit == "eye":
        keys = [f"{r['subject_id']}-{r['eye']}" for r in records]
        agg = {k: evaluation.aggregate_scores(v, labels, keys) for k, v in scores.items()}
        scores = {k: v[0] for k, v in agg.items()}
        y = next(iter(agg.values()))[1]
    names = sorted(scores, key=_arm_order)
    out.mkdir(parents=True, exist_ok=True)
    rows = [evaluation.evaluate_scores(n, scores[n], y, threshold) for n in names]
    evaluation.write_metrics_csv(out / "metrics.csv", rows, cfg.split_seed, unit)
    rocs = {}
    for n in names:
        rocs[n] = evaluation.roc_curve(scores[n], y)
        evaluation.write_roc_csv(out / f"roc_{n}.csv", rocs[n], cfg.split_seed, unit)
    comps = {
        (a, b): evaluation.delong_test(scores[a], scores[b], y)
        for i, a in enumerate(names) for b in names[i + 1:]
    }
    evaluation.write_comparisons_json(out / "comparisons.json", comps, cfg.split_seed, unit)
    (out / "roc.svg").write_text(roc_svg(rocs))
    cfg.write(out / "config.json")
    ctx.say(f"eval: {len(names)} model(s) on {len(y)} test {unit}s")
    return out


def roc_svg(rocs: dict, size=420, pad=50) -> str:
    """Self-contained ROC overlay; every curve runs from (0,0) to (1,1)."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    span = size - 2 * pad
    px = lambda f: pad + f * span
    py = lambda t: size - pad - t * span
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>',
        f'<line x1="{px(0)}" y1="{py(0)}" x2="{px(1)}" y2="{py(1)}" stroke="#999" stroke-dasharray="4 4"/>',
        f'<text x="{size / 2}" y="{size - 12}" text-anchor="middle" font-size="13">1 - specificity</text>',
        f'<text x="14" y="{size / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 14 {size / 2})">sensitivity</text>',
    ]
    for v in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{px(v)}" y="{size - pad + 16}" text-anchor="middle" font-size="11">{v:g}</text>')
        parts.append(f'<text x="{pad - 6}" y="{py(v) + 4}" text-anchor="end" font-size="11">{v:g}</text>')
    for k, (name, roc) in enumerate(rocs.items()):
        c = colors[k % len(colors)]
        pts = " ".join(f"{px(f):.3f},{py(t):.3f}" for f, t in zip(roc.fpr, roc.tpr))
        parts.append(f'<polyline class="roc" data-model="{name}" fill="none" stroke="{c}" '
                     f'stroke-width="2" points="{pts}"/>')
        ly = pad + 18 + 18 * k
        parts.append(f'<line x1="{px(0.55)}" y1="{py(0) - ly + pad}" x2="{px(0.62)}" '
                     f'y2="{py(0) - ly + pad}" stroke="{c}" stroke-width="2"/>')
        parts.append(f'<text x="{px(0.64)}" y="{py(0) - ly + pad + 4}" font-size="11">'
                     f'{name} (AUC {roc.auc:.3f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------- report


def cmd_report(ctx: Context, run_dir=None) -> Path:
    run = Path(run_dir or _require_out(ctx))
    if not run.is_dir():
        raise PreconditionError(f"{run} is not a directory")
    lines = ["# Run summary", ""]
    metrics = {}
    mpath = run / "metrics.csv"
    if mpath.is_file():
        with open(mpath, newline="") as fh:
            for row in csv.DictReader(fh):
                metrics[row["model"]] = row
    else:
        lines += ["metrics.csv: MISSING", ""]
    split_seed = next(iter(metrics.values()))["split_seed"] if metrics else "MISSING"
    unit = next(iter(metrics.values()))["unit"] if metrics else "MISSING"
    lines += [f"Split seed: {split_seed}. Evaluation unit: {unit}.", "", "## Diagnostic accuracy (test fold)", ""]
    lines.append("| model | AROC | sens @ 95% spec | sens @ 99% spec | accuracy | sensitivity | specificity |")
    lines.append("|---|---|---|---|---|---|---|")
    names = list(MODEL_ARMS) + sorted(set(metrics) - set(MODEL_ARMS), key=_arm_order)
    for name in names:
        m = metrics.get(name)
        if m is None:
            lines.append(f"| {name} | MISSING | MISSING | MISSING | MISSING | MISSING | MISSING |")
            continue
        f = lambda k: f"{float(m[k]):.3f}"
        lines.append(f"| {name} | {f('auc')} | {f('sens_at_95')} | {f('sens_at_99')} | "
                     f"{f('accuracy')} | {f('sensitivity')} | {f('specificity')} |")
    lines += ["", "## Paired AROC comparisons (DeLong)", ""]
    cpath = run / "comparisons.json"
    if cpath.is_file():
        pairs = json.loads(cpath.read_text())["pairs"]
        lines.append("| model A | model B | AROC diff | z | p | verdict |")
        lines.append("|---|---|---|---|---|---|")
        for p in pairs:
            if p["var_diff"] <= 0 and p["diff"] != 0:
                verdict = "degenerate variance; test undefined"
            elif p["p_value"] < 0.05:
                better = p["model_a"] if p["diff"] > 0 else p["model_b"]
                verdict = f"{better} higher (p < 0.05)"
            else:
                verdict = "no significant difference"
            lines.append(f"| {p['model_a']} | {p['model_b']} | {p['diff']:+.4f} | {p['z']:.3f} | "
                         f"{p['p_value']:.4g} | {verdict} |")
    else:
        lines.append("comparisons.json: MISSING")
    lines += ["", "## Configuration", ""]
    conf = run / "config.json"
    if conf.is_file():
        lines += ["```json", conf.read_text().rstrip("\n"), "```"]
    else:
        lines.append("config.json: MISSING")
    text = "\n".join(lines) + "\n"
    (run / "report.md").write_text(text)
    return run / "report.md"
