"""Command-line entry point.

Commands: prepare, train, eval, infer, ablate, report. Configuration for
train/ablate is a flat JSON object; precedence is

    built-in defaults < --preset < --config file < explicit flags

and the fully resolved result is written to ``<out>/config.json`` before any
work starts, so ``train --config <out>/config.json`` repeats the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import resource
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from importlib import resources as ilr
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import SOURCES, DatasetManifest, build_manifest, load_gt_cloud, preprocess_image
from .errors import Rgb2PointError, ResolutionMismatchError
from .metrics import (
    MetricReport,
    SampleMetrics,
    _render_rows,
    aggregate_report,
    difference_percent,
    evaluate_pair,
    improvement_percent,
)
from .model import GeneratorModel, ModelConfig, count_parameters, load_model_checkpoint
from .pointcloud import save_cloud
from .training import TrainConfig, fit, load_checkpoint

log = logging.getLogger("rgb2point")

BACKBONE_ALIASES = {"vit": "vit-imagenet", "resnet50": "resnet50-imagenet"}
METRIC_ALIASES = {"cd": "chamfer", "chamfer": "chamfer", "emd": "emd", "f": "fscore", "fscore": "fscore", "f-score": "fscore"}
CATEGORY_ALIASES = {"aircraft": "airplane", "plane": "airplane", "speaker": "loudspeaker"}

MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig)]
TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]
RUN_KEYS = ["manifest", "out", "val_split", "resume", "device"]

PRESETS = {
    "paper": dict(heads=4, hidden_dim=2048, feature_dim=1024, n_points=1024, alpha=5.0,
                  learning_rate=1e-4, batch_size=32, backbone="vit-imagenet", pretrained=True),
}

# (H, D, A) in the published row order of the hyperparameter grid
TABLE4_GRID = [
    (2, 1024, 1024), (2, 1024, 2048), (2, 1024, 4096), (2, 2048, 1024),
    (2, 2048, 2048), (2, 2048, 4096), (4, 2048, 2048), (4, 2048, 1024),
    (4, 2048, 4096), (8, 2048, 2048), (8, 2048, 4096), (8, 2048, 1024),
    (16, 1024, 1024), (16, 1024, 2048), (16, 2048, 1024), (16, 2048, 2048),
]


class CliError(Rgb2PointError):
    pass


# --------------------------------------------------------------------------
# config plumbing


def default_run_config() -> dict:
    cfg = {}
    cfg.update(dataclasses.asdict(ModelConfig()))
    cfg.update(TrainConfig().to_dict())
    cfg.update({k: None for k in RUN_KEYS})
    cfg["device"] = "cpu"
    return cfg


def resolve_config(args: argparse.Namespace, base: Optional[dict] = None) -> dict:
    cfg = dict(base or default_run_config())
    if getattr(args, "preset", None):
        cfg.update(PRESETS[args.preset])
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise CliError(f"{args.config}: unknown config keys {unknown}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg["backbone"] = BACKBONE_ALIASES.get(cfg["backbone"], cfg["backbone"])
    return cfg


def split_config(cfg: dict):
    model_cfg = ModelConfig(**{k: cfg[k] for k in MODEL_KEYS})
    train_cfg = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})
    return model_cfg, train_cfg


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def parse_metrics(spec: str) -> List[str]:
    out = []
    for name in spec.split(","):
        name = name.strip().lower()
        if name not in METRIC_ALIASES:
            raise CliError(f"unknown metric {name!r}; choose from cd, emd, fscore")
        out.append(METRIC_ALIASES[name])
    return list(dict.fromkeys(out))


def load_baselines(path: Optional[str] = None) -> dict:
    if path:
        return json.loads(Path(path).read_text())
    return json.loads(ilr.files("rgb2point").joinpath("baselines.json").read_text())


def canonical_category(name: str) -> str:
    name = name.lower()
    return CATEGORY_ALIASES.get(name, name)


# --------------------------------------------------------------------------
# prepare


def cmd_prepare(args) -> int:
    categories = args.categories.split(",") if args.categories else None
    manifest = build_manifest(args.root, args.source, args.split_file, args.gt_resolution, categories)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {
        "command": "prepare", "root": str(Path(args.root).resolve()), "source": args.source,
        "split_file": str(Path(args.split_file).resolve()) if args.split_file else None,
        "gt_resolution": args.gt_resolution, "categories": categories,
    })
    manifest.write(out / "manifest.jsonl")
    counts: Dict[str, Dict[str, int]] = {}
    for r in manifest.records:
        counts.setdefault(r.category, {}).setdefault(r.split, 0)
        counts[r.category][r.split] += 1
    summary = {
        "records": len(manifest.records),
        "splits": {s: len(manifest.split(s)) for s in ("train", "test")},
        "categories": counts,
    }
    write_json(out / "summary.json", summary)
    print(f"{len(manifest.records)} records ({summary['splits']['train']} train, "
          f"{summary['splits']['test']} test) in {len(counts)} categories -> {out / 'manifest.jsonl'}")
    return 0


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if not cfg["manifest"] or not cfg["out"]:
        raise CliError("train needs --manifest and --out (or both keys in --config)")
    out = Path(cfg["out"])
    write_json(out / "config.json", cfg)
    model_cfg, train_cfg = split_config(cfg)
    manifest = DatasetManifest.read(cfg["manifest"])
    state = None
    if cfg["resume"]:
        state = load_checkpoint(cfg["resume"], cfg["weights_path"])
        state.config = train_cfg
        model = state.model
    else:
        model = GeneratorModel(model_cfg)
    model.to(cfg["device"])
    frozen, trainable = count_parameters(model)
    log.info("backbone %s: %d frozen / %d trainable parameters", model.config.backbone, frozen, trainable)
    val = manifest.split(cfg["val_split"]) if cfg["val_split"] else None
    state = fit(model, manifest, train_cfg, out_dir=out, state=state, val=val)
    write_json(out / "summary.json", {
        "steps": state.step,
        "epochs": state.epoch,
        "final_loss": state.history[-1]["loss"] if state.history else None,
        "best_val_chamfer": state.best_val if np.isfinite(state.best_val) else None,
        "trainable_parameters": trainable,
        "frozen_parameters": frozen,
    })
    return 0


# --------------------------------------------------------------------------
# eval


def precomputed_samples(path: str, metric_filter: Optional[Sequence[str]]) -> List[SampleMetrics]:
    """Accept a report-like ``{"per_sample": [...]}`` or ``{metric: {category: value}}``."""
    raw = json.loads(Path(path).read_text())
    if "per_sample" in raw:
        samples = [SampleMetrics(s["sample_id"], s["category"], dict(s["values"])) for s in raw["per_sample"]]
    else:
        by_cat: Dict[str, Dict[str, float]] = {}
        for metric, values in raw.items():
            if metric.lower() not in METRIC_ALIASES:
                raise CliError(f"{path}: unknown metric {metric!r}")
            for cat, v in values.items():
                by_cat.setdefault(cat, {})[METRIC_ALIASES[metric.lower()]] = float(v)
        samples = [SampleMetrics(cat, cat, vals) for cat, vals in by_cat.items()]
    if metric_filter:
        samples = [SampleMetrics(s.sample_id, s.category, {k: v for k, v in s.values.items() if k in metric_filter})
                   for s in samples]
    return samples


def evaluate_checkpoint(checkpoint, manifest_path, split, metrics, tau, emd_solver, batch_size, seed, device,
                        weights_path=None) -> MetricReport:
    model, _ = load_model_checkpoint(checkpoint, weights_path)
    model.to(device).eval()
    manifest = DatasetManifest.read(manifest_path)
    n = model.config.n_points
    if manifest.gt_resolution != n:
        raise ResolutionMismatchError(
            f"checkpoint emits {n} points but manifest ground truth is at {manifest.gt_resolution}"
        )
    records = manifest.split(split)
    if not records:
        raise CliError(f"manifest has no {split!r} records")
    samples = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        imgs = np.stack([preprocess_image(r.images[0]) for r in chunk])
        with torch.no_grad():
            pred = model(imgs).double().cpu().numpy()
        for r, p in zip(chunk, pred):
            gt = load_gt_cloud(r, n, seed=seed)
            values = evaluate_pair(gt, p, metrics, tau=tau, solver=emd_solver)
            samples.append(SampleMetrics(r.sample_id, r.category, values))
    meta = {"split": split, "tau": tau, "metrics": list(metrics), "n_points": n, "records": len(records)}
    return aggregate_report(samples, meta)


def cmd_eval(args) -> int:
    metrics = parse_metrics(args.metrics)
    out = Path(args.out)
    write_json(out / "config.json", {k: v for k, v in vars(args).items() if k != "func"})
    if args.precomputed:
        report = aggregate_report(precomputed_samples(args.precomputed, metrics), {"source": "precomputed"})
    else:
        if not args.checkpoint or not args.manifest:
            raise CliError("eval needs --checkpoint and --manifest, or --precomputed")
        report = evaluate_checkpoint(args.checkpoint, args.manifest, args.split, metrics, args.tau,
                                     args.emd_solver, args.batch_size, args.seed, args.device, args.weights_path)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "metrics.txt").write_text(report.format_table() + "\n")
    print(report.format_table())
    return 0


# --------------------------------------------------------------------------
# infer


def percentile_summary(samples_ms: Sequence[float]) -> dict:
    a = np.asarray(samples_ms, dtype=np.float64)
    return {
        "repeats": int(len(a)),
        "mean_ms": float(a.mean()),
        "p50_ms": float(np.percentile(a, 50)),
        "p95_ms": float(np.percentile(a, 95)),
    }


def time_forward(model: GeneratorModel, image: np.ndarray, warmup: int, repeats: int) -> dict:
    cuda = model.device.type == "cuda"
    times = []
    with torch.no_grad():
        for i in range(warmup + repeats):
            if cuda:
                torch.cuda.synchronize()
            t0 = time.perf_counter()
            model(image)
            if cuda:
                torch.cuda.synchronize()
            if i >= warmup:
                times.append((time.perf_counter() - t0) * 1000.0)
    return {"warmup": warmup, **percentile_summary(times)}


def measure_memory(model: GeneratorModel, image: np.ndarray) -> dict:
    with torch.no_grad():
        if model.device.type == "cuda":
            torch.cuda.reset_peak_memory_stats(model.device)
            model(image)
            torch.cuda.synchronize()
            return {"kind": "accelerator-max-allocated",
                    "peak_mb": torch.cuda.max_memory_allocated(model.device) / 2 ** 20}
        model(image)
    # ru_maxrss is in KiB on Linux; covers the whole process, model load included
    return {"kind": "host-peak-rss", "peak_mb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0}


def cmd_infer(args) -> int:
    model, _ = load_model_checkpoint(args.checkpoint, args.weights_path)
    model.to(args.device).eval()
    image = preprocess_image(args.image)
    cloud = model.generate(image, id=Path(args.image).stem)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cloud(cloud, out)
    report = {"image": str(args.image), "points": len(cloud), "output": str(out)}
    if args.time:
        if args.repeats < 100:
            log.warning("fewer than 100 timed repeats (%d); percentiles will be noisy", args.repeats)
        report["timing"] = time_forward(model, image, args.warmup, args.repeats)
        t = report["timing"]
        print(f"latency over {t['repeats']} runs: mean {t['mean_ms']:.2f} ms, "
              f"p50 {t['p50_ms']:.2f} ms, p95 {t['p95_ms']:.2f} ms", file=sys.stderr)
    if args.mem:
        report["memory"] = measure_memory(model, image)
        print(f"peak memory ({report['memory']['kind']}): {report['memory']['peak_mb']:.1f} MB", file=sys.stderr)
    if args.time or args.mem:
        write_json(Path(args.report) if args.report else out.with_suffix(".resources.json"), report)
    return 0


# --------------------------------------------------------------------------
# ablate


def ablation_cells(grid: str, backbone: Optional[str]) -> List[dict]:
    if grid == "table4":
        cells = [dict(heads=h, hidden_dim=d, feature_dim=a) for h, d, a in TABLE4_GRID]
        if backbone:
            for c in cells:
                c["backbone"] = backbone
        return cells
    if grid == "backbones":
        names = ["vit-imagenet", backbone] if backbone and backbone != "vit-imagenet" else list(BACKBONE_ALIASES.values())
        return [dict(backbone=b) for b in names]
    if grid == "modules":
        extra = {"backbone": backbone} if backbone else {}
        return [dict(extra), dict(extra, enable_cfi=False), dict(extra, enable_gpm=False)]
    raise CliError(f"unknown grid {grid!r}")


def cell_name(i: int, cell: dict) -> str:
    parts = [f"{i:02d}"]
    if "heads" in cell:
        parts.append(f"H{cell['heads']}_D{cell['hidden_dim']}_A{cell['feature_dim']}")
    if "backbone" in cell:
        parts.append(cell["backbone"])
    if cell.get("enable_cfi") is False:
        parts.append("no-cfi")
    if cell.get("enable_gpm") is False:
        parts.append("no-gpm")
    return "_".join(parts)


def run_cell(cell_dir: Path, eval_args: List[str], subprocess_mode: bool) -> None:
    train_argv = ["train", "--config", str(cell_dir / "train_config.json")]
    eval_argv = ["eval", "--checkpoint", str(cell_dir / "last.pt"), "--out", str(cell_dir / "eval")] + eval_args
    for argv in (train_argv, eval_argv):
        if subprocess_mode:
            proc = subprocess.run([sys.executable, "-m", "rgb2point"] + argv, capture_output=True, text=True)
            (cell_dir / f"{argv[0]}.stderr").write_text(proc.stderr)
            if proc.returncode != 0:
                raise CliError(f"cell {cell_dir.name}: {argv[0]} failed (see {cell_dir / (argv[0] + '.stderr')})")
        elif main(argv) != 0:
            raise CliError(f"cell {cell_dir.name}: {argv[0]} failed")


def cell_row(cell: dict, report: MetricReport, categories: List[str]) -> dict:
    row = {k: cell.get(k) for k in ("heads", "hidden_dim", "feature_dim", "backbone", "enable_cfi", "enable_gpm")}
    for m in ("chamfer", "emd"):
        if m not in report.per_category:
            continue
        for c in categories:
            row[f"{m}_{c}"] = report.per_category[m].get(c, float("nan")) * 100.0
        row[f"{m}_avg"] = report.aggregate[m] * 100.0
    return row


def reference_averages(path: Optional[str], baselines: dict) -> Dict[tuple, Dict[str, float]]:
    """(H, D, A) -> {"chamfer": avg, "emd": avg} from a previous ablation or the shipped grid."""
    if path:
        rows = json.loads(Path(path).read_text())["rows"]
        return {(r["heads"], r["hidden_dim"], r["feature_dim"]): {"chamfer": r["chamfer_avg"], "emd": r["emd_avg"]}
                for r in rows}
    table = baselines["tables"]["table4"]
    cols = table["columns"]
    return {tuple(r[:3]): {"chamfer": r[cols.index("cd_avg")], "emd": r[cols.index("emd_avg")]} for r in table["rows"]}


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    if not base["manifest"] or not base["out"]:
        raise CliError("ablate needs --manifest and --out")
    if args.backbone:
        base["backbone"] = BACKBONE_ALIASES.get(args.backbone, args.backbone)
    grid = args.grid or ("backbones" if args.backbone else "table4")
    cells = ablation_cells(grid, base["backbone"] if args.backbone else None)
    if args.rows:
        keep = [int(i) for i in args.rows.split(",")]
        cells = [(i, cells[i]) for i in keep]
    else:
        cells = list(enumerate(cells))
    out = Path(base["out"])
    write_json(out / "config.json", dict(base, grid=grid, rows=args.rows, jobs=args.jobs))
    plan = []
    for i, cell in cells:
        cell_dir = out / cell_name(i, cell)
        cfg = dict(base, **cell, out=str(cell_dir))
        cfg["resume"] = None
        write_json(cell_dir / "train_config.json", cfg)
        plan.append((i, cell, cell_dir))
    write_json(out / "plan.json", [{"row": i, "cell": c, "dir": str(d)} for i, c, d in plan])
    if args.dry_run:
        print(f"{len(plan)} cells planned in {out}")
        return 0

    eval_args = ["--manifest", base["manifest"], "--split", args.eval_split, "--metrics", args.metrics,
                 "--tau", str(args.tau), "--device", base["device"]]
    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as pool:
            list(pool.map(lambda p: run_cell(p[2], eval_args, True), plan))
    else:
        for _, _, cell_dir in plan:
            run_cell(cell_dir, eval_args, False)

    reports = [MetricReport.from_dict(json.loads((d / "eval" / "metrics.json").read_text())) for _, _, d in plan]
    categories = sorted({c for r in reports for c in r.categories})
    rows = [dict(cell_row(c, r, categories), row=i) for (i, c, _), r in zip(plan, reports)]
    reference = None
    if not base["pretrained"] and grid == "table4":
        reference = "ablation" if args.reference else "published"
        ref = reference_averages(args.reference, load_baselines(args.baselines))
        for row in rows:
            key = (row["heads"], row["hidden_dim"], row["feature_dim"])
            for m in ("chamfer", "emd"):
                if key in ref and f"{m}_avg" in row:
                    row[f"{m}_diff_pct"] = difference_percent(row[f"{m}_avg"], ref[key][m])
    result = {"grid": grid, "pretrained": base["pretrained"], "categories": categories,
              "difference_reference": reference, "rows": rows}
    write_json(out / "ablation.json", result)
    table = format_ablation(result)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def format_ablation(result: dict) -> str:
    rows = result["rows"]
    cats = result["categories"]
    header, keys = [], []
    if result["grid"] == "table4":
        header += ["H", "D", "A"]
        keys += ["heads", "hidden_dim", "feature_dim"]
    else:
        header += ["Model"]
    for m, label in (("chamfer", "CD"), ("emd", "EMD")):
        if any(f"{m}_avg" in r for r in rows):
            header += [f"{label} {c}" for c in cats] + [f"{label} Avg."]
            keys += [f"{m}_{c}" for c in cats] + [f"{m}_avg"]
    if any("chamfer_diff_pct" in r for r in rows):
        header += ["CD Diff(%)", "EMD Diff(%)"]
        keys += ["chamfer_diff_pct", "emd_diff_pct"]

    def label(r):
        name = r.get("backbone") or "vit-imagenet"
        if r.get("enable_cfi") is False:
            name += " w/o CFI"
        if r.get("enable_gpm") is False:
            name += " w/o GPM"
        return name

    body = []
    for r in rows:
        cells = [] if result["grid"] == "table4" else [label(r)]
        for k in keys:
            v = r.get(k)
            cells.append(str(v) if isinstance(v, int) else ("-" if v is None else f"{v:.2f}"))
        body.append(cells)
    return _render_rows(header, body)


# --------------------------------------------------------------------------
# report


def _values_for(report: Optional[MetricReport], metric: str, categories: Sequence[str]) -> Optional[List[Optional[float]]]:
    if report is None or metric not in report.per_category:
        return None
    by_cat = {canonical_category(c): v for c, v in report.per_category[metric].items()}
    return [by_cat.get(canonical_category(c)) for c in categories]


def compare_table(name: str, table: dict, ours: Optional[MetricReport], published: bool) -> dict:
    kind = table["comparison"]
    direction = table["direction"]
    scale = table["scale"]
    metrics = table.get("metrics") or [table["metric"]]
    out = {"comparison": kind, "direction": direction, "metrics": {}}
    for m in metrics:
        entry: dict = {"published_improvement": table.get("published_improvement", {}).get(m)}
        if kind == "average":
            base_avg = table["published_average"]
            if published:
                ours_value = base_avg["ours"]
            else:
                vals = _values_for(ours, m, table["categories"])
                if vals is None:
                    continue
                ours_value = ours.aggregate[m] * scale
            sota = table["sota"][m]
            entry.update(ours=ours_value, sota=sota, sota_value=base_avg[sota])
            entry["improvement_percent"] = improvement_percent(ours_value, base_avg[sota], direction)
            entry["versus"] = {k: improvement_percent(ours_value, v, direction)
                               for k, v in base_avg.items() if k != "ours"}
        elif kind == "per-category-mean":
            cats = table["categories"]
            if published:
                ours_vals = table["ours"][m]
            else:
                raw = _values_for(ours, m, cats)
                if raw is None:
                    continue
                ours_vals = [None if v is None else v * scale for v in raw]
            sota_names = table["sota"][m]
            per_cat = {}
            for c, o, s in zip(cats, ours_vals, sota_names):
                if o is None:
                    continue
                ref = table["methods"][s][m][cats.index(c)]
                per_cat[c] = {"ours": o, "sota": s, "sota_value": ref,
                              "improvement_percent": improvement_percent(o, ref, direction)}
            if not per_cat:
                continue
            entry["per_category"] = per_cat
            entry["covered_categories"] = list(per_cat)
            entry["improvement_percent"] = float(np.mean([v["improvement_percent"] for v in per_cat.values()]))
        elif kind == "single":
            if published:
                ours_value = table["ours"][m]
            else:
                if ours is None or m not in ours.aggregate:
                    continue
                ours_value = ours.aggregate[m] * scale
            sota = table["sota"][m]
            ref = table["methods"][sota][m]
            entry.update(ours=ours_value, sota=sota, sota_value=ref,
                         improvement_percent=improvement_percent(ours_value, ref, direction))
            entry["versus"] = {k: improvement_percent(ours_value, v[m], direction) for k, v in table["methods"].items()}
        else:
            raise CliError(f"{name}: unknown comparison kind {kind!r}")
        out["metrics"][m] = entry
    return out


def format_report(result: dict) -> str:
    rows = []
    for name, table in result["tables"].items():
        for m, e in table["metrics"].items():
            pub = e.get("published_improvement")
            if "per_category" in e:
                ours = ", ".join(f"{c}={v['ours']:.3g}" for c, v in e["per_category"].items())
                sota = ", ".join(f"{v['sota']}={v['sota_value']:.3g}" for v in e["per_category"].values())
            else:
                ours, sota = f"{e['ours']:.3f}", f"{e['sota']}={e['sota_value']:.3f}"
            rows.append([name, m, ours, sota, f"{e['improvement_percent']:+.2f}%",
                         "-" if pub is None else f"{pub:.2f}%"])
    return _render_rows(["Table", "Metric", "Ours", "SOTA", "Improvement", "Published"], rows)


def cmd_report(args) -> int:
    baselines = load_baselines(args.baselines)
    results: Dict[str, MetricReport] = {}
    for item in args.results:
        if "=" not in item:
            raise CliError(f"result entries are TABLE=PATH, got {item!r}")
        name, path = item.split("=", 1)
        results[name] = MetricReport.from_dict(json.loads(Path(path).read_text()))
    wanted = args.tables.split(",") if args.tables else [t for t in ("table1", "table2", "table3")
                                                         if args.published or t in results]
    out = {"baselines_version": baselines.get("version"), "published": args.published, "tables": {}}
    for name in wanted:
        if name not in baselines["tables"] or "comparison" not in baselines["tables"][name]:
            raise CliError(f"no comparable table {name!r} in baselines")
        if not args.published and name not in results:
            raise CliError(f"no result file given for {name}")
        out["tables"][name] = compare_table(name, baselines["tables"][name], results.get(name), args.published)
    dest = Path(args.out)
    write_json(dest / "config.json", {k: v for k, v in vars(args).items() if k != "func"})
    write_json(dest / "report.json", out)
    text = format_report(out)
    (dest / "report.txt").write_text(text + "\n")
    print(text)
    return 0


# --------------------------------------------------------------------------
# parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config; explicit flags override it")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--device")
    g = p.add_argument_group("model")
    g.add_argument("--heads", type=int)
    g.add_argument("--hidden-dim", type=int, dest="hidden_dim", help="feed-forward width D")
    g.add_argument("--feature-dim", type=int, dest="feature_dim", help="aggregator width A")
    g.add_argument("--n-points", type=int, dest="n_points")
    g.add_argument("--no-pretrained", dest="pretrained", action="store_const", const=False)
    g.add_argument("--no-cfi", dest="enable_cfi", action="store_const", const=False)
    g.add_argument("--no-gpm", dest="enable_gpm", action="store_const", const=False)
    g.add_argument("--weights", dest="weights_path", help="backbone weight bundle (.pth)")
    g = p.add_argument_group("optimization")
    g.add_argument("--alpha", type=float)
    g.add_argument("--lr", type=float, dest="learning_rate")
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--epochs", type=int, dest="max_epochs")
    g.add_argument("--max-steps", type=int, dest="max_steps")
    g.add_argument("--seed", type=int)
    g.add_argument("--eval-every", type=int, dest="eval_every")
    g.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    g.add_argument("--no-cache-features", dest="cache_features", action="store_const", const=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgb2point", description="Single-image point cloud generation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="scan a dataset tree into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", choices=SOURCES, default="shapenet-synthetic")
    p.add_argument("--split-file")
    p.add_argument("--gt-resolution", type=int, default=1024)
    p.add_argument("--categories", help="comma-separated allow-list")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the generator head")
    _add_run_flags(p)
    p.add_argument("--backbone", choices=sorted(set(BACKBONE_ALIASES) | set(BACKBONE_ALIASES.values())))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--val-split", dest="val_split", choices=("train", "test"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--metrics", default="cd,emd,fscore")
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--emd-solver", default="auto", choices=("auto", "exact-assignment", "regularized-transport"))
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0, help="ground-truth subsampling seed")
    p.add_argument("--device", default="cpu")
    p.add_argument("--weights", dest="weights_path")
    p.add_argument("--precomputed", help="JSON of per-sample or per-category scores to aggregate instead")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="generate a point cloud from one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output .ply or .xyz")
    p.add_argument("--time", action="store_true", help="measure per-image latency")
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--mem", action="store_true", help="measure peak memory of a batch-1 forward")
    p.add_argument("--report", help="resource report path (default: next to --out)")
    p.add_argument("--device", default="cpu")
    p.add_argument("--weights", dest="weights_path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="run a grid of training cells and tabulate them")
    _add_run_flags(p)
    p.add_argument("--grid", choices=("table4", "backbones", "modules"))
    p.add_argument("--backbone", choices=sorted(set(BACKBONE_ALIASES) | set(BACKBONE_ALIASES.values())))
    p.add_argument("--rows", help="comma-separated cell indices to run")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--eval-split", default="test")
    p.add_argument("--metrics", default="cd,emd")
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--reference", help="ablation.json of the pretrained grid, for the difference column")
    p.add_argument("--baselines")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="compare metric reports to published baselines")
    p.add_argument("results", nargs="*", help="TABLE=metrics.json entries, e.g. table2=run/eval/metrics.json")
    p.add_argument("--out", required=True)
    p.add_argument("--baselines", help="baseline constants file (default: bundled)")
    p.add_argument("--tables", help="comma-separated table names")
    p.add_argument("--published", action="store_true", help="use the published values of our method")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (Rgb2PointError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        print(f"rgb2point {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
