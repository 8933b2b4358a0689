"""Command-line entry point: gen, train, eval, export, interp.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``PPD_THREADS`` caps the BLAS/OpenMP worker threads.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .datagen import CATEGORIES, Dataset, GenConfig, generate_dataset
from .evaluation import METRICS, Prediction, evaluate, predict
from .fields import Mesh, interpolate, marching_cubes, part_meshes, write_obj
from .nets import load_checkpoint
from .trainer import TrainConfig, TrainingError, fit

log = logging.getLogger("partpose")

RUN_KEYS = ("data", "out", "eval")
EVAL_KEYS = ("metrics", "label_source", "tau", "res", "seed")


class UsageError(Exception):
    pass


# -- configuration ------------------------------------------------------------------------
def load_run_config(path) -> dict:
    """Read a run config JSON and reject keys it does not know."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON in config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    known = {f.name for f in fields(TrainConfig)} | set(RUN_KEYS)
    unknown = sorted(set(doc) - known)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    bad = sorted(set(doc.get("eval", {})) - set(EVAL_KEYS))
    if bad:
        raise UsageError(f"unknown config key(s): {', '.join('eval.' + k for k in bad)}")
    return doc


def train_config_from(doc: dict, overrides: dict) -> TrainConfig:
    d = {k: v for k, v in doc.items() if k not in RUN_KEYS}
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def parse_instance(ds: Dataset, text: str) -> int:
    """Dataset index from ``K`` or ``SAMPLE:POSE``."""
    try:
        if ":" in text:
            s, p = text.split(":")
            return ds.find(int(s), int(p))
        k = int(text)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"no instance {text!r}: {exc}") from exc
    if not 0 <= k < len(ds):
        raise UsageError(f"instance index {k} out of range (dataset has {len(ds)})")
    return k


def _header(args, extra: dict | None = None) -> list[str]:
    echo = {k: v for k, v in vars(args).items() if k != "func"}
    echo.update(extra or {})
    return [f"partpose {__version__}", "config " + json.dumps(echo, sort_keys=True, default=str)]


# -- commands --------------------------------------------------------------------------------
def cmd_gen(args) -> int:
    grids = sorted({int(g) for g in args.grid.split(",")})
    if not set(grids) <= {16, 32}:
        raise UsageError("--grid accepts 16 and/or 32")
    cfg = GenConfig(category=args.category, samples=args.samples, poses=args.poses,
                    test_samples=args.test_samples, test_poses=args.test_poses, points=args.points,
                    occ_points=args.occ_points, seed=args.seed)
    manifest = generate_dataset(args.out, cfg, force=args.force)
    print(f"wrote {len(manifest['instances'])} instances to {args.out}")
    return 0


def cmd_train(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    data = args.data or doc.get("data")
    out = args.out or doc.get("out")
    if not data or not out:
        raise UsageError("--data and --out are required (on the command line or in --config)")
    cfg = train_config_from(doc, {"stage1_steps": args.stage1_steps, "stage2_steps": args.stage2_steps,
                                  "batch": args.batch, "lr": args.lr, "seed": args.seed})
    ds = Dataset(data)
    train = [ds[k] for k in ds.indices("train")]
    effective = {"data": str(data), "out": str(out), **cfg.to_dict(), "version": __version__}
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "config.json").write_text(json.dumps(effective, indent=1, sort_keys=True))
    print(json.dumps(effective, sort_keys=True))
    tr = fit(train, cfg, out_dir=out, progress=True)
    print(f"trained {tr.step} steps; checkpoint {Path(out) / 'final.ckpt'}")
    return 0


def _part_counts(kinds) -> list[int]:
    names = [k.value for k in kinds]
    return [names.count("fixed"), names.count("revolute"), names.count("prismatic")]


EVAL_DEFAULTS = {"metrics": ",".join(METRICS), "label_source": "canonical", "tau": 0.01, "res": 32, "seed": 0}


def _eval_settings(args) -> None:
    """Fill unset eval flags from the config's ``eval`` section, then from the defaults."""
    section = load_run_config(args.config).get("eval", {}) if args.config else {}
    if isinstance(section.get("metrics"), list):
        section["metrics"] = ",".join(section["metrics"])
    for key, default in EVAL_DEFAULTS.items():
        if getattr(args, key) is None:
            setattr(args, key, section.get(key, default))
    if args.label_source not in ("canonical", "all"):
        raise UsageError(f"label_source must be canonical or all, got {args.label_source!r}")


def cmd_eval(args) -> int:
    _eval_settings(args)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = sorted(set(metrics) - set(METRICS))
    if unknown:
        raise UsageError(f"unknown metric(s): {', '.join(unknown)}; choose from {', '.join(METRICS)}")
    model, header = load_checkpoint(args.ckpt)
    if args.parts:
        want = [int(v) for v in args.parts.split(",")]
        have = _part_counts(model.kinds)
        if want != have:
            raise RuntimeError(f"part budget mismatch: checkpoint has fixed/revolute/prismatic = {have}, "
                               f"--parts asked for {want}")
    ds = Dataset(args.data)
    effective = {k: v for k, v in vars(args).items() if k != "func"}
    effective["metrics"] = metrics
    effective["train_config"] = header.get("extra", {}).get("train_config")
    report = evaluate(model, ds, metrics, args.label_source, tau=args.tau, res=args.res, seed=args.seed,
                      config=effective)
    text = json.dumps(report.to_dict(), indent=1, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text)
    print(text)
    return 0


def _reconstruct(model, inst, res) -> Prediction:
    return predict(model, [inst], res)[0]


def cmd_export(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    ds = Dataset(args.data)
    k = parse_instance(ds, args.instance)
    pred = _reconstruct(model, ds[k], args.grid)
    groups = part_meshes(pred.grid)
    if not groups:
        log.warning("empty reconstruction for instance %s; writing an empty OBJ", args.instance)
    write_obj(args.obj, groups, _header(args, {"instance_index": k}))
    print(f"wrote {len(groups)} part group(s) to {args.obj}")
    return 0


def cmd_interp(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    ds = Dataset(args.data)
    src = ds[parse_instance(ds, args.source)]
    tgt = ds[parse_instance(ds, args.target)]
    steps = interpolate(model, src.surface, tgt.surface, args.mode, args.steps, args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_rows = []
    for k, st in enumerate(steps):
        grid = st["grid"]
        mesh = marching_cubes(grid.values) if grid.values.max() > 0.5 else Mesh.empty()
        name = f"interp_{k:03d}.obj"
        write_obj(out / name, [("shape", mesh)] if not mesh.is_empty else [],
                  _header(args, {"t": st["t"]}))
        log_rows.append({"file": name, "t": st["t"], "z_s": st["z_s"].tolist(),
                         "states": {str(i): s for i, s in st["states"].items()}})
    effective = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "interp.json").write_text(json.dumps({"version": __version__, "config": effective, "steps": log_rows},
                                                indent=1, sort_keys=True))
    print(f"wrote {len(steps)} OBJ file(s) to {out}")
    return 0


# -- parser -----------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="partpose", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic articulated dataset")
    g.add_argument("--category", required=True, choices=CATEGORIES)
    g.add_argument("--samples", type=int, default=20)
    g.add_argument("--poses", type=int, default=50)
    g.add_argument("--test-samples", type=int, default=5)
    g.add_argument("--test-poses", type=int, default=20)
    g.add_argument("--points", type=int, default=4096)
    g.add_argument("--occ-points", type=int, default=4096)
    g.add_argument("--grid", default="16,32")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--config")
    t.add_argument("--stage1-steps", type=int)
    t.add_argument("--stage2-steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config", help="run config JSON; its eval section supplies defaults")
    e.add_argument("--metrics", help=f"comma list from {','.join(METRICS)} (default: all)")
    e.add_argument("--label-source", choices=("canonical", "all"))
    e.add_argument("--report")
    e.add_argument("--tau", type=float, help="F-score distance threshold (default 0.01)")
    e.add_argument("--res", type=int, help="reconstruction grid resolution (default 32)")
    e.add_argument("--seed", type=int)
    e.add_argument("--parts", help="expected fixed,revolute,prismatic part counts, e.g. 1,3,4")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="export a reconstruction as OBJ")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--instance", required=True, help="dataset index or SAMPLE:POSE")
    x.add_argument("--grid", type=int, default=32)
    x.add_argument("--obj", required=True)
    x.set_defaults(func=cmd_export)

    i = sub.add_parser("interp", help="interpolate shape or joint state between two instances")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--source", required=True)
    i.add_argument("--target", required=True)
    i.add_argument("--mode", choices=("shape", "state"), default="state")
    i.add_argument("--steps", type=int, default=5)
    i.add_argument("--grid", type=int, default=32)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_interp)
    return ap


def _thread_limit():
    raw = os.environ.get("PPD_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PPD_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("PPD_THREADS must be >= 1")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"partpose: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError, TrainingError) as exc:
        print(f"partpose: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
