"""Command line entry point: gen, train, eval, report.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, HogwildError, NumericError
from .models import MODEL_IDS, build_model, model_from_config
from .nn import load_checkpoint
from .tasks import TASK_IDS, DatasetSpec, generate, load_dataset, save_dataset
from .training import RunRecord, TrainConfig, async_evaluate, evaluate, train

log = logging.getLogger("hogwild_gnn")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class CLIError(Exception):
    def __init__(self, msg: str, code: int = EXIT_USAGE):
        super().__init__(msg)
        self.code = code


def data_root() -> Path:
    return Path(os.environ.get("HOGWILD_GNN_DATA", "data"))


def resolve_data(path: str | None, task: str | None = None) -> Path:
    """A dataset directory: an existing path, else a name under the data root."""
    if path is None:
        if task is None:
            raise CLIError("no dataset given (use --data or --task)")
        path = task
    p = Path(path)
    if (p / "meta.json").is_file():
        return p
    q = data_root() / path
    if (q / "meta.json").is_file():
        return q
    raise CLIError(f"dataset not found: {path} (looked in . and {data_root()})")


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CLIError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CLIError(f"config {path} must hold a JSON object")
    return cfg


def merged(args: argparse.Namespace, cfg: dict, key: str, default=None):
    """Command line wins over the config file, which wins over the default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    return cfg.get(key, default)


def int_list(text) -> list:
    if isinstance(text, list):
        return [int(v) for v in text]
    if isinstance(text, int):
        return [text]
    text = str(text)
    if "-" in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v != ""]


# ------------------------------------------------------------------ gen

def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    task = merged(args, cfg, "task")
    if task is None:
        raise CLIError("gen needs --task")
    params = dict(cfg.get("params", {}))
    for key in ("p", "l", "count", "n", "radius", "images", "labels", "limit", "max_n"):
        val = getattr(args, key, None)
        if val is not None:
            params[key] = val
    spec = DatasetSpec(task, params, int(merged(args, cfg, "seed", 0)),
                       folds=int(merged(args, cfg, "folds", 10)))
    out = Path(merged(args, cfg, "out") or data_root() / task)
    ds = generate(spec)
    save_dataset(ds, out)
    sizes = [g.n for g in ds.graphs]
    print(f"{task}: {len(ds)} graphs, nodes {min(sizes)}-{max(sizes)}, p={ds.info.p} r={ds.info.r} "
          f"J={ds.info.J}, {len(ds.splits)} folds -> {out}")
    return EXIT_OK


# ------------------------------------------------------------------ train

def train_config(args, cfg: dict) -> TrainConfig:
    tc = dict(cfg.get("training", {}))
    if args.epochs is not None:
        tc["epochs"] = args.epochs
    try:
        return TrainConfig(**tc)
    except TypeError as exc:
        raise CLIError(f"bad training config: {exc}") from exc


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(resolve_data(merged(args, cfg, "data"), merged(args, cfg, "task")))
    name = merged(args, cfg, "model")
    if name is None:
        raise CLIError("train needs --model")
    model = build_model(name, ds.info.p, ds.info.J, ds.info.r, **cfg.get("overrides", {}))
    folds = int_list(merged(args, cfg, "folds", "0"))
    seeds = int_list(merged(args, cfg, "seed", 0))
    if any(f >= len(ds.splits) for f in folds):
        raise CLIError(f"dataset has {len(ds.splits)} folds, asked for {folds}")
    out = Path(merged(args, cfg, "out", "runs"))
    tcfg = train_config(args, cfg)
    records = train(model, ds, folds, seeds, tcfg, out)
    for rec in records:
        print(f"{rec.model} {rec.task} fold={rec.fold} seed={rec.seed} status={rec.status} "
              f"test={_fmt(rec.final_metric)} train={_fmt(rec.train_metric)} ({rec.wall_time_s:.1f}s)")
    failed = [r for r in records if r.status != "ok"]
    return EXIT_NUMERIC if failed else EXIT_OK


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.3f}"


# ------------------------------------------------------------------ eval

def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = merged(args, cfg, "checkpoint")
    if not ckpt or not Path(ckpt).is_file():
        raise CLIError(f"checkpoint not found: {ckpt}")
    params, meta = load_checkpoint(ckpt)
    if "model" not in meta:
        raise CLIError(f"{ckpt} carries no model description")
    want = merged(args, cfg, "model")
    if want is not None and want != meta["model"]["model"]:
        raise CLIError(f"checkpoint holds {meta['model']['model']}, not {want}")
    model = model_from_config(meta["model"])
    if set(params) != set(model.init_params(0)):
        raise CLIError(f"checkpoint parameters do not match model {model.name}")
    task = merged(args, cfg, "task", meta.get("task", {}).get("task"))
    ds = load_dataset(resolve_data(merged(args, cfg, "data"), task))
    if (ds.info.p, ds.info.J) != (model.p, model.J):
        raise CLIError(f"dataset ({ds.info.task}) does not fit the checkpointed model")
    fold = int(merged(args, cfg, "fold", meta.get("fold", 0)))
    test = ds.subset(ds.splits[fold].test)
    mode = merged(args, cfg, "mode", "sync")
    out = Path(merged(args, cfg, "out", Path(ckpt).parent))
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(ckpt).name.replace(".ckpt.json", "")
    base = {"model": model.name, "task": ds.info.task, "fold": fold, "checkpoint": Path(ckpt).name}
    if mode == "sync":
        m, _ = evaluate(model, params, test, ds.info)
        doc = {**base, "mode": "sync", "metric": m, "graphs": len(test)}
        print(f"{model.name} {ds.info.task} sync metric {m:.4f} on {len(test)} graphs")
    elif mode == "async":
        samples = int(merged(args, cfg, "samples", 10))
        seeds = int_list(merged(args, cfg, "async_seeds", "0-4"))
        S, D = int(merged(args, cfg, "S", 4)), int(merged(args, cfg, "D", 3))
        res = async_evaluate(model, params, test[:samples], ds.info, seeds, S, D)
        doc = {**base, "mode": "async", "graphs": len(test[:samples]), **res}
        with open(out / f"{stem}.eval_async.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "sync_metric", "async_metric", "deviation"])
            for s, a, d in zip(seeds, res["async_metrics"], res["deviation"]):
                w.writerow([s, f"{res['sync_metric']:.10g}", f"{a:.10g}", f"{d:.10g}"])
        print(f"{model.name} {ds.info.task} async deviation {res['deviation_mean']:.4g} "
              f"+- {res['deviation_std']:.4g} (sync {res['sync_metric']:.4f}, "
              f"max pairwise output distance {res['max_pairwise_distance']:.3g})")
        if res["audit_violations"]:
            raise CLIError(f"staleness audit reported {res['audit_violations']} violations", EXIT_NUMERIC)
    else:
        raise CLIError(f"unknown mode {mode!r} (sync or async)")
    (out / f"{stem}.eval_{mode}.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ report

def collect(run_dirs) -> tuple:
    records, evals = [], []
    for d in run_dirs:
        d = Path(d)
        if not d.is_dir():
            raise CLIError(f"not a directory: {d}")
        records += [RunRecord.load(p) for p in sorted(d.rglob("*.record.json"))]
        evals += [json.loads(p.read_text()) for p in sorted(d.rglob("*.eval_async.json"))]
    return records, evals


def _mean_std(vals) -> str:
    vals = [v for v in vals if v is not None]
    if not vals:
        return "n/a"
    return f"{np.mean(vals):.2f} ± {np.std(vals):.2f}"


def cmd_report(args) -> int:
    records, evals = collect(args.runs)
    if not records:
        raise CLIError("no run records found")
    groups: dict = {}
    for r in records:
        groups.setdefault((r.task, r.model), []).append(r)
    adev: dict = {}
    for e in evals:
        adev.setdefault((e["task"], e["model"]), []).extend(e["deviation"])
    rows = []
    for (task, model), recs in sorted(groups.items()):
        rows.append({"task": task, "model": model, "runs": len(recs),
                     "failed": sum(r.status != "ok" for r in recs),
                     "test_metric": _mean_std([r.final_metric for r in recs]),
                     "async_deviation": _mean_std(adev.get((task, model), []))})
    out = Path(args.out or args.runs[0])
    out.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0])
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    lines = []
    for task in sorted({r["task"] for r in rows}):
        lines += [f"## {task}", "", "| " + " | ".join(keys[1:]) + " |",
                  "|" + "---|" * (len(keys) - 1)]
        lines += ["| " + " | ".join(str(r[k]) for k in keys[1:]) + " |" for r in rows if r["task"] == task]
        lines.append("")
    (out / "report.md").write_text("\n".join(lines))
    print("\n".join(lines))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hogwild-gnn", description="Implicit vs explicit GNNs under asynchronous inference.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config; command line flags take precedence")
        p.add_argument("--seed", default=None)
        p.add_argument("--threads", type=int, default=None, help="accepted for compatibility; runs are sequential")
        p.add_argument("--out", default=None)

    g = sub.add_parser("gen", help="generate a dataset directory")
    common(g)
    g.add_argument("--task", choices=TASK_IDS)
    g.add_argument("--p", type=int)
    g.add_argument("--l", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--max-n", dest="max_n", type=int)
    g.add_argument("--radius", type=float)
    g.add_argument("--images")
    g.add_argument("--labels")
    g.add_argument("--limit", type=int)
    g.add_argument("--folds", type=int)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    t.add_argument("--data")
    t.add_argument("--task", choices=TASK_IDS)
    t.add_argument("--model", choices=MODEL_IDS)
    t.add_argument("--folds", help="fold ids: '0', '0,2', '0-4'")
    t.add_argument("--epochs", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint, synchronously or asynchronously")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--task", choices=TASK_IDS)
    e.add_argument("--model", choices=MODEL_IDS)
    e.add_argument("--mode", choices=("sync", "async"))
    e.add_argument("--fold", type=int)
    e.add_argument("--samples", type=int)
    e.add_argument("--async-seeds", dest="async_seeds")
    e.add_argument("--S", type=int)
    e.add_argument("--D", type=int)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="summarize run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HogwildError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
