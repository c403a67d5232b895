"""Command-line entry point.

Subcommands: ``run`` (train one configuration), ``compare`` (align runs),
``bounds`` (clipping-bound curves as CSV) and ``report`` (summarize a run).
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .clipping import ClipConfig, ClipMode, bound_curve, calibrate_thresholds
from .trainer import TrainConfig, train

log = logging.getLogger("dcpo")

RUNS_ENV = "DCPO_RUNS_DIR"
METRICS = ("tcr", "rur", "entropy", "mean_reward", "avg1", "avgk")


class UsageError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = value


def load_config(path: str | None, overrides: Sequence[str] = (), **direct) -> TrainConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _apply_override(raw, key.strip(), _parse_value(value))
    for key, value in direct.items():
        if value is not None:
            raw[key] = value
    # A method switch without an explicit clip section picks that method's defaults.
    if "method" in direct and direct["method"] is not None and "clip" not in raw:
        raw.pop("clip", None)
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set, method=args.method, steps=args.steps, seed=args.seed)
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(RUNS_ENV, "runs"))
        out = root / f"{cfg.method.value}-seed{cfg.seed}"
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    try:
        train(cfg, out, progress=args.verbose)
    except OSError as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return 1
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "outputs": sorted(p.name for p in out.iterdir()) + ["manifest.json"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(out)
    return 0


def read_steps(run_dir: str | Path) -> dict[str, np.ndarray]:
    path = Path(run_dir) / "steps.csv"
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    cols = rows[0].keys() if rows else []
    return {c: np.array([float(r[c]) for r in rows]) for c in cols}


def _label(run_dir: Path, seen: set[str]) -> str:
    label = run_dir.name
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        cfg = json.loads(cfg_path.read_text(encoding="utf-8"))
        label = f"{cfg.get('method', label)}-s{cfg.get('seed', 0)}"
    base, n = label, 2
    while label in seen:
        label = f"{base}#{n}"
        n += 1
    seen.add(label)
    return label


def _nanmean(x: np.ndarray) -> float:
    x = x[~np.isnan(x)]
    return float(x.mean()) if x.size else math.nan


def summarize(series: dict[str, np.ndarray], window: int = 50) -> dict[str, float]:
    out = {}
    after = series["epoch"] >= 1 if "epoch" in series else np.ones(len(series["step"]), bool)
    for m in METRICS:
        x = series.get(m)
        if x is None or x.size == 0:
            continue
        out[f"{m}_mean"] = _nanmean(x)
        out[f"{m}_after_epoch1"] = _nanmean(x[after])
        out[f"{m}_last{window}"] = _nanmean(x[-window:])
    return out


def cmd_compare(args: argparse.Namespace) -> int:
    if len(args.runs) < 2:
        raise UsageError("compare needs at least two run directories")
    seen: set[str] = set()
    runs = {}
    for r in args.runs:
        d = Path(r)
        if not (d / "steps.csv").exists():
            raise UsageError(f"{d}: no steps.csv")
        runs[_label(d, seen)] = read_steps(d)
    lengths = {k: len(v["step"]) for k, v in runs.items()}
    n = min(lengths.values())
    if len(set(lengths.values())) > 1:
        print(f"warning: step counts differ {lengths}; aligning on the first {n}", file=sys.stderr)
    labels = list(runs)
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step"] + [f"{m}:{lab}" for m in METRICS for lab in labels])
            for i in range(n):
                w.writerow([i] + [f"{runs[lab][m][i]:.17g}" for m in METRICS for lab in labels])
    summaries = {lab: summarize({k: v[:n] for k, v in runs[lab].items()}, args.window) for lab in labels}
    keys = list(next(iter(summaries.values())))
    first = labels[0]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["statistic"] + labels + [f"delta:{lab}-{first}" for lab in labels[1:]])
    for key in keys:
        vals = [summaries[lab][key] for lab in labels]
        deltas = [v - vals[0] for v in vals[1:]]
        w.writerow([key] + [f"{v:.6g}" for v in vals] + [f"{d:.6g}" for d in deltas])
    return 0


def _grid(text: str) -> list[float]:
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0:
                raise ValueError
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 12) for i in range(count)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad grid {text!r}: use start:stop:step or a comma list") from None


def cmd_bounds(args: argparse.Namespace) -> int:
    mode = ClipMode(args.mode)
    try:
        if mode is ClipMode.DYNAMIC_ADAPTIVE:
            lo, hi = args.eps_low, args.eps_high
            if args.eps is not None and lo is None and hi is None:
                lo, hi = calibrate_thresholds(args.eps)
            cfg = ClipConfig(mode=mode, eps_low=0.16 if lo is None else lo,
                             eps_high=0.2 if hi is None else hi, r_max=args.r_max)
        elif mode is ClipMode.FIXED_SYMMETRIC:
            cfg = ClipConfig(mode=mode, eps=0.2 if args.eps is None else args.eps, r_max=args.r_max)
        else:
            cfg = ClipConfig(mode=mode, eps_low=0.2 if args.eps_low is None else args.eps_low,
                             eps_high=0.28 if args.eps_high is None else args.eps_high, r_max=args.r_max)
        rows = bound_curve(cfg, _grid(args.grid))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["q", "lower", "upper", "mode"])
    for r in rows:
        w.writerow([f"{r.q:.17g}", f"{r.lower:.17g}", f"{r.upper:.17g}", r.mode])
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    d = Path(args.run)
    if not (d / "steps.csv").exists():
        raise UsageError(f"{d}: no steps.csv")
    series = read_steps(d)
    cfg = json.loads((d / "config.json").read_text(encoding="utf-8"))
    print(f"run: {d}  method={cfg['method']} seed={cfg['seed']} steps={len(series.get('step', []))}")
    if not series:
        return 0
    for key, val in summarize(series, args.window).items():
        print(f"  {key:<24} {val:.6g}")
    print(f"  {'responses_generated':<24} {int(series['responses_generated'].sum())}")
    print(f"  {'responses_discarded':<24} {int(series['responses_discarded'].sum())}")
    print("  (entropy: visitation-weighted token entropy of the tabular policy, a stand-in estimator)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcpo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration")
    run.add_argument("--config", help="JSON config file")
    run.add_argument("--method", choices=["grpo", "dapo", "gspo", "dcpo"])
    run.add_argument("--steps", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config field; dotted keys reach nested sections")
    run.add_argument("--out", help=f"run directory (default ${RUNS_ENV}/<method>-seed<seed>)")
    run.add_argument("-v", "--verbose", action="store_true")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="compare run directories")
    cmp_.add_argument("runs", nargs="+")
    cmp_.add_argument("--csv", help="write aligned per-step series here")
    cmp_.add_argument("--window", type=int, default=50)
    cmp_.set_defaults(func=cmd_compare)

    b = sub.add_parser("bounds", help="emit clipping bounds over a probability grid")
    b.add_argument("--mode", default="dynamic", choices=[m.value for m in ClipMode])
    b.add_argument("--eps", type=float)
    b.add_argument("--eps-low", type=float)
    b.add_argument("--eps-high", type=float)
    b.add_argument("--r-max", type=float, default=10.0)
    b.add_argument("--grid", default="0.01:1:0.01")
    b.set_defaults(func=cmd_bounds)

    rep = sub.add_parser("report", help="summarize one run directory")
    rep.add_argument("run")
    rep.add_argument("--window", type=int, default=50)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
