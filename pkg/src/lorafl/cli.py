"""Command-line entry point: ``lorafl run | sweep | plot | validate``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import tomli

from . import __version__
from .config import ExperimentConfig, load_config, set_key, from_dict
from .errors import ConfigError, FormatError, LoraFLError
from .federation import SUMMARY_HEADER, run_experiment, summarize, summary_csv, telemetry_csv
from .metrics import Censored
from .model import read_checkpoint, save_checkpoint
from .plotting import plot_files, read_telemetry

OUT_ENV = "LORAFL_OUT"
DEFAULT_OUT = "runs"
ARTIFACTS = ("telemetry.csv", "summary.csv", "manifest", "final.ckpt")


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def out_root(arg) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def parse_seeds(text: str) -> list:
    """``"3"``, ``"1..5"`` (inclusive) or ``"1,4,7"``."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(s) for s in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r} (use N, a..b or a,b,c)", "seeds") from None


def parse_axis(text: str):
    """``section.key=[v1, v2, ...]`` (a TOML array) or a single TOML value."""
    if "=" not in text:
        raise ConfigError(f"axis {text!r} is not of the form section.key=[values]", text)
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        values = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        raise ConfigError(f"axis {key}: cannot parse values {raw!r}", key) from None
    if not isinstance(values, list) or (key == "attack.window" and values and not isinstance(values[0], list)):
        values = [values]
    if not values:
        raise ConfigError(f"axis {key} has no values", key)
    return key, values


def _label_value(v) -> str:
    if isinstance(v, list):
        return "-".join(_label_value(x) for x in v)
    return str(v).replace("/", "_")


def cell_name(assignment) -> str:
    if not assignment:
        return "default"
    return ",".join(f"{k}={_label_value(v)}" for k, v in assignment)


def configure(base: ExperimentConfig, assignment, seed) -> ExperimentConfig:
    data = base.to_dict()
    for key, value in assignment:
        set_key(data, key, value)
    if seed is not None:
        set_key(data, "experiment.seed", seed)
    return from_dict(data)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def manifest_digest(run_dir: Path):
    try:
        return json.loads((run_dir / "manifest").read_text())["digest"]
    except (OSError, ValueError, KeyError):
        return None


def run_complete(run_dir: Path, digest: str) -> bool:
    return manifest_digest(run_dir) == digest and all((run_dir / a).is_file() for a in ARTIFACTS)


def execute(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1, log=None) -> dict:
    """Run one experiment and write its artifacts; returns the summary row."""
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = run_dir / "manifest"
    if manifest.exists():
        manifest.unlink()
    result = run_experiment(cfg, jobs=jobs, checkpoint_dir=run_dir)
    row = summarize(cfg, result)
    (run_dir / "telemetry.csv").write_text(telemetry_csv(result.records))
    (run_dir / "summary.csv").write_text(summary_csv([row]))
    save_checkpoint(run_dir / "final.ckpt", result.params, result.adapters, cfg.digest().encode())
    # validate what was written before declaring the run complete
    read_telemetry(run_dir / "telemetry.csv")
    read_checkpoint(run_dir / "final.ckpt")
    body = {
        "digest": cfg.digest(),
        "seeds": [cfg.experiment.seed],
        "layout": "<out>/<experiment-name>/<axis=value,...>/<seed>/",
        "tool_version": __version__,
        "files": {a: _sha256(run_dir / a) for a in ARTIFACTS if a != "manifest"},
        "config": cfg.to_dict(),
    }
    manifest.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    if log:
        log(f"wrote {run_dir}")
    return row


# --------------------------------------------------------------------------
# Summaries
# --------------------------------------------------------------------------

_CONVERGENCE = ("tc95_acc", "tc95_asr")
_LIFESPAN = ("lifespan60_abs", "lifespan60_post_aw")


def _parse_round(text):
    if text == "":
        return None
    if text.startswith(">"):
        return Censored(int(text[1:]))
    return int(text)


def _order_key(column, v):
    if isinstance(v, Censored):
        return (2, v.horizon)
    if v is None:
        return (2, 0) if column in _CONVERGENCE else (0, 0)
    return (1, v)


def lower_median(column, values):
    """Median that always returns an observed value (lower middle on ties).

    Absent convergence sorts after every round, absent lifespan before it,
    and censored values after every finite round.
    """
    ordered = sorted(values, key=lambda v: _order_key(column, v))
    return ordered[(len(ordered) - 1) // 2] if ordered else None


def read_summary(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) != 2 or tuple(rows[0]) != SUMMARY_HEADER:
        raise FormatError(f"{path}: malformed summary")
    row = dict(zip(SUMMARY_HEADER, rows[1]))
    for k in _CONVERGENCE + _LIFESPAN:
        row[k] = _parse_round(row[k])
    row["aw_end"] = int(row["aw_end"])
    return row


def combined_summary(cells) -> str:
    """``cells`` maps a cell name to ``[(seed, summary row), ...]``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("cell", "seed") + SUMMARY_HEADER)

    def fmt(row, k):
        v = row[k]
        if k in _CONVERGENCE + _LIFESPAN:
            return "" if v is None else str(v)
        return v

    for name, runs in cells.items():
        for seed, row in runs:
            w.writerow([name, seed] + [fmt(row, k) for k in SUMMARY_HEADER])
    for name, runs in cells.items():
        rows = [r for _, r in runs]
        med = dict(rows[0])
        for k in _CONVERGENCE + _LIFESPAN:
            med[k] = lower_median(k, [r[k] for r in rows])
        w.writerow([name, "median"] + [fmt(med, k) for k in SUMMARY_HEADER])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def _info(msg):
    print(msg, file=sys.stderr)


def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.set)
    print(cfg.digest())
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg = configure(cfg, (), args.seed)
    run_dir = out_root(args.out) / cfg.experiment.name / "default" / str(cfg.experiment.seed)
    execute(cfg, run_dir, jobs=args.jobs, log=_info)
    return 0


def _sweep_cell(job):
    cfg_dict, run_dir = job
    cfg = from_dict(cfg_dict)
    return execute(cfg, Path(run_dir))


def cmd_sweep(args) -> int:
    base = load_config(args.config, args.set)
    axes = [parse_axis(a) for a in args.axis]
    for key, values in axes:
        for v in values:
            configure(base, [(key, v)], None)
    seeds = parse_seeds(args.seeds) if args.seeds else [base.experiment.seed if args.seed is None else args.seed]
    root = out_root(args.out) / base.experiment.name
    keys = [k for k, _ in axes]
    plan = []
    for combo in itertools.product(*[vals for _, vals in axes]):
        assignment = list(zip(keys, combo))
        for seed in seeds:
            cfg = configure(base, assignment, seed)
            plan.append((cell_name(assignment), seed, cfg, root / cell_name(assignment) / str(seed)))
    todo = [(cfg.to_dict(), str(d)) for _, _, cfg, d in plan if not run_complete(d, cfg.digest())]
    _info(f"{len(plan)} runs, {len(plan) - len(todo)} already complete")
    if todo:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                for _ in pool.map(_sweep_cell, todo):
                    pass
        else:
            for job in todo:
                _sweep_cell(job)
    cells = {}
    for name, seed, cfg, d in plan:
        if not run_complete(d, cfg.digest()):
            raise LoraFLError(f"run {d} did not complete")
        cells.setdefault(name, []).append((seed, read_summary(d / "summary.csv")))
    (root / "summary.csv").write_text(combined_summary(cells))
    _info(f"wrote {root / 'summary.csv'}")
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    for metric in args.metric or ["acc", "asr", "sigma"]:
        path = out / f"{metric}.svg"
        plot_files(args.csv, metric, path, log_y=args.log_y, aw_marker=args.aw_marker, x_knee=args.x_knee)
        _info(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lorafl", description="Federated LoRA backdoor simulator")
    p.add_argument("--version", action="version", version=f"lorafl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment TOML file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. lora.rank=8 (repeatable)")

    sp = sub.add_parser("validate", help="check a config and print its digest")
    common(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("run", help="run one experiment")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    sp.add_argument("--jobs", type=int, default=1, help="client-training threads")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run a Cartesian grid of experiments")
    common(sp)
    sp.add_argument("--axis", action="append", default=[], metavar="KEY=[V1, V2]",
                    help="sweep axis as a TOML array (repeatable)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--seeds", help="seed list: a..b (inclusive) or a,b,c")
    sp.add_argument("--out")
    sp.add_argument("--jobs", type=int, default=1, help="runs executed in parallel")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("plot", help="render telemetry CSVs as SVG line plots")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--metric", action="append", choices=("acc", "asr", "sigma"))
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--log-y", action="store_true")
    sp.add_argument("--aw-marker", type=int, metavar="ROUND", help="vertical line at the window end")
    sp.add_argument("--x-knee", type=int, metavar="ROUND", help="give rounds before ROUND half the x-axis")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"error: {exc}{key}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (LoraFLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
