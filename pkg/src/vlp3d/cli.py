"""Command line: ``vlp3d {synth,train,eval,sweep,report}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path
from typing import Optional, Sequence

from filelock import FileLock, Timeout

from .config import TrainConfig, _coerce, parse_config, star_sweep, write_config
from .data import Dataset, synth_dataset
from .errors import (
    ArgumentError,
    CheckpointMismatchError,
    ConfigError,
    CorruptFileError,
    StateError,
    TrainingDivergenceError,
)
from .evalsuite import PROTOCOLS, MetricsReport, evaluate
from .trainer import load_checkpoint, read_log, train

log = logging.getLogger("vlp3d")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_BUSY = 3


class CommandFailed(Exception):
    def __init__(self, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.code = code


def _load_config(args) -> TrainConfig:
    cfg = parse_config(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise CommandFailed(f"missing {what}", EXIT_USAGE)
    p = Path(path)
    if not p.exists():
        raise CommandFailed(f"{what} not found: {p}")
    return p


def write_metrics(out_dir: Path, reports: dict[str, MetricsReport]) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for protocol, report in reports.items():
        path = out_dir / f"{protocol}.json"
        path.write_text(report.to_json() + "\n", encoding="utf-8")
        MetricsReport.from_json(path.read_text(encoding="utf-8"))  # validate what was written
        paths.append(path)
    return paths


# --- verbs ------------------------------------------------------------------------


def cmd_synth(args) -> None:
    cfg = _load_config(args)
    synth_dataset(args.out, cfg)
    Dataset(args.out)
    print(f"dataset written to {args.out}")


def cmd_train(args) -> None:
    cfg = _load_config(args)
    data = Dataset(_require(args.data, "--data directory"))
    state = None
    if args.resume:
        state = load_checkpoint(_require(args.resume, "--resume checkpoint"), expect_config=cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg)
    state, _ = train(cfg, data, out, state=state)
    if not (out / "final.pt").exists():
        raise CommandFailed("training ended without a final checkpoint")
    print(f"trained {state.step} steps; checkpoint {out / 'final.pt'}")


def cmd_eval(args) -> None:
    state = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    data = Dataset(_require(args.data, "--data directory"))
    protocols = args.protocols.split(",") if args.protocols else list(PROTOCOLS)
    unknown = sorted(set(protocols) - set(PROTOCOLS))
    if unknown:
        raise CommandFailed(f"unknown protocols {unknown}; choose from {list(PROTOCOLS)}", EXIT_USAGE)
    reports = evaluate(state.model, data, state.cfg, protocols, split=args.split)
    for path in write_metrics(Path(args.out), reports):
        print(path)


def _axis_values(axis: str, raw: str) -> list:
    hints = typing.get_type_hints(TrainConfig)
    if axis not in hints:
        star_sweep(TrainConfig(), axis, [])  # raises with a nearest-key hint
    sep = ";" if typing.get_origin(hints[axis]) is tuple else ","
    try:
        return [_coerce(v.strip(), hints[axis], axis) for v in raw.split(sep) if v.strip()]
    except ValueError as exc:
        raise CommandFailed(str(exc), EXIT_USAGE) from None


def cmd_sweep(args) -> None:
    base = _load_config(args)
    data = Dataset(_require(args.data, "--data directory"))
    configs = star_sweep(base, args.axis, _axis_values(args.axis, args.values))
    out = Path(args.out)
    rows = []
    for cfg in configs:
        value = getattr(cfg, args.axis)
        run_dir = out / f"{args.axis}={_fmt(value)}"
        run_dir.mkdir(parents=True, exist_ok=True)
        write_config(run_dir / "config.txt", cfg)
        state, _ = train(cfg, data, run_dir)
        reports = evaluate(state.model, data, cfg, args.protocols.split(",") if args.protocols else PROTOCOLS)
        write_metrics(run_dir / "metrics", reports)
        row = {args.axis: _fmt(value)}
        for protocol, rep in reports.items():
            row.update({f"{protocol}:{k}": v for k, v in rep.metrics.items()})
        rows.append(row)
    write_table(out / "comparison.tsv", rows)
    print(out / "comparison.tsv")


def _fmt(v) -> str:
    return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)


def write_table(path: Path, rows: list[dict]) -> None:
    columns: list[str] = []
    for r in rows:
        columns += [k for k in r if k not in columns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, delimiter="\t", restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in r.items()})


def cmd_report(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = [_require(r, "run directory") for r in args.runs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    rows = []
    for run in runs:
        if (run / "log.jsonl").exists():
            records = read_log(run / "log.jsonl")
            for key in ("clip_loss", "rrg_loss", "mae_loss"):
                pts = [(r["step"], r["losses"][key]) for r in records if key in r["losses"]]
                if pts:
                    ax.plot(*zip(*pts), label=f"{run.name}:{key}", linewidth=0.8)
        row = {"run": run.name}
        for path in sorted((run / "metrics").glob("*.json")) if (run / "metrics").exists() else []:
            rep = MetricsReport.from_json(path.read_text(encoding="utf-8"))
            row.update({f"{rep.protocol}:{k}": v for k, v in rep.metrics.items()})
        rows.append(row)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if ax.lines:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=120)
    plt.close(fig)

    metric_keys = sorted({k for r in rows for k in r if k != "run"})
    fig, ax = plt.subplots(figsize=(max(6, len(metric_keys) * 0.5), 4))
    width = 0.8 / max(1, len(rows))
    for i, r in enumerate(rows):
        xs = [j + i * width for j in range(len(metric_keys))]
        ax.bar(xs, [100 * r.get(k, 0.0) for k in metric_keys], width, label=r["run"])
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(metric_keys))])
    ax.set_xticklabels(metric_keys, rotation=70, fontsize=6)
    ax.set_ylabel("value (%)")
    if rows:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out / "metrics.png", dpi=120)
    plt.close(fig)
    write_table(out / "summary.tsv", rows)
    for name in ("loss_curves.png", "metrics.png", "summary.tsv"):
        if not (out / name).stat().st_size:
            raise CommandFailed(f"failed to write {out / name}")
    print(out / "summary.tsv")


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlp3d", description="Synthetic 3D vision-language pre-training toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config=True, seed=True):
        sp.add_argument("--out", required=True, help="output directory")
        if config:
            sp.add_argument("--config", help="key = value config file (defaults when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config seed")

    sp = sub.add_parser("synth", help="write a synthetic dataset directory")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train and write checkpoints plus log.jsonl")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory from 'synth'")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="write one metrics JSON per protocol")
    common(sp, config=False, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--protocols", help=f"comma-separated subset of {','.join(PROTOCOLS)}")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="train and evaluate one run per value of a config key")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--axis", required=True, help="config key to vary")
    sp.add_argument("--values", required=True, help="comma-separated values (';' for tuple keys)")
    sp.add_argument("--protocols", help="comma-separated protocols to evaluate")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="plot loss curves and metrics of finished runs")
    common(sp, config=False, seed=False)
    sp.add_argument("runs", nargs="+", help="run directories")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {out}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    lock = FileLock(str(out / ".vlp3d.lock"))
    try:
        with lock.acquire(timeout=0):
            args.func(args)
    except Timeout:
        print(f"error: {out} is in use by another vlp3d process", file=sys.stderr)
        return EXIT_BUSY
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ArgumentError, StateError, CorruptFileError, CheckpointMismatchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except TrainingDivergenceError as exc:
        print(f"error: {exc}\n{json.dumps(exc.diagnostics, indent=1, default=str)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
