"""Command-line experiment runner.

Every subcommand writes into its own directory under ``--out``::

    pretrain/           checkpoint.backbone.npz
    meta-train/         checkpoint.meta.npz, checkpoint.meta-best.npz, train-log.csv/.jsonl
    meta-test/          metrics.csv, metrics.jsonl
    ablate/             metrics.csv, metrics.jsonl, comparisons.csv
    sweep-retrain/      metrics.csv, metrics.jsonl, sweep.csv
    sweep-distractors/  metrics.csv, metrics.jsonl, sweep.csv
    report/             report.txt

plus a ``run-manifest.json`` (config echo, hash, seed, versions) in each.
Csv and jsonl files start with one ``#`` comment line holding the config
hash, seed and timestamp; the rest of the file is reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, TrainConfig, load, loads, parse_overrides
from .core import ABLATION_GRID, MetaState, meta_test, meta_train
from .episodes import DatasetSpec, SamplingError, build_dataset
from .metrics import aggregate, emit, header_line, read_records
from .model import Backbone, load_checkpoint, pretrain_backbone, save_checkpoint

log = logging.getLogger(__name__)

SUBCOMMANDS = ("pretrain", "meta-train", "meta-test", "ablate", "sweep-retrain", "sweep-distractors", "report")
EVALUATIONS = ("meta-test", "ablate", "sweep-retrain", "sweep-distractors")
BACKBONE = Path("pretrain") / "checkpoint.backbone.npz"
META = Path("meta-train") / "checkpoint.meta.npz"
META_BEST = Path("meta-train") / "checkpoint.meta-best.npz"
# fields that determine the dataset or parameter shapes; a checkpoint made
# under different values is refused rather than silently reused
PINNED = ("n_classes", "samples_per_class", "dim", "separation", "noise", "warp", "splits",
          "hidden", "embed_dim", "swn_hidden", "way", "seed")
TRAIN_LOG_COLUMNS = ("iteration", "val_accuracy", "train_pseudo_accuracy", "train_refined_pseudo_accuracy", "loss_m", "loss_T")


class DependencyError(RuntimeError):
    """A subcommand's input artifact is missing."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """One subcommand invocation: resolved config, output root and helpers."""

    def __init__(self, config: TrainConfig, out, episodes: int | None = None):
        self.config = config
        self.out = Path(out)
        self.episodes = episodes
        self.timestamp = _now()
        self._dataset = None

    @property
    def dataset(self):
        if self._dataset is None:
            self._dataset = build_dataset(DatasetSpec.from_config(self.config), self.config.seed)
        return self._dataset

    def dir(self, sub: str) -> Path:
        d = self.out / sub
        d.mkdir(parents=True, exist_ok=True)
        return d

    def require(self, rel: Path, producer: str) -> Path:
        path = self.out / rel
        if not path.exists():
            raise DependencyError(f"missing {path}; run the `{producer}` subcommand first")
        return path

    def backbone(self) -> Backbone:
        ck = load_checkpoint(self.require(BACKBONE, "pretrain"), "backbone")
        self._check_config(ck, "pretrain")
        return Backbone(ck.arrays, ck.extra.get("train_accuracy", float("nan")), ck.extra.get("heldout_accuracy", float("nan")))

    def meta_state(self, best: bool = True) -> MetaState:
        ck = load_checkpoint(self.require(META_BEST if best else META, "meta-train"), "meta")
        self._check_config(ck, "meta-train")
        return MetaState.from_named(ck.arrays, ck.extra.get("iteration", 0), self.config.beta1, self.config.beta2)

    def _check_config(self, ck, producer):
        if ck.config_hash == self.config.config_hash():
            return
        saved = loads(ck.config_text, source=f"{producer} checkpoint")
        clash = [k for k in PINNED if getattr(saved, k) != getattr(self.config, k)]
        if clash:
            raise ConfigError(f"checkpoint from `{producer}` was made with different {', '.join(clash)}; "
                              f"rerun `{producer}` or use a matching config")
        log.warning("checkpoint from `%s` was produced with config %s, current config is %s",
                    producer, ck.config_hash, self.config.config_hash())

    def manifest(self, sub: str, results: dict | None = None) -> Path:
        data = {
            "subcommand": sub,
            "created": self.timestamp,
            "config_hash": self.config.config_hash(),
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "versions": {"lst": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "results": results or {},
        }
        path = self.dir(sub) / "run-manifest.json"
        path.write_text(json.dumps(data, indent=2, sort_keys=True, default=list) + "\n")
        return path

    def write_metrics(self, sub: str, records) -> None:
        d = self.dir(sub)
        kw = dict(config_hash=self.config.config_hash(), seed=self.config.seed, timestamp=self.timestamp)
        emit(records, d / "metrics.csv", "csv", **kw)
        emit(records, d / "metrics.jsonl", "jsonl", **kw)

    def write_table(self, path: Path, columns, rows) -> None:
        buf = io.StringIO()
        buf.write(header_line(self.config.config_hash(), self.config.seed, self.timestamp) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)
        path.write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(run: Run) -> dict:
    cfg = run.config
    bb = pretrain_backbone(run.dataset, cfg, seed=cfg.seed)
    extra = {"train_accuracy": bb.train_accuracy, "heldout_accuracy": bb.heldout_accuracy}
    save_checkpoint(run.dir("pretrain") / BACKBONE.name, "backbone", bb.params, cfg, extra)
    print(f"pretrain: train accuracy {bb.train_accuracy:.4f}, held-out accuracy {bb.heldout_accuracy:.4f}")
    return extra


def cmd_meta_train(run: Run) -> dict:
    cfg = run.config
    bb = run.backbone()
    d = run.dir("meta-train")

    def checkpoint(row, state):
        save_checkpoint(d / META.name, "meta", state.named(), cfg, {"iteration": state.iteration})

    final, best, rows = meta_train(run.dataset, bb, cfg, callback=checkpoint)
    save_checkpoint(d / META.name, "meta", final.named(), cfg, {"iteration": final.iteration})
    best_row = max(rows, key=lambda r: r.val_accuracy)
    save_checkpoint(d / META_BEST.name, "meta", best.named(), cfg, {"iteration": best_row.iteration})

    table = [[r.iteration, repr(r.val_accuracy), repr(r.train_pseudo_accuracy),
              repr(r.train_refined_pseudo_accuracy), repr(r.loss_m), repr(r.loss_T)] for r in rows]
    run.write_table(d / "train-log.csv", TRAIN_LOG_COLUMNS, table)
    lines = [header_line(cfg.config_hash(), cfg.seed, run.timestamp)]
    lines += [json.dumps({**dict(zip(TRAIN_LOG_COLUMNS, t)), "seconds": r.seconds}) for t, r in zip(table, rows)]
    (d / "train-log.jsonl").write_text("\n".join(lines) + "\n")
    for r in rows:
        print(f"meta-train: iter {r.iteration:5d}  val acc {r.val_accuracy:.4f}  "
              f"train pseudo-label acc {r.train_pseudo_accuracy:.4f} / refined {r.train_refined_pseudo_accuracy:.4f}")
    return {"best_iteration": best_row.iteration, "best_val_accuracy": best_row.val_accuracy}


def cmd_meta_test(run: Run) -> dict:
    records = meta_test(run.dataset, run.backbone(), run.meta_state(), run.config, run.episodes)
    run.write_metrics("meta-test", records)
    print(aggregate(records).to_text(), end="")
    r = records[0]
    return {"tag": r.tag, "mean_accuracy": r.mean_accuracy, "ci95": r.ci95}


def cmd_ablate(run: Run) -> dict:
    records = meta_test(run.dataset, run.backbone(), run.meta_state(), run.config, run.episodes, settings=ABLATION_GRID)
    run.write_metrics("ablate", records)
    report = aggregate(records)
    rows = [[c.a, c.b, repr(c.mean_diff), "" if c.ci95 is None else repr(c.ci95), c.wins, c.losses, c.ties]
            for c in report.comparisons]
    run.write_table(run.dir("ablate") / "comparisons.csv", ("a", "b", "mean_diff", "ci95", "wins", "losses", "ties"), rows)
    print(report.to_text(), end="")
    return {r.tag: r.mean_accuracy for r in records}


def _sweep(run: Run, sub: str, param: str, values, kw_name: str) -> dict:
    bb, state = run.backbone(), run.meta_state()
    records = []
    for v in values:
        records += meta_test(run.dataset, bb, state, run.config, run.episodes,
                             sweep={"sweep_param": param, "sweep_value": v}, **{kw_name: v})
    run.write_metrics(sub, records)
    rows = [[r.sweep_param, r.sweep_value, r.tag, r.episodes, repr(r.mean_accuracy), "" if r.ci95 is None else repr(r.ci95)]
            for r in records]
    run.write_table(run.dir(sub) / "sweep.csv", ("param", "value", "tag", "episodes", "mean_accuracy", "ci95"), rows)
    print(aggregate(records).to_text(), end="")
    return {r.sweep_value: r.mean_accuracy for r in records}


def cmd_sweep_retrain(run: Run) -> dict:
    bad = [m for m in run.config.sweep_retrain if not 0 <= m <= run.config.inner_steps]
    if bad:
        raise ConfigError(f"sweep_retrain values {bad} are outside 0..inner_steps={run.config.inner_steps}")
    return _sweep(run, "sweep-retrain", "retrain_steps", run.config.sweep_retrain, "retrain_steps")


def cmd_sweep_distractors(run: Run) -> dict:
    return _sweep(run, "sweep-distractors", "distractors", run.config.sweep_distractors, "distractors")


def cmd_report(run: Run) -> dict:
    found = [(sub, run.out / sub / "metrics.jsonl") for sub in EVALUATIONS]
    found = [(sub, p) for sub, p in found if p.exists()]
    if not found:
        raise DependencyError(f"no metrics under {run.out}; run one of `{'`, `'.join(EVALUATIONS)}` first")
    parts = []
    for sub, path in found:
        parts.append(f"== {sub} ==\n" + aggregate(read_records(path)).to_text())
    text = "\n".join(parts)
    (run.dir("report") / "report.txt").write_text(text)
    print(text, end="")
    return {"sections": [sub for sub, _ in found]}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "meta-train": cmd_meta_train,
    "meta-test": cmd_meta_test,
    "ablate": cmd_ablate,
    "sweep-retrain": cmd_sweep_retrain,
    "sweep-distractors": cmd_sweep_distractors,
    "report": cmd_report,
}


def run(config: TrainConfig, subcommand: str, out, episodes: int | None = None) -> dict:
    """Execute one pipeline stage and write its artifacts under ``out``."""
    if subcommand not in COMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
    r = Run(config, out, episodes)
    results = COMMANDS[subcommand](r)
    r.manifest(subcommand, results)
    return results


# ---------------------------------------------------------------------------
# CLI


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lst", description="Learning-to-self-train experiment runner.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", type=Path, help="key = value config file (defaults used when omitted)")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--episodes", type=int, help="number of evaluation episodes (default: test_episodes)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> TrainConfig:
    cfg = load(args.config, args.override) if args.config else TrainConfig(**parse_overrides(args.override))
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be a nonnegative integer")
        cfg = cfg.replace(seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.episodes is not None and args.episodes < 1:
            raise ConfigError("--episodes must be >= 1")
        run(cfg, args.subcommand, args.out, args.episodes)
    except (ConfigError, DependencyError, SamplingError, FileNotFoundError) as exc:
        print(f"lst {args.subcommand}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
