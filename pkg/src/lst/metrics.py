"""Evaluation records, paired aggregation and csv / jsonl serialisation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

Z95 = 1.959963984540054

# fixed, documented column order for metrics.csv
COLUMNS = (
    "tag",
    "sweep_param",
    "sweep_value",
    "episodes",
    "mean_accuracy",
    "ci95",
    "stage_pseudo_accuracy",
    "config_hash",
    "seed",
    "episode_seeds",
    "episode_accuracies",
)


class PairingError(ValueError):
    """Two records compared episode-by-episode were not run on the same episodes."""


def ci_half_width(values) -> float | None:
    """Normal-approximation 95% half-width; ``None`` for a single value."""
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return None
    return float(Z95 * values.std(ddof=1) / math.sqrt(len(values)))


@dataclass
class MetricsRecord:
    tag: str
    episodes: int
    mean_accuracy: float
    ci95: float | None
    stage_pseudo_accuracy: tuple[float, ...]
    config_hash: str
    seed: int
    episode_seeds: tuple[int, ...] = ()
    episode_accuracies: tuple[float, ...] = ()
    sweep_param: str = ""
    sweep_value: str = ""
    # wall-clock is reported but never part of record identity or csv bodies
    seconds: float = field(default=float("nan"), compare=False)

    @classmethod
    def from_episodes(cls, tag, seeds, accuracies, stage_pl, config_hash, seed, seconds=float("nan"), **sweep):
        acc = [float(a) for a in accuracies]
        return cls(
            tag=tag,
            episodes=len(acc),
            mean_accuracy=float(np.mean(acc)) if acc else float("nan"),
            ci95=ci_half_width(acc),
            stage_pseudo_accuracy=tuple(float(x) for x in stage_pl),
            config_hash=config_hash,
            seed=int(seed),
            episode_seeds=tuple(int(s) for s in seeds),
            episode_accuracies=tuple(acc),
            seconds=float(seconds),
            **{k: str(v) for k, v in sweep.items()},
        )

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.tag, self.sweep_param, self.sweep_value)

    @property
    def label(self) -> str:
        return self.tag if not self.sweep_param else f"{self.tag}[{self.sweep_param}={self.sweep_value}]"

    def row(self) -> dict[str, str]:
        fmt = lambda xs: " ".join(repr(float(x)) for x in xs)
        return {
            "tag": self.tag,
            "sweep_param": self.sweep_param,
            "sweep_value": self.sweep_value,
            "episodes": str(self.episodes),
            "mean_accuracy": repr(self.mean_accuracy),
            "ci95": "" if self.ci95 is None else repr(self.ci95),
            "stage_pseudo_accuracy": fmt(self.stage_pseudo_accuracy),
            "config_hash": self.config_hash,
            "seed": str(self.seed),
            "episode_seeds": " ".join(str(s) for s in self.episode_seeds),
            "episode_accuracies": fmt(self.episode_accuracies),
        }

    @classmethod
    def from_row(cls, row: dict) -> "MetricsRecord":
        floats = lambda s: tuple(float(x) for x in s.split()) if s else ()
        return cls(
            tag=row["tag"],
            episodes=int(row["episodes"]),
            mean_accuracy=float(row["mean_accuracy"]),
            ci95=None if row["ci95"] in ("", None) else float(row["ci95"]),
            stage_pseudo_accuracy=floats(row["stage_pseudo_accuracy"]),
            config_hash=row["config_hash"],
            seed=int(row["seed"]),
            episode_seeds=tuple(int(x) for x in row["episode_seeds"].split()) if row["episode_seeds"] else (),
            episode_accuracies=floats(row["episode_accuracies"]),
            sweep_param=row.get("sweep_param", "") or "",
            sweep_value=row.get("sweep_value", "") or "",
            seconds=float(row.get("seconds", "nan") or "nan"),
        )

    def to_json(self) -> str:
        d = self.row()
        d["seconds"] = repr(self.seconds)
        return json.dumps(d, sort_keys=False)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class PairedComparison:
    a: str
    b: str
    mean_diff: float  # mean of (a - b) over shared episodes
    ci95: float | None
    wins: int
    losses: int
    ties: int

    @property
    def excludes_zero(self) -> bool:
        return self.ci95 is not None and abs(self.mean_diff) > self.ci95


@dataclass
class Report:
    groups: list[MetricsRecord]
    comparisons: list[PairedComparison]

    def comparison(self, a: str, b: str) -> PairedComparison:
        for c in self.comparisons:
            if (c.a, c.b) == (a, b):
                return c
        raise KeyError((a, b))

    def to_text(self) -> str:
        lines = [f"{'setting':36s} {'n':>5s} {'mean':>7s} {'ci95':>7s}  stage pseudo-label accuracy"]
        for r in self.groups:
            ci = "   n/a" if r.ci95 is None else f"{100 * r.ci95:6.2f}"
            stages = " ".join(f"{100 * x:.1f}" for x in r.stage_pseudo_accuracy)
            lines.append(f"{r.label:36s} {r.episodes:5d} {100 * r.mean_accuracy:7.2f} {ci:>7s}  {stages}")
        if self.comparisons:
            lines.append("")
            lines.append(f"{'paired difference (a - b)':60s} {'mean':>7s} {'ci95':>7s} {'W/L/T':>13s}")
            for c in self.comparisons:
                ci = "   n/a" if c.ci95 is None else f"{100 * c.ci95:6.2f}"
                lines.append(f"{c.a + ' - ' + c.b:60s} {100 * c.mean_diff:7.2f} {ci:>7s} {c.wins:>4d}/{c.losses}/{c.ties}")
        return "\n".join(lines) + "\n"


def paired(a: MetricsRecord, b: MetricsRecord) -> PairedComparison:
    if a.episode_seeds != b.episode_seeds:
        raise PairingError(f"cannot pair {a.label!r} with {b.label!r}: episode seeds differ")
    d = np.asarray(a.episode_accuracies) - np.asarray(b.episode_accuracies)
    return PairedComparison(
        a.label, b.label, float(d.mean()), ci_half_width(d),
        int(np.sum(d > 0)), int(np.sum(d < 0)), int(np.sum(d == 0)),
    )


def aggregate(records, pairs=None) -> Report:
    """Group records by (tag, sweep point) and compare groups pairwise.

    Records sharing a key are merged (their episodes concatenated). ``pairs``
    lists ``(label_a, label_b)`` comparisons; by default every ordered pair
    of groups inside the same sweep is compared once.
    """
    records = list(records)
    if not records:
        raise ValueError("aggregate needs at least one record")
    merged: dict[tuple, list[MetricsRecord]] = {}
    for r in records:
        merged.setdefault(r.key, []).append(r)
    groups = []
    for key, rs in merged.items():
        seeds = tuple(s for r in rs for s in r.episode_seeds)
        accs = tuple(a for r in rs for a in r.episode_accuracies)
        if not accs:
            log.warning("aggregate: group %s has no episodes, excluded", rs[0].label)
            continue
        stages = _mean_stages([r.stage_pseudo_accuracy for r in rs], [r.episodes for r in rs])
        groups.append(MetricsRecord.from_episodes(
            rs[0].tag, seeds, accs, stages, rs[0].config_hash, rs[0].seed,
            sum(r.seconds for r in rs), **({"sweep_param": key[1], "sweep_value": key[2]} if key[1] else {}),
        ))
    by_label = {g.label: g for g in groups}
    if pairs is None:
        pairs = [
            (a.label, b.label)
            for i, a in enumerate(groups)
            for b in groups[i + 1:]
            if a.sweep_param == b.sweep_param
        ]
    comparisons = [paired(by_label[a], by_label[b]) for a, b in pairs if a in by_label and b in by_label]
    return Report(groups, comparisons)


def _mean_stages(tracks, weights) -> tuple[float, ...]:
    n = max((len(t) for t in tracks), default=0)
    out = []
    for i in range(n):
        vals = [(t[i], w) for t, w in zip(tracks, weights) if len(t) > i]
        out.append(sum(v * w for v, w in vals) / sum(w for _, w in vals))
    return tuple(out)


# ---------------------------------------------------------------------------
# files


def header_line(config_hash: str, seed: int, timestamp: str) -> str:
    return f"# config_hash={config_hash} seed={seed} created={timestamp}"


def emit(records, path, fmt: str = "csv", config_hash: str = "", seed: int = 0, timestamp: str = "") -> Path:
    """Write records as csv (header comment + fixed columns) or jsonl.

    The first line of either format is a ``#`` comment carrying the config
    hash, seed and timestamp; everything after it is reproducible.
    """
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown format {fmt!r}, expected csv or jsonl")
    path = Path(path)
    buf = io.StringIO()
    buf.write(header_line(config_hash, seed, timestamp) + "\n")
    if fmt == "csv":
        w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.row())
    else:
        for r in records:
            buf.write(r.to_json() + "\n")
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path


def read_records(path) -> list[MetricsRecord]:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
    if path.suffix == ".jsonl":
        return [MetricsRecord.from_row(json.loads(ln)) for ln in lines]
    return [MetricsRecord.from_row(row) for row in csv.DictReader(lines)]


def body(path) -> str:
    """File contents without the leading header comment."""
    text = Path(path).read_text()
    return "".join(ln for ln in text.splitlines(keepends=True) if not ln.startswith("#"))
