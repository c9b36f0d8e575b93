"""Decomposed episode metrics: Success, Grasp-anything and Reach.

* success: the instructed object is held at the last step
* grasp_any: something was held at some step
* reach: the gripper ends within 5 cm (planar, inclusive) of the instructed object
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .env import EnvState, planar_distance
from .placement import LADDER, Regime

log = logging.getLogger(__name__)

REACH_RADIUS = 0.05
METRICS = ("success", "grasp_any", "reach")
GROUP_KEYS = ("regime", "policy", "dataset_size", "n_objects", "phase")


class TruncatedTrajectory(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeOutcome:
    success: bool
    grasp_any: bool
    reach: bool
    episode_seed: int = 0
    regime: str = ""
    instruction: str = ""
    policy: str = ""
    n_objects: int = 5
    phase: str = ""
    dataset_size: int | None = None

    def __post_init__(self) -> None:
        if self.success and not (self.grasp_any and self.reach):
            raise ValueError("success must imply grasp_any and reach")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EpisodeOutcome":
        return cls(**json.loads(line))


def episode_outcome(trajectory: Sequence[EnvState] | EnvState, instruction=None, **labels) -> EpisodeOutcome:
    """Score a finished episode.  ``trajectory`` is the list of states (only
    the last one matters) or the final state itself."""
    final = trajectory if isinstance(trajectory, EnvState) else trajectory[-1]
    if not final.done:
        raise TruncatedTrajectory(f"episode stopped at step {final.step} of {final.config.workspace.horizon}")
    target = final.instruction.target_id if instruction is None else instruction.target_id
    dist = float(planar_distance(final.gripper.position, final.object_positions[target]))
    labels.setdefault("instruction", final.instruction.text)
    labels.setdefault("n_objects", len(final.object_positions))
    return EpisodeOutcome(
        success=final.attached == target,
        grasp_any=final.grasp_any_latch,
        reach=dist <= REACH_RADIUS,
        **labels,
    )


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


@dataclass(frozen=True)
class MetricRate:
    count: int
    n: int
    ci_low: float
    ci_high: float

    @property
    def rate(self) -> float:
        return self.count / self.n if self.n else 0.0


@dataclass(frozen=True)
class MetricsReport:
    group: dict
    n: int
    rates: dict = field(default_factory=dict)  # metric -> MetricRate

    def rate(self, metric: str) -> float:
        return self.rates[metric].rate

    def count(self, metric: str) -> int:
        return self.rates[metric].count


def _regime_rank(value) -> int:
    try:
        return LADDER.index(Regime.parse(value))
    except (ValueError, AttributeError):
        return len(LADDER)


def _sort_key(group: dict, keys: Sequence[str]):
    out = []
    for k in keys:
        v = group.get(k)
        if k == "regime":
            out.append((_regime_rank(v), str(v)))
        elif isinstance(v, (int, float)):
            out.append((0, v))
        else:
            out.append((1, "" if v is None else str(v)))
    return tuple(out)


def aggregate(outcomes: Iterable[EpisodeOutcome], grouping: Sequence[str] = ("regime", "policy")) -> list[MetricsReport]:
    """Rates with Wilson 95% intervals for every group present.

    Groups come back in ladder order, then by the remaining keys.
    """
    groups: dict[tuple, list[EpisodeOutcome]] = {}
    for o in outcomes:
        key = tuple(getattr(o, k) for k in grouping)
        groups.setdefault(key, []).append(o)
    if not groups:
        log.warning("aggregate called with no outcomes")
    reports = []
    for key, items in groups.items():
        n = len(items)
        if n == 0:
            log.warning("empty group %s omitted", key)
            continue
        rates = {}
        for m in METRICS:
            c = sum(1 for o in items if getattr(o, m))
            lo, hi = wilson_interval(c, n)
            rates[m] = MetricRate(c, n, lo, hi)
        reports.append(MetricsReport(dict(zip(grouping, key)), n, rates))
    reports.sort(key=lambda r: _sort_key(r.group, grouping))
    return reports


def dominance_holds(outcomes: Iterable[EpisodeOutcome]) -> bool:
    items = list(outcomes)
    s = sum(o.success for o in items)
    return s <= sum(o.grasp_any for o in items) and s <= sum(o.reach for o in items)


def write_outcomes(path: str | Path, outcomes: Iterable[EpisodeOutcome]) -> None:
    with open(path, "w") as f:
        for o in outcomes:
            f.write(o.to_json() + "\n")


def read_outcomes(path: str | Path) -> list[EpisodeOutcome]:
    with open(path) as f:
        return [EpisodeOutcome.from_json(line) for line in f if line.strip()]


def _fmt(v) -> str:
    if isinstance(v, Regime):
        return v.label
    if isinstance(v, str):
        try:
            return Regime.parse(v).label
        except ValueError:
            return v
    return "" if v is None else str(v)


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    keys = list(reports[0].group) if reports else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = keys + ["n"]
    for m in METRICS:
        header += [m, f"{m}_ci_low", f"{m}_ci_high"]
    w.writerow(header)
    for r in reports:
        row = [r.group[k] for k in keys] + [r.n]
        for m in METRICS:
            mr = r.rates[m]
            row += [f"{mr.rate:.4f}", f"{mr.ci_low:.4f}", f"{mr.ci_high:.4f}"]
        w.writerow(row)
    return buf.getvalue()


def format_table(reports: Sequence[MetricsReport], label_keys: Sequence[str] | None = None) -> str:
    """Aligned text table, rates in percent."""
    if not reports:
        return "(no rows)\n"
    keys = list(label_keys) if label_keys is not None else list(reports[0].group)
    header = [k.replace("_", " ").title() for k in keys] + ["N", "Success", "Grasp-any", "Reach"]
    rows = [
        [_fmt(r.group.get(k)) for k in keys]
        + [str(r.n)]
        + [f"{100 * r.rates[m].rate:.1f}" for m in METRICS]
        for r in reports
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def ladder_report(reports: Sequence[MetricsReport]) -> tuple[str, str]:
    """Rows ordered Small -> Medium -> Large -> Full random.  Returns
    (aligned text, CSV)."""
    rows = [r for r in reports if r.n > 0 and "regime" in r.group]
    rows.sort(key=lambda r: (_regime_rank(r.group["regime"]), str(r.group.get("policy", ""))))
    keys = [k for k in (rows[0].group if rows else ["regime"])]
    return format_table(rows, keys), reports_to_csv(rows)
