"""Metric vectors, the evaluator contract, and Pareto/selection machinery.

Every evaluated configuration yields a quality/cost/latency triple. An
evaluator spec names which objectives are active, optional feasibility
thresholds, and the scalarizing rule used wherever a single score is
needed (ranking inside the search, the surrogate's good/bad split).
Observations accumulate in an append-only archive with one sorted queue
per objective; pruning and final selection work off those queues.
"""

from __future__ import annotations

import json
import math
from bisect import insort
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

from .cogspace import canonical_key

QUALITY = "quality"
COST = "cost"
LATENCY = "latency"
METRIC_NAMES = (QUALITY, COST, LATENCY)

#: +1 means higher is better, -1 means lower is better.
DIRECTIONS = {QUALITY: 1, COST: -1, LATENCY: -1}

#: Floor applied to divisors in product-style scalarizers; synthetic
#: surfaces may emit zero cost/latency and that must not be an error.
EPS_COST = 1e-9

INFEASIBLE_SCORE = float("-inf")


class ArchiveFormatError(ValueError):
    """A persisted archive line could not be parsed."""

    def __init__(self, path: str, line_no: int, reason: str) -> None:
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True)
class MetricVector:
    quality: float
    cost: float
    latency: float

    def __post_init__(self) -> None:
        for name in METRIC_NAMES:
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
        if self.cost < 0 or self.latency < 0:
            raise ValueError("cost and latency must be non-negative")

    def get(self, name: str) -> float:
        return getattr(self, name)

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass
class EvaluatorSpec:
    """Which objectives matter, feasibility thresholds, and the scalarizer.

    Directions are fixed: quality is maximized, cost and latency minimized.
    Thresholds are bounds in the favorable direction (quality >= v,
    cost <= v, latency <= v). The "product" scalarizer divides quality by
    the selected minimized metrics; scale factors default to 1 and may be
    frozen once per run from observed medians when all three objectives
    are active.
    """

    objectives: tuple[str, ...] = (QUALITY,)
    thresholds: dict[str, float] = field(default_factory=dict)
    scalarizer: str = "auto"  # "auto" | "quality" | "product"
    cost_scale: float = 1.0
    latency_scale: float = 1.0

    def __post_init__(self) -> None:
        if not self.objectives:
            raise ValueError("at least one objective is required")
        for name in self.objectives:
            if name not in METRIC_NAMES:
                raise ValueError(f"unknown objective {name!r}")
        if len(set(self.objectives)) != len(self.objectives):
            raise ValueError("duplicate objectives")
        for name in self.thresholds:
            if name not in METRIC_NAMES:
                raise ValueError(f"unknown thresholded metric {name!r}")

    def is_feasible(self, metrics: MetricVector) -> bool:
        for name, bound in self.thresholds.items():
            value = metrics.get(name)
            if DIRECTIONS[name] > 0:
                if value < bound:
                    return False
            elif value > bound:
                return False
        return True

    def _resolved_scalarizer(self) -> str:
        if self.scalarizer != "auto":
            return self.scalarizer
        return "quality" if self.objectives == (QUALITY,) else "product"

    def raw_score(self, metrics: MetricVector) -> float:
        """Scalar score ignoring feasibility (used for surrogate feedback)."""
        rule = self._resolved_scalarizer()
        if rule == "quality":
            return metrics.quality
        if rule == "product":
            numerator = metrics.quality if QUALITY in self.objectives else 1.0
            denom = 1.0
            if COST in self.objectives:
                denom *= max(metrics.cost / self.cost_scale, EPS_COST)
            if LATENCY in self.objectives:
                denom *= max(metrics.latency / self.latency_scale, EPS_COST)
            return numerator / denom
        raise ValueError(f"unknown scalarizer {rule!r}")


def scalar_score(metrics: MetricVector, spec: EvaluatorSpec) -> float:
    """Feasibility-aware scalar score: -inf sentinel when a threshold is violated."""
    if not spec.is_feasible(metrics):
        return INFEASIBLE_SCORE
    return spec.raw_score(metrics)


@dataclass
class Observation:
    """One evaluated configuration plus bookkeeping tags.

    ``sort_path`` is the deterministic position of the evaluation inside
    its chunk (theta-major) and orders observations at flush time; it is
    not persisted. ``eval_index`` is assigned when the observation enters
    the archive and equals its append position.
    """

    assignments: dict[str, str]
    key: str
    metrics: MetricVector
    feasible: bool
    chunk_id: int
    layer_round: int
    eval_index: int = -1
    sort_path: tuple[int, ...] = ()

    def to_record(self) -> dict[str, Any]:
        return {
            "eval_index": self.eval_index,
            "key": self.key,
            "assignments": self.assignments,
            "metrics": self.metrics.as_dict(),
            "feasible": self.feasible,
            "chunk_id": self.chunk_id,
            "layer_round": self.layer_round,
        }

    @staticmethod
    def from_record(record: Mapping[str, Any]) -> "Observation":
        metrics = record["metrics"]
        return Observation(
            assignments=dict(record["assignments"]),
            key=record["key"],
            metrics=MetricVector(metrics["quality"], metrics["cost"], metrics["latency"]),
            feasible=bool(record["feasible"]),
            chunk_id=int(record["chunk_id"]),
            layer_round=int(record["layer_round"]),
            eval_index=int(record["eval_index"]),
        )


class ResultArchive:
    """Append-only global result set with per-objective sorted queues."""

    def __init__(self, spec: EvaluatorSpec) -> None:
        self.spec = spec
        self.observations: list[Observation] = []
        self.key_index: dict[str, list[int]] = {}
        # Each queue holds (direction-adjusted value, eval_index); lower is better.
        self._queues: dict[str, list[tuple[float, int]]] = {name: [] for name in spec.objectives}

    def __len__(self) -> int:
        return len(self.observations)

    def append(self, obs: Observation) -> Observation:
        obs.eval_index = len(self.observations)
        self.observations.append(obs)
        self.key_index.setdefault(obs.key, []).append(obs.eval_index)
        for name, queue in self._queues.items():
            adjusted = -DIRECTIONS[name] * obs.metrics.get(name)
            insort(queue, (adjusted, obs.eval_index))
        return obs

    def queue(self, objective: str) -> list[int]:
        """Eval indexes sorted best-first on one objective (ties by eval_index)."""
        return [idx for _, idx in self._queues[objective]]

    def feasible(self) -> list[Observation]:
        return [o for o in self.observations if o.feasible]


def dominates(a: MetricVector, b: MetricVector, spec: EvaluatorSpec) -> bool:
    """True iff ``a`` is no worse everywhere and strictly better somewhere."""
    strictly_better = False
    for name in spec.objectives:
        diff = DIRECTIONS[name] * (a.get(name) - b.get(name))
        if diff < 0:
            return False
        if diff > 0:
            strictly_better = True
    return strictly_better


def _best_first_values(obs: Observation, spec: EvaluatorSpec) -> tuple[float, ...]:
    return tuple(-DIRECTIONS[name] * obs.metrics.get(name) for name in spec.objectives)


def pareto_frontier(archive: ResultArchive, spec: EvaluatorSpec | None = None) -> list[Observation]:
    """Feasible observations not dominated by any feasible observation.

    Duplicated configurations keep their earliest evaluation. The result is
    sorted best-first on the first objective (ties by eval_index).
    """
    spec = spec or archive.spec
    by_key: dict[str, Observation] = {}
    for obs in archive.observations:
        if obs.feasible and obs.key not in by_key:
            by_key[obs.key] = obs
    candidates = sorted(by_key.values(), key=lambda o: (_best_first_values(o, spec), o.eval_index))
    frontier: list[Observation] = []
    for obs in candidates:
        if not any(dominates(kept.metrics, obs.metrics, spec) for kept in frontier):
            frontier.append(obs)
    first = spec.objectives[0]
    frontier.sort(key=lambda o: (-DIRECTIONS[first] * o.metrics.get(first), o.eval_index))
    return frontier


def select_best(
    archive: ResultArchive,
    spec: EvaluatorSpec | None = None,
    k: int = 1,
    weights: Mapping[str, int] | None = None,
) -> list[Observation]:
    """Up to ``k`` frontier members, round-robin over the per-objective queues.

    The whole frontier is returned when it fits. Otherwise members are taken
    best-of-each-objective first. ``weights`` optionally takes more than one
    member per round from a given objective's queue (default one each).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    spec = spec or archive.spec
    frontier = pareto_frontier(archive, spec)
    if len(frontier) <= k:
        return frontier
    per_objective: dict[str, list[Observation]] = {}
    for name in spec.objectives:
        per_objective[name] = sorted(
            frontier, key=lambda o: (-DIRECTIONS[name] * o.metrics.get(name), o.eval_index)
        )
    chosen: list[Observation] = []
    chosen_keys: set[str] = set()
    rank = 0
    while len(chosen) < k and rank < len(frontier):
        for name in spec.objectives:
            take = weights.get(name, 1) if weights else 1
            for offset in range(take):
                pos = rank * take + offset if weights else rank
                if pos >= len(per_objective[name]):
                    continue
                obs = per_objective[name][pos]
                if obs.key not in chosen_keys:
                    chosen_keys.add(obs.key)
                    chosen.append(obs)
                if len(chosen) >= k:
                    return chosen
        rank += 1
    return chosen


def nondomination_ranks(items: Sequence[Observation], spec: EvaluatorSpec) -> list[int]:
    """NSGA-style front index per item; infeasible items rank behind all fronts."""
    n = len(items)
    ranks = [0] * n
    feasible_idx = [i for i in range(n) if items[i].feasible]
    remaining = set(feasible_idx)
    front = 0
    while remaining:
        current = [
            i
            for i in remaining
            if not any(
                dominates(items[j].metrics, items[i].metrics, spec) for j in remaining if j != i
            )
        ]
        for i in current:
            ranks[i] = front
        remaining -= set(current)
        front += 1
    for i in range(n):
        if not items[i].feasible:
            ranks[i] = front + 1
    return ranks


def rank_for_search(
    items: Sequence[Observation],
    spec: EvaluatorSpec,
    tie_keys: Sequence[Any] | None = None,
) -> list[int]:
    """Total order over ``items`` as a best-first list of indexes.

    Single-objective: descending scalar score. Multi-objective: ascending
    nondomination rank, ties by descending scalar score. Final ties break
    on ``tie_keys`` (eval_index by default) so the order is deterministic.
    """
    if tie_keys is None:
        tie_keys = [obs.eval_index for obs in items]
    scores = [scalar_score(obs.metrics, spec) for obs in items]
    if len(spec.objectives) == 1:
        order = sorted(range(len(items)), key=lambda i: (-scores[i], tie_keys[i]))
        return order
    ranks = nondomination_ranks(items, spec)
    return sorted(range(len(items)), key=lambda i: (ranks[i], -scores[i], tie_keys[i]))


def make_observation(
    assignments: Mapping[str, str],
    metrics: MetricVector,
    spec: EvaluatorSpec,
    chunk_id: int,
    layer_round: int,
    sort_path: tuple[int, ...] = (),
    feasible: bool | None = None,
) -> Observation:
    if feasible is None:
        feasible = spec.is_feasible(metrics)
    return Observation(
        assignments=dict(assignments),
        key=canonical_key(assignments),
        metrics=metrics,
        feasible=feasible,
        chunk_id=chunk_id,
        layer_round=layer_round,
        sort_path=sort_path,
    )


def encode_archive_line(obs: Observation) -> str:
    return json.dumps(obs.to_record(), sort_keys=True, separators=(",", ":"))


def load_archive(path: str, spec: EvaluatorSpec) -> ResultArchive:
    """Rebuild an archive from its JSONL file, validating every line."""
    archive = ResultArchive(spec)
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                obs = Observation.from_record(record)
            except (KeyError, TypeError, ValueError) as exc:
                raise ArchiveFormatError(path, line_no, str(exc)) from None
            expected = len(archive.observations)
            if obs.eval_index != expected:
                raise ArchiveFormatError(
                    path, line_no, f"eval_index {obs.eval_index} out of order (expected {expected})"
                )
            archive.append(obs)
    return archive


def write_frontier_csv(path: str, frontier: Iterable[Observation]) -> None:
    lines = ["eval_index,quality,cost,latency,key"]
    for obs in frontier:
        m = obs.metrics
        lines.append(f"{obs.eval_index},{m.quality!r},{m.cost!r},{m.latency!r},{json.dumps(obs.key)}")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
