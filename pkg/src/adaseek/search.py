"""Recursive layer-wise search: chunked TPE sampling with successive halving.

The innermost layer draws single proposals from the surrogate, evaluates
them under the choices fixed by upper layers, and feeds results back. A
non-innermost layer samples a chunk of candidate assignments, then runs
successive-halving rungs: every surviving candidate gets a child search
with budget r_s = r0 * eta**s, the weakest are dropped after each rung,
and the freed budget is not redistributed. Early stopping can cut a
chunk, a candidate, or a whole layer once recent bests stop improving.

Determinism contract: every evaluation owns a structural position
(chunk, candidate index, rung, step). RNG streams derive from those
positions and the archive is canonically re-ordered by them at flush, so
serial and parallel schedules persist byte-identical archives.
"""

from __future__ import annotations

import itertools
import math
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .cogspace import CogCatalog, canonical_key
from .objectives import (
    EvaluatorSpec,
    MetricVector,
    Observation,
    ResultArchive,
    encode_archive_line,
    rank_for_search,
    scalar_score,
)
from .surrogate import FeedbackEntry, FeedbackSet, tpe_sample

_STREAM_SEARCH = 0xA5

#: Sentinel metrics recorded when the evaluator itself raises.
FAILURE_METRICS_COST = 1e9


@dataclass
class Knobs:
    """User-tunable search parameters with their defaults."""

    alpha: float = 1.1
    eta: int = 2
    chunk_size: int = 8
    gamma: float = 0.25
    smoothing: float = 1.0
    n_candidates: int = 24
    early_stop: bool = True
    early_stop_window: int = 3
    early_stop_epsilon: float = 1e-3
    parallel: int = 1
    paper_exact_sqrt: bool = False
    forced_layers: int | None = None
    dedup: bool = True
    select_k: int = 5
    evolve_every: int = 0
    evolve_k: int = 2
    importance_filter: bool = False
    importance_percent: float = 50.0
    complexity_filter: bool = False

    def as_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "eta": self.eta,
            "chunk_size": self.chunk_size,
            "gamma": self.gamma,
            "smoothing": self.smoothing,
            "n_candidates": self.n_candidates,
            "early_stop": self.early_stop,
            "early_stop_window": self.early_stop_window,
            "early_stop_epsilon": self.early_stop_epsilon,
            "parallel": self.parallel,
            "paper_exact_sqrt": self.paper_exact_sqrt,
            "forced_layers": self.forced_layers,
            "dedup": self.dedup,
            "select_k": self.select_k,
            "evolve_every": self.evolve_every,
            "evolve_k": self.evolve_k,
            "importance_filter": self.importance_filter,
            "importance_percent": self.importance_percent,
            "complexity_filter": self.complexity_filter,
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "Knobs":
        knobs = Knobs()
        for key, value in data.items():
            if not hasattr(knobs, key):
                raise ValueError(f"unknown knob {key!r}")
            setattr(knobs, key, value)
        return knobs


@dataclass(frozen=True)
class RungSchedule:
    """Successive-halving rung budgets r_s = r0 * eta**s for s in [0, rungs)."""

    eta: int
    r0: int
    rungs: int

    def budget(self, s: int) -> int:
        return self.r0 * self.eta**s

    def budgets(self) -> list[int]:
        return [self.budget(s) for s in range(self.rungs)]


def make_rung_schedule(next_layer_budget: int, eta: int) -> RungSchedule:
    """Derive the rung ladder from the budget assigned to the next layer down.

    r0 = ceil(budget / eta) and S = max(1, floor(budget / r0)), which keeps
    S * r0 <= budget so the rung accounting bound closes.
    """
    if next_layer_budget < 1:
        raise ValueError("next_layer_budget must be >= 1")
    if eta < 2:
        raise ValueError("eta must be >= 2")
    r0 = math.ceil(next_layer_budget / eta)
    rungs = max(1, next_layer_budget // r0)
    return RungSchedule(eta=eta, r0=r0, rungs=rungs)


@dataclass
class EarlyStopState:
    """Ring of recent best scores; full window with no relative gain means stop."""

    window: int = 3
    epsilon: float = 1e-3
    history: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        self.history = deque(self.history, maxlen=self.window + 1)


def early_stop_check(state: EarlyStopState, new_best: float) -> bool:
    """Push the running best; stop once a full window shows no relative gain."""
    state.history.append(new_best)
    if len(state.history) < state.window + 1:
        return False
    prior = state.history[0]
    recent = max(list(state.history)[1:])
    if prior == float("-inf"):
        return recent == float("-inf")
    return (recent - prior) < state.epsilon * max(1.0, abs(prior))


def halve(items: Sequence[Any], eta: int, ranking: Sequence[int]) -> list[Any]:
    """Keep the floor(len/eta) best-ranked items, best first."""
    keep = len(items) // eta
    return [items[ranking[i]] for i in range(keep)]


def project_feedback(
    entries: Iterable[FeedbackEntry], this_scope: Sequence[str]
) -> list[FeedbackEntry]:
    """Collapse child feedback onto this layer's scope, best entry per assignment.

    An upper-layer assignment is credited with the best score found under
    it (feasible entries beat infeasible ones at any score), matching the
    optimistic survival rule of successive halving.
    """
    groups: dict[str, list[FeedbackEntry]] = {}
    order: list[str] = []
    scope = tuple(this_scope)
    for entry in entries:
        restricted = {cid: entry.assignment[cid] for cid in scope}
        key = canonical_key(restricted)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(entry)
    projected: list[FeedbackEntry] = []
    for key in order:
        best = min(groups[key], key=lambda e: (not e.feasible, -e.score, e.order))
        restricted = {cid: best.assignment[cid] for cid in scope}
        projected.append(FeedbackEntry(restricted, best.score, best.feasible, best.order))
    return projected


class EvalSink:
    """Serialized evaluation recorder: cache, pending buffer, canonical flush.

    Proposals always consume budget; the evaluator only runs on cache
    misses. Pending observations are sorted by structural position at
    flush, truncated to the remaining global budget, and only then receive
    their archive indexes, which makes parallel and serial schedules
    persist identical archives.
    """

    def __init__(
        self,
        archive: ResultArchive,
        evaluate: Callable[[Mapping[str, str]], MetricVector],
        spec: EvaluatorSpec,
        total_budget: int,
        archive_path: str | None = None,
        frozen: Mapping[str, str] | None = None,
        on_flush: Callable[[list[Observation]], None] | None = None,
    ) -> None:
        self.archive = archive
        self.evaluate = evaluate
        self.spec = spec
        self.total_budget = total_budget
        self.frozen = dict(frozen or {})
        self.on_flush = on_flush
        self.pending: list[Observation] = []
        self.cache: dict[str, tuple[MetricVector, bool]] = {}
        self.evaluator_calls = 0
        self._lock = threading.Lock()
        self._archive_path = archive_path
        for obs in archive.observations:
            self.cache[obs.key] = (obs.metrics, obs.feasible)

    def remaining(self) -> int:
        return self.total_budget - len(self.archive)

    def seen_keys(self) -> frozenset[str]:
        with self._lock:
            return frozenset(self.archive.key_index) | {o.key for o in self.pending}

    def full_key(self, assignments: Mapping[str, str]) -> str:
        return canonical_key({**self.frozen, **assignments})

    def propose(
        self,
        assignments: Mapping[str, str],
        sort_path: tuple[int, ...],
        chunk_id: int,
        layer_round: int,
    ) -> Observation:
        full = {**self.frozen, **assignments}
        key = canonical_key(full)
        with self._lock:
            hit = self.cache.get(key)
        if hit is None:
            try:
                metrics = self.evaluate(full)
                feasible = self.spec.is_feasible(metrics)
            except Exception:
                metrics = MetricVector(0.0, FAILURE_METRICS_COST, FAILURE_METRICS_COST)
                feasible = False
            with self._lock:
                self.evaluator_calls += 1
                self.cache[key] = (metrics, feasible)
        else:
            metrics, feasible = hit
        obs = Observation(
            assignments=dict(full),
            key=key,
            metrics=metrics,
            feasible=feasible,
            chunk_id=chunk_id,
            layer_round=layer_round,
            sort_path=sort_path,
        )
        with self._lock:
            self.pending.append(obs)
        return obs

    def flush(self) -> list[Observation]:
        with self._lock:
            pending, self.pending = self.pending, []
        pending.sort(key=lambda o: (o.chunk_id, o.sort_path))
        allowed = max(0, self.total_budget - len(self.archive))
        kept = pending[:allowed]
        lines = []
        for obs in kept:
            self.archive.append(obs)
            lines.append(encode_archive_line(obs))
        if self._archive_path and lines:
            with open(self._archive_path, "a", encoding="utf-8") as handle:
                handle.write("\n".join(lines) + "\n")
        if self.on_flush is not None:
            self.on_flush(kept)
        return kept


@dataclass
class SearchDeps:
    """Everything a layer search needs beyond its own arguments."""

    catalog: CogCatalog
    scopes: list[tuple[str, ...]]
    spec: EvaluatorSpec
    sink: EvalSink
    knobs: Knobs
    seed: int
    round_l: int
    priors: dict[tuple[str, ...], list[FeedbackEntry]] = field(default_factory=dict)
    trace: Callable[[dict[str, Any]], None] | None = None
    _chunk_counter: Iterable[int] = field(default_factory=itertools.count)
    _trace_lock: threading.Lock = field(default_factory=threading.Lock)

    def next_chunk_id(self) -> int:
        return next(iter(self._chunk_counter))

    def emit(self, row: dict[str, Any]) -> None:
        if self.trace is not None:
            with self._trace_lock:
                self.trace(row)


def rng_for(seed: int, path: tuple[int, ...]) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_SEARCH, *path]))


@dataclass
class _ThetaRecord:
    """Per-candidate state carried across rungs within one chunk."""

    entries: list[FeedbackEntry] = field(default_factory=list)
    keys: set[str] = field(default_factory=set)
    best: Observation | None = None
    es: EarlyStopState | None = None


def _better(a: Observation | None, b: Observation | None, spec: EvaluatorSpec) -> Observation | None:
    if a is None:
        return b
    if b is None:
        return a
    ka = (not a.feasible, -scalar_score(a.metrics, spec), a.sort_path)
    kb = (not b.feasible, -scalar_score(b.metrics, spec), b.sort_path)
    return a if ka <= kb else b


def layer_search(
    c_chosen: Mapping[str, str],
    budgets: Sequence[int],
    layer: int,
    budget: int,
    deps: SearchDeps,
    path: tuple[int, ...] | None = None,
) -> FeedbackSet:
    """Run one layer's search and return its feedback (entries over its scope).

    ``budgets`` is indexed innermost-first; ``layer`` counts from 1 at the
    innermost. ``c_chosen`` must cover exactly the scopes of the layers
    above ``layer``. Observations land in the sink's archive as a side
    effect; at most ``budget`` configurations are proposed at this layer.
    """
    if layer < 1 or layer > len(deps.scopes):
        raise ValueError(f"layer {layer} outside 1..{len(deps.scopes)}")
    fb, _, _ = _layer_search(
        c_chosen,
        list(budgets),
        layer,
        budget,
        deps,
        path=path if path is not None else (deps.round_l,),
        top=True,
        chunk_id=-1,
        seen=frozenset(),
        extra_prior=None,
    )
    return fb


def _layer_search(
    c_chosen: Mapping[str, str],
    budgets: list[int],
    layer: int,
    budget: int,
    deps: SearchDeps,
    path: tuple[int, ...],
    top: bool,
    chunk_id: int,
    seen: frozenset[str],
    extra_prior: list[FeedbackEntry] | None,
) -> tuple[FeedbackSet, Observation | None, set[str]]:
    scope = deps.scopes[layer - 1]
    knobs = deps.knobs
    fb = FeedbackSet(scope, [])
    if budget <= 0:
        return fb, None, set()

    if not scope:
        if layer == 1:
            # Leaf with nothing left to choose: score the fixed choices once.
            obs = deps.sink.propose(c_chosen, path + (0,), chunk_id, deps.round_l)
            fb.add(
                FeedbackEntry({}, deps.spec.raw_score(obs.metrics), obs.feasible, (1, *path, 0))
            )
            if top:
                deps.sink.flush()
            return fb, obs, {obs.key}
        # Empty layer: recurse immediately with the child's own assigned budget.
        return _layer_search(
            c_chosen,
            budgets,
            layer - 1,
            budgets[layer - 2],
            deps,
            path=path + (0,),
            top=top,
            chunk_id=chunk_id,
            seen=seen,
            extra_prior=None,
        )

    prior = deps.priors.get(scope, []) + (extra_prior or [])
    if layer == 1:
        return _innermost_search(c_chosen, budget, deps, path, top, chunk_id, seen, prior, fb)
    return _outer_search(c_chosen, budgets, layer, budget, deps, path, top, chunk_id, seen, prior, fb)


def _innermost_search(
    c_chosen: Mapping[str, str],
    budget: int,
    deps: SearchDeps,
    path: tuple[int, ...],
    top: bool,
    chunk_id: int,
    seen: frozenset[str],
    prior: list[FeedbackEntry],
    fb: FeedbackSet,
) -> tuple[FeedbackSet, Observation | None, set[str]]:
    knobs = deps.knobs
    scope = fb.scope
    rng = rng_for(deps.seed, path)
    es = (
        EarlyStopState(knobs.early_stop_window, knobs.early_stop_epsilon)
        if knobs.early_stop
        else None
    )
    own_keys: set[str] = set()
    best: Observation | None = None
    call_best = float("-inf")
    k = 0
    stopped = False
    while k < budget and not stopped:
        if top:
            if deps.sink.remaining() <= 0:
                break
            chunk_id = deps.next_chunk_id()
            if knobs.dedup:
                seen = deps.sink.seen_keys()
            window = min(knobs.chunk_size, budget - k)
        else:
            window = budget - k
        for _ in range(window):
            exclude = None
            if knobs.dedup:
                snapshot = seen
                local = own_keys

                def exclude(assignment: Mapping[str, str]) -> bool:
                    key = deps.sink.full_key({**c_chosen, **assignment})
                    return key in snapshot or key in local

            proposal = tpe_sample(
                FeedbackSet(scope, prior + fb.entries),
                deps.catalog,
                1,
                rng,
                n_cand=knobs.n_candidates,
                gamma=knobs.gamma,
                smoothing=knobs.smoothing,
                exclude=exclude,
            )[0]
            obs = deps.sink.propose(
                {**c_chosen, **proposal}, path + (k,), chunk_id, deps.round_l
            )
            own_keys.add(obs.key)
            fb.add(
                FeedbackEntry(
                    proposal, deps.spec.raw_score(obs.metrics), obs.feasible, (1, *path, k)
                )
            )
            best = _better(best, obs, deps.spec)
            k += 1
            if es is not None:
                call_best = max(call_best, scalar_score(obs.metrics, deps.spec))
                if early_stop_check(es, call_best):
                    stopped = True
                    break
        if top:
            deps.sink.flush()
    return fb, best, own_keys


def _outer_search(
    c_chosen: Mapping[str, str],
    budgets: list[int],
    layer: int,
    budget: int,
    deps: SearchDeps,
    path: tuple[int, ...],
    top: bool,
    chunk_id: int,
    seen: frozenset[str],
    prior: list[FeedbackEntry],
    tf: FeedbackSet,
) -> tuple[FeedbackSet, Observation | None, set[str]]:
    knobs = deps.knobs
    scope = tf.scope
    schedule = make_rung_schedule(budgets[layer - 2], knobs.eta)
    layer_es = (
        EarlyStopState(knobs.early_stop_window, knobs.early_stop_epsilon)
        if knobs.early_stop
        else None
    )
    layer_best = float("-inf")
    best: Observation | None = None
    all_keys: set[str] = set()
    b_used = 0
    chunk_local = 0
    while b_used < budget:
        if top:
            if deps.sink.remaining() <= 0:
                break
            chunk_id = deps.next_chunk_id()
            if knobs.dedup:
                seen = deps.sink.seen_keys()
        n = min(knobs.chunk_size, budget - b_used)
        b_used += n
        chunk_path = path + (chunk_local,)
        rng = rng_for(deps.seed, chunk_path)
        thetas = tpe_sample(
            FeedbackSet(scope, prior + tf.entries),
            deps.catalog,
            n,
            rng,
            n_cand=knobs.n_candidates,
            gamma=knobs.gamma,
            smoothing=knobs.smoothing,
        )
        deps.emit(
            {
                "type": "chunk",
                "round": deps.round_l,
                "layer": layer,
                "chunk_id": chunk_id,
                "path": list(chunk_path),
                "n": n,
                "r0": schedule.r0,
                "rungs": schedule.rungs,
                "chunk_size": knobs.chunk_size,
            }
        )
        records = [_ThetaRecord() for _ in range(n)]
        alive = list(range(n))
        chunk_entries: list[FeedbackEntry] = []

        def run_theta(j: int, rung: int, r_s: int) -> tuple[int, FeedbackSet, Observation | None, set[str]]:
            theta = thetas[j]
            record = records[j]
            child_seen = frozenset(seen | record.keys) if knobs.dedup else frozenset()
            child_fb, child_best, child_keys = _layer_search(
                {**c_chosen, **theta},
                budgets,
                layer - 1,
                r_s,
                deps,
                path=chunk_path + (j, rung),
                top=False,
                chunk_id=chunk_id,
                seen=child_seen,
                extra_prior=record.entries or None,
            )
            return j, child_fb, child_best, child_keys

        for s in range(schedule.rungs):
            if not alive:
                break
            r_s = schedule.budget(s)
            deps.emit(
                {
                    "type": "rung",
                    "round": deps.round_l,
                    "layer": layer,
                    "chunk_id": chunk_id,
                    "path": list(chunk_path),
                    "s": s,
                    "r_s": r_s,
                    "theta_in": len(alive),
                }
            )
            if top and knobs.parallel > 1 and len(alive) > 1:
                with ThreadPoolExecutor(max_workers=knobs.parallel) as pool:
                    futures = [pool.submit(run_theta, j, s, r_s) for j in alive]
                    outcomes = {}
                    for future in futures:
                        outcome = future.result()
                        outcomes[outcome[0]] = outcome
                results = [outcomes[j] for j in alive]
            else:
                results = [run_theta(j, s, r_s) for j in alive]
            for j, child_fb, child_best, child_keys in results:
                record = records[j]
                record.entries.extend(child_fb.entries)
                record.keys.update(child_keys)
                all_keys.update(child_keys)
                joined = [
                    FeedbackEntry(
                        {**thetas[j], **dict(e.assignment)}, e.score, e.feasible, e.order
                    )
                    for e in child_fb.entries
                ]
                chunk_entries.extend(project_feedback(joined, scope))
                record.best = _better(record.best, child_best, deps.spec)
            if knobs.early_stop:
                survivors = []
                for j in alive:
                    record = records[j]
                    if record.es is None:
                        record.es = EarlyStopState(
                            knobs.early_stop_window, knobs.early_stop_epsilon
                        )
                    theta_best = (
                        scalar_score(record.best.metrics, deps.spec)
                        if record.best is not None
                        else float("-inf")
                    )
                    if not early_stop_check(record.es, theta_best):
                        survivors.append(j)
                alive = survivors
            if not alive:
                deps.emit(
                    {
                        "type": "survivors",
                        "round": deps.round_l,
                        "layer": layer,
                        "chunk_id": chunk_id,
                        "path": list(chunk_path),
                        "s": s,
                        "kept": [],
                    }
                )
                break
            items = [records[j].best for j in alive]
            ranking = rank_for_search(
                [obs for obs in items if obs is not None],
                deps.spec,
                tie_keys=[j for j, obs in zip(alive, items) if obs is not None],
            )
            ranked_alive = [j for j, obs in zip(alive, items) if obs is not None]
            alive = halve(ranked_alive, knobs.eta, ranking)
            deps.emit(
                {
                    "type": "survivors",
                    "round": deps.round_l,
                    "layer": layer,
                    "chunk_id": chunk_id,
                    "path": list(chunk_path),
                    "s": s,
                    "kept": [canonical_key(thetas[j]) for j in alive],
                }
            )
            if not alive:
                break
        tf.entries.extend(chunk_entries)
        for record in records:
            best = _better(best, record.best, deps.spec)
        if top:
            deps.sink.flush()
        chunk_local += 1
        if layer_es is not None:
            chunk_best = max(
                (
                    scalar_score(r.best.metrics, deps.spec)
                    for r in records
                    if r.best is not None
                ),
                default=float("-inf"),
            )
            layer_best = max(layer_best, chunk_best)
            if early_stop_check(layer_es, layer_best):
                deps.emit(
                    {
                        "type": "layer_stop",
                        "round": deps.round_l,
                        "layer": layer,
                        "path": list(path),
                        "chunks_run": chunk_local,
                    }
                )
                break
    return tf, best, all_keys
