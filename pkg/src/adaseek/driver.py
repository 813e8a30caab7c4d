"""Top-level adaptive search driver and run persistence.

Rounds run with one, then two, then three layers until the evaluation
budget is exhausted. Each round estimates per-layer search sizes from cog
counts, clamps the round's grant to the remaining budget (the three-layer
round spends everything left), partitions the grant across layers, and
hands the outermost layer to the recursive layer search. Results live in
a run directory (manifest, append-only archive, frontier CSV) that can be
resumed later with a larger budget. Baseline runners (random, grid,
single-layer surrogate loop) produce archives in the identical format.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .cogspace import Category, CogCatalog, LayerPlan, canonical_key, group_layers, space_size
from .objectives import (
    EPS_COST,
    EvaluatorSpec,
    MetricVector,
    Observation,
    ResultArchive,
    load_archive,
    pareto_frontier,
    select_best,
    write_frontier_csv,
)
from .search import EvalSink, Knobs, SearchDeps, layer_search, rng_for
from .surrogate import FeedbackEntry, FeedbackSet, fit_model, tpe_sample
from .search import project_feedback

MANIFEST_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
ARCHIVE_NAME = "archive.jsonl"
FRONTIER_NAME = "frontier.csv"
SEARCH_TRACE_NAME = "search_trace.jsonl"
SURROGATE_TRACE_NAME = "surrogate_trace.jsonl"
LOCK_NAME = "LOCK"

MAX_GRID_SPACE = 2**20


class RunLockedError(RuntimeError):
    """Another process holds the run directory."""


class GridTooLargeError(ValueError):
    """Grid enumeration refused; the space exceeds the supported size."""

    def __init__(self, size: int) -> None:
        super().__init__(f"space has {size} configurations (grid limit {MAX_GRID_SPACE})")
        self.size = size


@dataclass
class RoundRecord:
    layer_count: int
    granted: int
    budgets: list[int]
    evals_consumed: int = 0
    status: str = "running"  # running | done | skipped
    continuation: bool = False

    def as_dict(self) -> dict[str, Any]:
        return {
            "layer_count": self.layer_count,
            "granted": self.granted,
            "budgets": self.budgets,
            "evals_consumed": self.evals_consumed,
            "status": self.status,
            "continuation": self.continuation,
        }


@dataclass
class BudgetLedger:
    total: int
    rounds: list[RoundRecord] = field(default_factory=list)

    @property
    def used(self) -> int:
        return sum(r.evals_consumed for r in self.rounds)


def estimate_sizes(layer_plan: LayerPlan, alpha: float) -> list[float]:
    """Expected per-layer search sizes: cog count to the alpha power, 1 if empty."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return [float(len(layer)) ** alpha if layer else 1.0 for layer in layer_plan.layers]


def round_budget(total: int, used: int, expected: float, num_layers: int) -> int:
    """Evaluations granted to one round.

    Rounds with one or two layers get at most their expected size; the
    three-layer round takes everything that remains once the remainder
    exceeds its expectation.
    """
    if used > total:
        raise ValueError("used budget exceeds total")
    remaining = total - used
    if remaining <= 0:
        return 0
    if num_layers == 3 and remaining > expected:
        return remaining
    return min(remaining, math.ceil(expected))


def partition_budget(
    sizes: Sequence[float],
    granted: int,
    expected: float,
    num_layers: int,
    paper_exact_sqrt: bool = False,
    empty: Sequence[bool] | None = None,
) -> list[int]:
    """Per-layer budgets proportional to size, scaled so the product tracks the grant.

    The scale is (granted/expected)**(1/num_layers); with the exact-sqrt
    flag it stays a square root regardless of the layer count, matching
    the two-layer-only derivation. The 1e-9 nudge absorbs float error so
    exact ratios floor to their intended integers.
    """
    if granted < 0:
        raise ValueError("granted budget must be >= 0")
    exponent = 0.5 if paper_exact_sqrt else 1.0 / num_layers
    ratio = (granted / expected) ** exponent if expected > 0 else 0.0
    budgets: list[int] = []
    for i, size in enumerate(sizes):
        if empty is not None and empty[i]:
            budgets.append(1)
        else:
            budgets.append(max(1, math.floor(size * ratio + 1e-9)))
    return budgets


def _atomic_write(path: Path, content: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(content, encoding="utf-8")
    os.replace(tmp, path)


def _spec_to_doc(spec: EvaluatorSpec) -> dict[str, Any]:
    return {
        "objectives": list(spec.objectives),
        "thresholds": dict(spec.thresholds),
        "scalarizer": spec.scalarizer,
        "cost_scale": spec.cost_scale,
        "latency_scale": spec.latency_scale,
    }


def spec_from_doc(doc: Mapping[str, Any]) -> EvaluatorSpec:
    return EvaluatorSpec(
        objectives=tuple(doc["objectives"]),
        thresholds=dict(doc.get("thresholds", {})),
        scalarizer=doc.get("scalarizer", "auto"),
        cost_scale=float(doc.get("cost_scale", 1.0)),
        latency_scale=float(doc.get("latency_scale", 1.0)),
    )


class _RunDir:
    """Run directory bookkeeping: lock file, manifest, archive, traces."""

    def __init__(self, path: str | os.PathLike[str] | None) -> None:
        self.path = Path(path) if path is not None else None
        self._locked = False

    def acquire(self) -> None:
        if self.path is None:
            return
        self.path.mkdir(parents=True, exist_ok=True)
        lock = self.path / LOCK_NAME
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(f"run directory {self.path} is locked") from None
        os.close(fd)
        self._locked = True

    def release(self) -> None:
        if self.path is not None and self._locked:
            try:
                (self.path / LOCK_NAME).unlink()
            except FileNotFoundError:
                pass
            self._locked = False

    def file(self, name: str) -> str | None:
        return str(self.path / name) if self.path is not None else None

    def write_manifest(self, manifest: Mapping[str, Any]) -> None:
        if self.path is not None:
            _atomic_write(self.path / MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True))

    def append_jsonl(self, name: str, row: Mapping[str, Any]) -> None:
        if self.path is not None:
            with open(self.path / name, "a", encoding="utf-8") as handle:
                handle.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class SimBundle:
    """Simulator context handed to the driver for probes and option evolution."""

    graph: Any
    surface: Any
    catalog: CogCatalog


def archive_priors(
    archive: ResultArchive, scopes: Iterable[tuple[str, ...]], spec: EvaluatorSpec
) -> dict[tuple[str, ...], list[FeedbackEntry]]:
    """Project archived observations onto each layer scope as surrogate priors."""
    entries = [
        FeedbackEntry(o.assignments, spec.raw_score(o.metrics), o.feasible, (0, o.eval_index))
        for o in archive.observations
    ]
    priors: dict[tuple[str, ...], list[FeedbackEntry]] = {}
    for scope in scopes:
        if scope and entries:
            priors[scope] = project_feedback(entries, scope)
        else:
            priors[scope] = []
    return priors


def _freeze_scales(spec: EvaluatorSpec, archive: ResultArchive) -> None:
    """One-time scalarizer normalization from observed medians (3-objective runs)."""
    costs = [o.metrics.cost for o in archive.observations]
    latencies = [o.metrics.latency for o in archive.observations]
    spec.cost_scale = max(statistics.median(costs), EPS_COST)
    spec.latency_scale = max(statistics.median(latencies), EPS_COST)


def _importance_probes(
    sink: EvalSink,
    deps_catalog: CogCatalog,
    cheapest: Mapping[str, str],
    spec: EvaluatorSpec,
    top_percent: float,
    next_chunk: Callable[[], int],
) -> tuple[dict[str, float], list[str]]:
    """Per-step spread probes routed through the sink so they consume budget."""
    importance: dict[str, float] = {}
    step = 0
    for cog in deps_catalog.cogs:
        if cog.category is not Category.STEP:
            continue
        chunk_id = next_chunk()
        scores = []
        for option in cog.options:
            assignments = dict(cheapest)
            assignments[cog.id] = option.id
            obs = sink.propose(assignments, (0, step), chunk_id, 0)
            scores.append(spec.raw_score(obs.metrics))
            step += 1
        spread = max(scores) - min(scores)
        importance[cog.target] = max(importance.get(cog.target, 0.0), spread)
        sink.flush()
    ranked = sorted(importance, key=lambda s: (-importance[s], s))
    n_select = math.ceil(len(ranked) * top_percent / 100.0) if ranked else 0
    return importance, ranked[:n_select]


def _compute_prefilters(
    sink: EvalSink,
    catalog: CogCatalog,
    knobs: Knobs,
    spec: EvaluatorSpec,
    seed: int,
    sim: SimBundle,
    next_chunk: Callable[[], int],
) -> dict[str, str]:
    from . import simflow

    frozen: dict[str, str] = {}
    if knobs.complexity_filter:
        ratings = simflow.seeded_ratings(sim.graph, seed)
        _, selected = simflow.complexity_scores(sim.graph, ratings)
        keep = set(selected)
        for cog in catalog.cogs:
            if cog.category is Category.ARCHITECTURE and cog.target not in keep:
                frozen[cog.id] = cog.options[0].id
    if knobs.importance_filter:
        cheapest = simflow.cheapest_options(sim.surface, catalog)
        _, selected_steps = _importance_probes(
            sink, catalog, cheapest, spec, knobs.importance_percent, next_chunk
        )
        keep = set(selected_steps)
        for cog in catalog.cogs:
            if cog.category is Category.STEP and cog.target not in keep:
                frozen[cog.id] = cheapest[cog.id]
    return frozen


def adaseek_run(
    catalog: CogCatalog,
    evaluate: Callable[[Mapping[str, str]], MetricVector],
    spec: EvaluatorSpec,
    total_budget: int,
    knobs: Knobs | None = None,
    seed: int = 0,
    run_dir: str | os.PathLike[str] | None = None,
    sim: SimBundle | None = None,
    trace: Callable[[Mapping[str, Any]], None] | None = None,
) -> tuple[ResultArchive, list[Observation]]:
    """Run the full adaptive search under a total evaluation budget.

    Returns the archive and the selected configurations; when ``run_dir``
    is given the manifest, archive, and frontier are persisted there and
    the run can be resumed with a larger budget later.
    """
    if total_budget < 1:
        raise ValueError("total budget must be >= 1")
    knobs = knobs or Knobs()
    archive = ResultArchive(spec)
    return _run_rounds(
        archive,
        catalog,
        evaluate,
        spec,
        total_budget,
        knobs,
        seed,
        _RunDir(run_dir),
        sim,
        trace,
        completed_rounds=set(),
        prior_rounds=[],
    )


def _run_rounds(
    archive: ResultArchive,
    catalog: CogCatalog,
    evaluate: Callable[[Mapping[str, str]], MetricVector],
    spec: EvaluatorSpec,
    total_budget: int,
    knobs: Knobs,
    seed: int,
    rundir: _RunDir,
    sim: SimBundle | None,
    trace: Callable[[Mapping[str, Any]], None] | None,
    completed_rounds: set[int],
    prior_rounds: list[RoundRecord],
    frozen_hint: Mapping[str, str] | None = None,
) -> tuple[ResultArchive, list[Observation]]:
    rundir.acquire()
    try:
        ledger = BudgetLedger(total=total_budget, rounds=list(prior_rounds))
        chunk_counter = itertools.count()
        flush_count = 0
        scales_frozen = spec.cost_scale != 1.0 or spec.latency_scale != 1.0

        trace_cb = trace
        if rundir.path is not None:
            file_cb = lambda row: rundir.append_jsonl(SEARCH_TRACE_NAME, row)  # noqa: E731
            if trace is not None:
                trace_cb = lambda row: (trace(row), file_cb(row))[0]  # noqa: E731
            else:
                trace_cb = file_cb

        def write_manifest(completed: bool = False) -> None:
            manifest = {
                "format_version": MANIFEST_FORMAT_VERSION,
                "kind": "adaseek",
                "seed": seed,
                "total_budget": total_budget,
                "used": len(archive),
                "knobs": knobs.as_dict(),
                "evaluator": _spec_to_doc(spec),
                "catalog_version": catalog.version,
                "frozen": frozen,
                "rounds": [r.as_dict() for r in ledger.rounds],
                "completed": completed,
            }
            rundir.write_manifest(manifest)

        def on_flush(kept: list[Observation]) -> None:
            nonlocal flush_count, scales_frozen
            flush_count += 1
            if not scales_frozen and len(spec.objectives) == 3 and len(archive) > 0:
                _freeze_scales(spec, archive)
                scales_frozen = True
            if (
                sim is not None
                and knobs.evolve_every > 0
                and flush_count % knobs.evolve_every == 0
            ):
                from . import simflow

                for cog in list(catalog.cogs):
                    if cog.dynamic and len(archive) > 0:
                        simflow.evolve_dynamic_options(
                            sim.surface, catalog, archive, cog.id, knobs.evolve_k
                        )
            write_manifest()

        sink = EvalSink(
            archive,
            evaluate,
            spec,
            total_budget,
            archive_path=rundir.file(ARCHIVE_NAME),
            frozen=frozen_hint,
            on_flush=on_flush,
        )

        frozen: dict[str, str] = dict(frozen_hint or {})
        if not frozen and (knobs.importance_filter or knobs.complexity_filter):
            if sim is None:
                raise ValueError("pre-filters need a simulator bundle")
            frozen = _compute_prefilters(
                sink, catalog, knobs, spec, seed, sim, lambda: next(chunk_counter)
            )
            sink.frozen = dict(frozen)
        active = catalog.subset([c.id for c in catalog.cogs if c.id not in frozen])

        order = [knobs.forced_layers] if knobs.forced_layers else [1, 2, 3]
        for num_layers in order:
            if num_layers in completed_rounds:
                continue
            if len(archive) >= total_budget:
                break
            plan = group_layers(active, num_layers)
            sizes = estimate_sizes(plan, knobs.alpha)
            expected = math.prod(sizes)
            if knobs.forced_layers:
                granted = total_budget - len(archive)
            else:
                granted = round_budget(total_budget, len(archive), expected, num_layers)
            if granted <= 0:
                ledger.rounds.append(
                    RoundRecord(num_layers, 0, [], status="skipped")
                )
                continue
            budgets = partition_budget(
                sizes,
                granted,
                expected,
                num_layers,
                paper_exact_sqrt=knobs.paper_exact_sqrt,
                empty=[not layer for layer in plan.layers],
            )
            plan.sizes = sizes
            plan.budgets = budgets
            record = RoundRecord(num_layers, granted, list(budgets))
            record.continuation = num_layers in {r.layer_count for r in prior_rounds}
            ledger.rounds.append(record)
            write_manifest()
            before = len(archive)
            deps = SearchDeps(
                catalog=active,
                scopes=plan.layers,
                spec=spec,
                sink=sink,
                knobs=knobs,
                seed=seed,
                round_l=num_layers,
                priors=archive_priors(archive, plan.layers, spec),
                trace=trace_cb,
                _chunk_counter=chunk_counter,
            )
            layer_search({}, budgets, num_layers, budgets[-1], deps)
            sink.flush()
            record.evals_consumed = len(archive) - before
            record.status = "done"
            write_manifest()
            if len(archive) >= total_budget:
                break

        selected = select_best(archive, spec, k=knobs.select_k)
        if rundir.path is not None:
            write_frontier_csv(rundir.file(FRONTIER_NAME), pareto_frontier(archive, spec))
        write_manifest(completed=True)
        return archive, selected
    finally:
        rundir.release()


def resume_run(
    run_dir: str | os.PathLike[str],
    new_total_budget: int,
    catalog: CogCatalog,
    evaluate: Callable[[Mapping[str, str]], MetricVector],
    sim: SimBundle | None = None,
    trace: Callable[[Mapping[str, Any]], None] | None = None,
) -> tuple[ResultArchive, list[Observation]]:
    """Continue a persisted run with a larger budget.

    Completed rounds are skipped; the first incomplete round is re-planned
    against the remaining budget. When every round already completed, the
    deepest round is re-opened as a continuation so the extra budget is
    actually spent. A resume that adds no budget returns the existing
    selection untouched.
    """
    path = Path(run_dir)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"unsupported manifest format: {manifest.get('format_version')!r}")
    spec = spec_from_doc(manifest["evaluator"])
    knobs = Knobs.from_dict(manifest["knobs"])
    seed = int(manifest["seed"])
    archive = load_archive(str(path / ARCHIVE_NAME), spec)
    used = len(archive)
    if new_total_budget <= used:
        return archive, select_best(archive, spec, k=knobs.select_k)

    prior_rounds = [
        RoundRecord(
            layer_count=r["layer_count"],
            granted=r["granted"],
            budgets=list(r["budgets"]),
            evals_consumed=r["evals_consumed"],
            status=r["status"],
            continuation=bool(r.get("continuation", False)),
        )
        for r in manifest.get("rounds", [])
    ]
    completed = {r.layer_count for r in prior_rounds if r.status == "done"}
    order = [knobs.forced_layers] if knobs.forced_layers else [1, 2, 3]
    if all(num in completed for num in order):
        completed.discard(order[-1])
    frozen = dict(manifest.get("frozen", {}))
    return _run_rounds(
        archive,
        catalog,
        evaluate,
        spec,
        new_total_budget,
        knobs,
        seed,
        _RunDir(path),
        sim,
        trace,
        completed_rounds=completed,
        prior_rounds=prior_rounds,
        frozen_hint=frozen,
    )


def _baseline_scaffold(
    kind: str,
    archive: ResultArchive,
    spec: EvaluatorSpec,
    seed: int,
    total_budget: int,
    knobs: Knobs,
    rundir: _RunDir,
) -> None:
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "kind": f"baseline-{kind}",
        "seed": seed,
        "total_budget": total_budget,
        "used": len(archive),
        "knobs": knobs.as_dict(),
        "evaluator": _spec_to_doc(spec),
        "catalog_version": 0,
        "frozen": {},
        "rounds": [],
        "completed": True,
    }
    rundir.write_manifest(manifest)
    if rundir.path is not None:
        write_frontier_csv(rundir.file(FRONTIER_NAME), pareto_frontier(archive, spec))


def run_random(
    catalog: CogCatalog,
    evaluate: Callable[[Mapping[str, str]], MetricVector],
    spec: EvaluatorSpec,
    total_budget: int,
    seed: int = 0,
    run_dir: str | os.PathLike[str] | None = None,
    knobs: Knobs | None = None,
) -> tuple[ResultArchive, list[Observation]]:
    """Uniform i.i.d. configurations up to the budget (duplicates possible)."""
    if total_budget < 1:
        raise ValueError("total budget must be >= 1")
    knobs = knobs or Knobs()
    archive = ResultArchive(spec)
    rundir = _RunDir(run_dir)
    rundir.acquire()
    try:
        sink = EvalSink(archive, evaluate, spec, total_budget, archive_path=rundir.file(ARCHIVE_NAME))
        rng = rng_for(seed, (0,))
        option_lists = [(c.id, c.option_ids()) for c in catalog.cogs]
        for i in range(total_budget):
            assignments = {cid: opts[int(rng.integers(len(opts)))] for cid, opts in option_lists}
            sink.propose(assignments, (0, i), chunk_id=i // knobs.chunk_size, layer_round=0)
            if (i + 1) % knobs.chunk_size == 0:
                sink.flush()
        sink.flush()
        _baseline_scaffold("random", archive, spec, seed, total_budget, knobs, rundir)
        return archive, select_best(archive, spec, k=knobs.select_k)
    finally:
        rundir.release()


def run_grid(
    catalog: CogCatalog,
    evaluate: Callable[[Mapping[str, str]], MetricVector],
    spec: EvaluatorSpec,
    seed: int = 0,
    run_dir: str | os.PathLike[str] | None = None,
    knobs: Knobs | None = None,
) -> tuple[ResultArchive, list[Observation]]:
    """Exhaustive enumeration; ignores any budget and records the actual count."""
    size = space_size(catalog, catalog.cog_ids())
    if size > MAX_GRID_SPACE:
        raise GridTooLargeError(size)
    knobs = knobs or Knobs()
    archive = ResultArchive(spec)
    rundir = _RunDir(run_dir)
    rundir.acquire()
    try:
        sink = EvalSink(archive, evaluate, spec, size, archive_path=rundir.file(ARCHIVE_NAME))
        cog_ids = catalog.cog_ids()
        option_lists = [catalog.cog(cid).option_ids() for cid in cog_ids]
        for i, combo in enumerate(itertools.product(*option_lists)):
            sink.propose(dict(zip(cog_ids, combo)), (0, i), chunk_id=i // 256, layer_round=0)
            if (i + 1) % 256 == 0:
                sink.flush()
        sink.flush()
        _baseline_scaffold("grid", archive, spec, seed, size, knobs, rundir)
        return archive, select_best(archive, spec, k=knobs.select_k)
    finally:
        rundir.release()


def run_flat_tpe(
    catalog: CogCatalog,
    evaluate: Callable[[Mapping[str, str]], MetricVector],
    spec: EvaluatorSpec,
    total_budget: int,
    seed: int = 0,
    run_dir: str | os.PathLike[str] | None = None,
    knobs: Knobs | None = None,
) -> tuple[ResultArchive, list[Observation]]:
    """Single-layer surrogate loop over the whole space, no halving, no early stop."""
    if total_budget < 1:
        raise ValueError("total budget must be >= 1")
    base = knobs or Knobs()
    flat = Knobs.from_dict(base.as_dict())
    flat.early_stop = False
    archive = ResultArchive(spec)
    rundir = _RunDir(run_dir)
    rundir.acquire()
    try:
        sink = EvalSink(archive, evaluate, spec, total_budget, archive_path=rundir.file(ARCHIVE_NAME))
        scope = tuple(catalog.cog_ids())
        deps = SearchDeps(
            catalog=catalog,
            scopes=[scope],
            spec=spec,
            sink=sink,
            knobs=flat,
            seed=seed,
            round_l=0,
            priors={scope: []},
        )
        layer_search({}, [total_budget], 1, total_budget, deps, path=(0,))
        sink.flush()
        _baseline_scaffold("flat_tpe", archive, spec, seed, total_budget, base, rundir)
        return archive, select_best(archive, spec, k=base.select_k)
    finally:
        rundir.release()
