"""Seeded synthetic workflows standing in for real model-call pipelines.

A generated surface maps configurations to a quality/cost/latency triple
deterministically from a seed: quality is a logistic over per-option
effects plus sparse pairwise interaction terms, cost sums executed node
instances, and latency is the critical path (parallel branches take the
max; cyclic node groups repeat up to their iteration bounds).

Architecture options rewrite the graph: decomposition splits a node into
a two-node chain with cheaper parts, ensembling fans a node out into k
parallel samplers feeding an aggregator (quality follows the best sampler
minus a fixed aggregation penalty). Everything an external judge or
generator would contribute in production is replaced by seeded draws so
each mechanism stays testable offline.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import statistics
import zlib
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

import networkx as nx
import numpy as np

from .cogspace import (
    GLOBAL_TARGET,
    Category,
    Cog,
    CogCatalog,
    ContractError,
    OptionRef,
    canonical_key,
    extend_options,
    space_size,
)
from .objectives import EvaluatorSpec, MetricVector, Observation, ResultArchive, make_observation, pareto_frontier

MAX_GENERATED_SPACE = 2**32
MAX_SCANNED_SPACE = 2**20

NODE_KINDS = ("model_call", "retrieval", "code", "tool_call")

# Rewrite shape constants (abstract units; no external counterpart exists).
DECOMP_COST_FACTOR = 0.55
DECOMP_LATENCY_FACTOR = 0.55
AGG_COST_FACTOR = 0.25
AGG_LATENCY_FACTOR = 0.25
AGGREGATION_PENALTY = 0.05

_STREAM_SURFACE = 0x5F
_STREAM_NOISE = 0xA0
_STREAM_EVOLVE = 0xE7
_STREAM_RATINGS = 0x4A

SURFACE_FILE_VERSION = 1


class SimBundleError(ValueError):
    """The space/surface file pair cannot back a simulated run."""


@dataclass(frozen=True)
class StepNode:
    id: str
    kind: str
    base_cost: float
    base_latency: float
    iteration_bound: int = 1
    origin: str | None = None  # original node whose option deltas apply here

    def __post_init__(self) -> None:
        if self.base_cost < 0 or self.base_latency < 0:
            raise ValueError("base cost/latency must be non-negative")
        if self.iteration_bound < 1:
            raise ValueError("iteration bound must be >= 1")


@dataclass
class WorkflowGraph:
    nodes: list[StepNode]
    edges: list[tuple[str, str]]
    entry: str
    exit: str

    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, node_id: str) -> StepNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise ValueError(f"unknown node id: {node_id!r}")

    def has_node(self, node_id: str) -> bool:
        return any(n.id == node_id for n in self.nodes)

    def out_degree(self, node_id: str) -> int:
        return sum(1 for src, _ in self.edges if src == node_id)

    def validate(self) -> None:
        ids = self.node_ids()
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        known = set(ids)
        for src, dst in self.edges:
            if src not in known or dst not in known:
                raise ValueError(f"edge references unknown node: {(src, dst)}")
        if self.entry not in known or self.exit not in known:
            raise ValueError("entry/exit must be graph nodes")
        graph = nx.DiGraph(self.edges)
        graph.add_nodes_from(ids)
        condensed = nx.condensation(graph)
        mapping = condensed.graph["mapping"]
        if not nx.has_path(condensed, mapping[self.entry], mapping[self.exit]):
            raise ValueError("exit not reachable from entry")

    def serialize(self) -> str:
        doc = {
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "base_cost": n.base_cost,
                    "base_latency": n.base_latency,
                    "iteration_bound": n.iteration_bound,
                    "origin": n.origin,
                }
                for n in self.nodes
            ],
            "edges": sorted(self.edges),
            "entry": self.entry,
            "exit": self.exit,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


@dataclass
class LatentSurface:
    """Seeded hidden function from configurations to metrics.

    Effects and deltas are keyed (cog id, option id). Interaction terms are
    keyed by cog pair and by *root* option ids, so options appended during a
    run inherit their source option's interaction behavior. ``effect_max``
    caps evolved options strictly below each cog's best initial effect.
    """

    seed: int
    effects: dict[str, dict[str, float]]
    cost_delta: dict[str, dict[str, float]]
    latency_delta: dict[str, dict[str, float]]
    interactions: dict[tuple[str, str], dict[tuple[str, str], float]]
    option_root: dict[str, dict[str, str]]
    effect_max: dict[str, float]
    effect_scale: float
    noise_sd: float = 0.0
    optimum_assignments: dict[str, str] | None = None
    optimum_quality: float | None = None
    catalog: CogCatalog | None = None
    params: dict[str, Any] = field(default_factory=dict)

    def to_document(self) -> dict[str, Any]:
        """Full dump (effects, interactions, costs) for oracle cross-checks."""
        return {
            "seed": self.seed,
            "params": self.params,
            "noise_sd": self.noise_sd,
            "effect_scale": self.effect_scale,
            "effects": self.effects,
            "cost_delta": self.cost_delta,
            "latency_delta": self.latency_delta,
            "interactions": {
                f"{a}|{b}": {f"{oa}|{ob}": v for (oa, ob), v in terms.items()}
                for (a, b), terms in self.interactions.items()
            },
            "option_root": self.option_root,
            "effect_max": self.effect_max,
            "optimum_assignments": self.optimum_assignments,
            "optimum_quality": self.optimum_quality,
        }

    def serialize(self) -> str:
        return json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))


@dataclass
class ProbeReport:
    """Pre-filter probe results: per-step importance and complexity."""

    importance: dict[str, float] = field(default_factory=dict)
    complexity: dict[str, float] = field(default_factory=dict)
    selected_importance: list[str] = field(default_factory=list)
    selected_complexity: list[str] = field(default_factory=list)
    probe_evals: int = 0


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _surface_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_SURFACE]))


def _noise_for(seed: int, key: str, sd: float) -> float:
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    token = int.from_bytes(digest, "big")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_NOISE, token]))
    return float(rng.normal(0.0, sd))


def generate_surface(
    seed: int,
    n_steps: int,
    cogs_per_step: int,
    options_per_cog: int,
    interaction_density: float,
    noise_sd: float = 0.0,
) -> tuple[WorkflowGraph, CogCatalog, LatentSurface]:
    """Deterministically build a workflow graph, its cog catalog, and a surface.

    Cogs cycle through step/weight/architecture categories. Architecture
    cogs avoid the entry node and never share a target; when no free target
    remains they degrade to weight cogs so every requested cog exists.
    The quality argmax is located by an exhaustive (vectorized) scan and
    recorded whenever the space has at most 2**20 configurations.
    """
    if n_steps < 1 or cogs_per_step < 1 or options_per_cog < 1:
        raise ValueError("all generation counts must be >= 1")
    if not 0.0 <= interaction_density <= 1.0:
        raise ValueError("interaction_density must lie in [0, 1]")
    total_cogs = n_steps * cogs_per_step
    size = options_per_cog**total_cogs
    if size > MAX_GENERATED_SPACE:
        raise ValueError(f"requested space has {size} configurations (limit {MAX_GENERATED_SPACE})")

    rng = _surface_rng(seed)

    nodes = [
        StepNode(
            id=f"s{i}",
            kind=NODE_KINDS[i % len(NODE_KINDS)],
            base_cost=float(rng.uniform(0.5, 2.0)),
            base_latency=float(rng.uniform(0.5, 2.0)),
            iteration_bound=int(rng.choice([1, 1, 1, 2])),
            origin=f"s{i}",
        )
        for i in range(n_steps)
    ]
    edges = [(f"s{i}", f"s{i+1}") for i in range(n_steps - 1)]
    for i in range(n_steps):
        for j in range(i + 2, n_steps):
            if rng.random() < 0.25:
                edges.append((f"s{i}", f"s{j}"))
    graph = WorkflowGraph(nodes=nodes, edges=edges, entry="s0", exit=f"s{n_steps - 1}")
    graph.validate()

    effect_scale = 1.2 / math.sqrt(total_cogs)
    category_cycle = (Category.STEP, Category.WEIGHT, Category.ARCHITECTURE)
    arch_targets: set[str] = set()
    cogs: list[Cog] = []
    effects: dict[str, dict[str, float]] = {}
    cost_delta: dict[str, dict[str, float]] = {}
    latency_delta: dict[str, dict[str, float]] = {}
    option_root: dict[str, dict[str, str]] = {}

    for t in range(total_cogs):
        target = f"s{t // cogs_per_step}"
        category = category_cycle[t % 3]
        if category is Category.ARCHITECTURE:
            candidates = [n.id for n in nodes if n.id != graph.entry and n.id not in arch_targets]
            if candidates:
                preferred = [target] if target in candidates else []
                target = (preferred + candidates)[0]
                arch_targets.add(target)
            else:
                category = Category.WEIGHT
        cid = f"{category.value}-{t}"
        base_cost = graph.node(target).base_cost
        base_latency = graph.node(target).base_latency
        options: list[OptionRef] = []
        eff: dict[str, float] = {}
        cdelta: dict[str, float] = {}
        ldelta: dict[str, float] = {}
        for i in range(options_per_cog):
            oid = f"o{i}"
            if category is Category.ARCHITECTURE:
                if i == 0:
                    payload: Any = {"kind": "none"}
                    eff[oid] = 0.0
                elif i == 1:
                    payload = {"kind": "decompose"}
                    eff[oid] = float(
                        rng.normal(0.0, 0.7 * effect_scale) + rng.normal(0.0, 0.7 * effect_scale)
                    )
                else:
                    k = i  # option 2 -> 2 samplers, option 3 -> 3, ...
                    payload = {"kind": "ensemble", "k": k}
                    samplers = rng.normal(0.0, effect_scale, size=k)
                    eff[oid] = float(np.max(samplers)) - AGGREGATION_PENALTY
                cdelta[oid] = 0.0
                ldelta[oid] = 0.0
            else:
                payload = {"label": f"{cid}-variant{i}"}
                if i == 0:
                    eff[oid] = 0.0
                    cdelta[oid] = 0.0
                    ldelta[oid] = 0.0
                else:
                    eff[oid] = float(rng.normal(0.0, effect_scale))
                    lo, hi = (-0.5, 1.0) if category is Category.STEP else (-0.1, 0.4)
                    cdelta[oid] = float(rng.uniform(lo, hi)) * base_cost
                    ldelta[oid] = float(rng.uniform(lo, hi)) * base_latency
            options.append(OptionRef(id=oid, payload=payload))
        cogs.append(
            Cog(
                id=cid,
                category=category,
                target=target,
                options=options,
                dynamic=category is Category.WEIGHT,
            )
        )
        effects[cid] = eff
        cost_delta[cid] = cdelta
        latency_delta[cid] = ldelta
        option_root[cid] = {oid: oid for oid in eff}

    catalog = CogCatalog(cogs, version=0)

    pairs = list(itertools.combinations([c.id for c in cogs], 2))
    n_pairs = math.floor(interaction_density * len(pairs))
    interactions: dict[tuple[str, str], dict[tuple[str, str], float]] = {}
    if n_pairs > 0:
        chosen = rng.choice(len(pairs), size=n_pairs, replace=False)
        interaction_scale = 0.8 * effect_scale
        for pair_idx in sorted(int(i) for i in chosen):
            a, b = pairs[pair_idx]
            terms: dict[tuple[str, str], float] = {}
            for oa in effects[a]:
                for ob in effects[b]:
                    terms[(oa, ob)] = float(rng.normal(0.0, interaction_scale))
            interactions[(a, b)] = terms

    surface = LatentSurface(
        seed=seed,
        effects=effects,
        cost_delta=cost_delta,
        latency_delta=latency_delta,
        interactions=interactions,
        option_root=option_root,
        effect_max={cid: max(eff.values()) for cid, eff in effects.items()},
        effect_scale=effect_scale,
        noise_sd=noise_sd,
        catalog=catalog,
        params={
            "n_steps": n_steps,
            "cogs_per_step": cogs_per_step,
            "options_per_cog": options_per_cog,
            "interaction_density": interaction_density,
        },
    )
    if size <= MAX_SCANNED_SPACE:
        best_assign, best_logit = _scan_optimum(catalog, surface)
        surface.optimum_assignments = best_assign
        surface.optimum_quality = _logistic(best_logit)
    return graph, catalog, surface


def _scan_optimum(catalog: CogCatalog, surface: LatentSurface) -> tuple[dict[str, str], float]:
    """Vectorized argmax of the quality logit over the whole space."""
    cog_ids = catalog.cog_ids()
    option_lists = [catalog.cog(cid).option_ids() for cid in cog_ids]
    dims = [len(opts) for opts in option_lists]
    axis_of = {cid: i for i, cid in enumerate(cog_ids)}
    total = np.zeros(dims, dtype=float)
    for i, cid in enumerate(cog_ids):
        vec = np.array([surface.effects[cid][oid] for oid in option_lists[i]])
        shape = [1] * len(dims)
        shape[i] = dims[i]
        total = total + vec.reshape(shape)
    for (a, b), terms in surface.interactions.items():
        ia, ib = axis_of[a], axis_of[b]
        mat = np.array(
            [
                [terms[(surface.option_root[a][oa], surface.option_root[b][ob])] for ob in option_lists[ib]]
                for oa in option_lists[ia]
            ]
        )
        shape = [1] * len(dims)
        shape[ia] = dims[ia]
        shape[ib] = dims[ib]
        total = total + mat.reshape(shape)
    flat_best = int(np.argmax(total))
    idx = np.unravel_index(flat_best, dims)
    assignment = {cid: option_lists[i][idx[i]] for i, cid in enumerate(cog_ids)}
    return assignment, float(total[idx])


def quality_logit(surface: LatentSurface, assignments: Mapping[str, str]) -> float:
    total = 0.0
    for cid, oid in assignments.items():
        total += surface.effects[cid][oid]
    for (a, b), terms in surface.interactions.items():
        if a in assignments and b in assignments:
            root_a = surface.option_root[a][assignments[a]]
            root_b = surface.option_root[b][assignments[b]]
            total += terms[(root_a, root_b)]
    return total


def apply_architecture_option(graph: WorkflowGraph, cog: Cog, option: OptionRef) -> WorkflowGraph:
    """Pure graph rewrite for one architecture option; identity returns the input."""
    payload = option.payload if isinstance(option.payload, Mapping) else {"kind": "none"}
    kind = payload.get("kind", "none")
    if kind == "none":
        return graph
    target = cog.target
    if not graph.has_node(target):
        raise ValueError(f"architecture option targets unknown node {target!r}")
    original = graph.node(target)
    origin = original.origin or original.id
    keep_nodes = [n for n in graph.nodes if n.id != target]
    in_edges = [src for src, dst in graph.edges if dst == target]
    out_edges = [dst for src, dst in graph.edges if src == target]
    other_edges = [(s, d) for s, d in graph.edges if s != target and d != target]

    if kind == "decompose":
        sub0 = replace(
            original,
            id=f"{target}.d0",
            base_cost=original.base_cost * DECOMP_COST_FACTOR,
            base_latency=original.base_latency * DECOMP_LATENCY_FACTOR,
            origin=origin,
        )
        sub1 = replace(sub0, id=f"{target}.d1")
        new_nodes = keep_nodes + [sub0, sub1]
        new_edges = (
            other_edges
            + [(src, sub0.id) for src in in_edges]
            + [(sub0.id, sub1.id)]
            + [(sub1.id, dst) for dst in out_edges]
        )
        entry = sub0.id if graph.entry == target else graph.entry
        exit_ = sub1.id if graph.exit == target else graph.exit
        return WorkflowGraph(new_nodes, new_edges, entry, exit_)

    if kind == "ensemble":
        if graph.entry == target:
            raise ValueError("cannot ensemble the entry node")
        k = int(payload.get("k", 2))
        if k < 2:
            raise ValueError("ensemble needs k >= 2")
        samplers = [replace(original, id=f"{target}.e{i}", origin=origin) for i in range(k)]
        aggregator = StepNode(
            id=f"{target}.agg",
            kind="model_call",
            base_cost=original.base_cost * AGG_COST_FACTOR,
            base_latency=original.base_latency * AGG_LATENCY_FACTOR,
            iteration_bound=1,
            origin=None,
        )
        new_nodes = keep_nodes + samplers + [aggregator]
        new_edges = list(other_edges)
        for src in in_edges:
            new_edges.extend((src, s.id) for s in samplers)
        new_edges.extend((s.id, aggregator.id) for s in samplers)
        new_edges.extend((aggregator.id, dst) for dst in out_edges)
        exit_ = aggregator.id if graph.exit == target else graph.exit
        return WorkflowGraph(new_nodes, new_edges, graph.entry, exit_)

    raise ValueError(f"unknown architecture option kind {kind!r}")


def rewritten_graph(graph: WorkflowGraph, catalog: CogCatalog, assignments: Mapping[str, str]) -> WorkflowGraph:
    """Apply every chosen architecture option, in catalog cog order."""
    out = graph
    for cog in catalog.cogs:
        if cog.category is Category.ARCHITECTURE and cog.id in assignments:
            option = next(o for o in cog.options if o.id == assignments[cog.id])
            out = apply_architecture_option(out, cog, option)
    return out


def _critical_path_latency(graph: WorkflowGraph, node_weight: Mapping[str, float]) -> float:
    """Longest weighted path; cyclic groups collapse to serialized super-nodes."""
    digraph = nx.DiGraph(graph.edges)
    digraph.add_nodes_from(graph.node_ids())
    condensed = nx.condensation(digraph)
    weights = {
        scc: sum(node_weight[n] for n in condensed.nodes[scc]["members"]) for scc in condensed.nodes
    }
    finish: dict[int, float] = {}
    for scc in nx.topological_sort(condensed):
        preds = list(condensed.predecessors(scc))
        finish[scc] = weights[scc] + (max(finish[p] for p in preds) if preds else 0.0)
    return max(finish.values()) if finish else 0.0


def _node_weights(
    graph: WorkflowGraph,
    catalog: CogCatalog,
    surface: LatentSurface,
    assignments: Mapping[str, str],
) -> tuple[dict[str, float], dict[str, float]]:
    cost_by_origin: dict[str, float] = {}
    latency_by_origin: dict[str, float] = {}
    global_cost = 0.0
    global_latency = 0.0
    for cog in catalog.cogs:
        if cog.category is Category.ARCHITECTURE or cog.id not in assignments:
            continue
        oid = assignments[cog.id]
        if cog.target == GLOBAL_TARGET:
            global_cost += surface.cost_delta[cog.id][oid]
            global_latency += surface.latency_delta[cog.id][oid]
        else:
            cost_by_origin[cog.target] = cost_by_origin.get(cog.target, 0.0) + surface.cost_delta[cog.id][oid]
            latency_by_origin[cog.target] = (
                latency_by_origin.get(cog.target, 0.0) + surface.latency_delta[cog.id][oid]
            )
    costs: dict[str, float] = {}
    latencies: dict[str, float] = {}
    for node in graph.nodes:
        extra_cost = cost_by_origin.get(node.origin, 0.0) if node.origin else 0.0
        extra_latency = latency_by_origin.get(node.origin, 0.0) if node.origin else 0.0
        costs[node.id] = node.iteration_bound * max(0.0, node.base_cost + extra_cost)
        latencies[node.id] = node.iteration_bound * max(0.0, node.base_latency + extra_latency)
    costs["__global__"] = max(0.0, global_cost)
    latencies["__global__"] = max(0.0, global_latency)
    return costs, latencies


def sim_evaluate(
    graph: WorkflowGraph,
    surface: LatentSurface,
    assignments: Mapping[str, str],
    catalog: CogCatalog | None = None,
    noise: bool = True,
) -> MetricVector:
    """Evaluate one complete configuration. Deterministic when noise is off."""
    catalog = catalog or surface.catalog
    if catalog is None:
        raise ValueError("a catalog is required to evaluate")
    missing = [c.id for c in catalog.cogs if c.id not in assignments]
    if missing:
        raise ContractError(f"configuration incomplete, missing cogs: {missing}")
    logit = quality_logit(surface, assignments)
    if noise and surface.noise_sd > 0:
        logit += _noise_for(surface.seed, canonical_key(assignments), surface.noise_sd)
    executed = rewritten_graph(graph, catalog, assignments)
    costs, latencies = _node_weights(executed, catalog, surface, assignments)
    global_cost = costs.pop("__global__")
    global_latency = latencies.pop("__global__")
    total_cost = sum(costs.values()) + global_cost
    total_latency = _critical_path_latency(executed, latencies) + global_latency
    return MetricVector(quality=_logistic(logit), cost=total_cost, latency=total_latency)


def make_evaluator(
    graph: WorkflowGraph,
    surface: LatentSurface,
    catalog: CogCatalog | None = None,
    noise: bool = True,
) -> Callable[[Mapping[str, str]], MetricVector]:
    """Evaluation closure with a rewrite cache keyed by architecture choices."""
    catalog = catalog or surface.catalog
    if catalog is None:
        raise ValueError("a catalog is required to evaluate")
    arch_ids = [c.id for c in catalog.cogs if c.category is Category.ARCHITECTURE]
    rewrite_cache: dict[tuple[str, ...], WorkflowGraph] = {}

    def evaluate(assignments: Mapping[str, str]) -> MetricVector:
        missing = [c.id for c in catalog.cogs if c.id not in assignments]
        if missing:
            raise ContractError(f"configuration incomplete, missing cogs: {missing}")
        arch_key = tuple(assignments[cid] for cid in arch_ids)
        executed = rewrite_cache.get(arch_key)
        if executed is None:
            executed = rewritten_graph(graph, catalog, assignments)
            rewrite_cache[arch_key] = executed
        logit = quality_logit(surface, assignments)
        if noise and surface.noise_sd > 0:
            logit += _noise_for(surface.seed, canonical_key(assignments), surface.noise_sd)
        costs, latencies = _node_weights(executed, catalog, surface, assignments)
        global_cost = costs.pop("__global__")
        global_latency = latencies.pop("__global__")
        total_cost = sum(costs.values()) + global_cost
        total_latency = _critical_path_latency(executed, latencies) + global_latency
        return MetricVector(quality=_logistic(logit), cost=total_cost, latency=total_latency)

    return evaluate


def seeded_ratings(graph: WorkflowGraph, seed: int) -> dict[str, float]:
    """Stand-in for judge-produced per-step complexity ratings."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_RATINGS]))
    return {node_id: float(rng.uniform(1.0, 5.0)) for node_id in sorted(graph.node_ids())}


def complexity_scores(
    graph: WorkflowGraph,
    ratings: Mapping[str, float],
    threshold: float | None = None,
) -> tuple[dict[str, float], list[str]]:
    """Score nodes as rating x out-degree; select those strictly above threshold.

    The default threshold is the median score.
    """
    missing = [n for n in graph.node_ids() if n not in ratings]
    if missing:
        raise ValueError(f"ratings missing for nodes: {missing}")
    scores = {n: ratings[n] * graph.out_degree(n) for n in graph.node_ids()}
    if threshold is None:
        threshold = statistics.median(scores.values())
    selected = [n for n in graph.node_ids() if scores[n] > threshold]
    return scores, selected


def cheapest_options(surface: LatentSurface, catalog: CogCatalog) -> dict[str, str]:
    """Per cog, the option with the lowest cost delta (ties keep option order)."""
    frozen: dict[str, str] = {}
    for cog in catalog.cogs:
        deltas = surface.cost_delta[cog.id]
        frozen[cog.id] = min(cog.option_ids(), key=lambda oid: (deltas[oid], cog.option_ids().index(oid)))
    return frozen


def step_importance(
    graph: WorkflowGraph,
    surface: LatentSurface,
    catalog: CogCatalog,
    cheapest_option_map: Mapping[str, str],
    top_percent: float,
    spec: EvaluatorSpec | None = None,
) -> ProbeReport:
    """Probe each step-category cog in isolation, others frozen to cheapest.

    A step's importance is the spread between its best and worst workflow
    score over that cog's options. The top ceil(K%) of probed steps are
    selected. Probe evaluations are counted per proposal, cached or not.
    """
    if not 0.0 < top_percent <= 100.0:
        raise ValueError("top_percent must lie in (0, 100]")
    spec = spec or EvaluatorSpec()
    evaluate = make_evaluator(graph, surface, catalog, noise=False)
    importance: dict[str, float] = {}
    probe_evals = 0
    for cog in catalog.cogs:
        if cog.category is not Category.STEP:
            continue
        scores = []
        for option in cog.options:
            assignments = dict(cheapest_option_map)
            assignments[cog.id] = option.id
            scores.append(spec.raw_score(evaluate(assignments)))
            probe_evals += 1
        spread = max(scores) - min(scores)
        importance[cog.target] = max(importance.get(cog.target, 0.0), spread)
    ranked = sorted(importance, key=lambda s: (-importance[s], s))
    n_select = math.ceil(len(ranked) * top_percent / 100.0) if ranked else 0
    return ProbeReport(
        importance=importance,
        selected_importance=ranked[:n_select],
        probe_evals=probe_evals,
    )


def brute_force_oracle(
    graph: WorkflowGraph,
    surface: LatentSurface,
    catalog: CogCatalog,
    spec: EvaluatorSpec | None = None,
) -> tuple[ResultArchive, list[Observation]]:
    """Evaluate every configuration once (noise off); ground truth for tests."""
    size = space_size(catalog, catalog.cog_ids())
    if size > MAX_SCANNED_SPACE:
        raise ValueError(f"space has {size} configurations (oracle limit {MAX_SCANNED_SPACE})")
    spec = spec or EvaluatorSpec(objectives=("quality", "cost"))
    evaluate = make_evaluator(graph, surface, catalog, noise=False)
    archive = ResultArchive(spec)
    cog_ids = catalog.cog_ids()
    option_lists = [catalog.cog(cid).option_ids() for cid in cog_ids]
    for i, combo in enumerate(itertools.product(*option_lists)):
        assignments = dict(zip(cog_ids, combo))
        metrics = evaluate(assignments)
        archive.append(make_observation(assignments, metrics, spec, chunk_id=0, layer_round=0, sort_path=(i,)))
    return archive, pareto_frontier(archive, spec)


def evolve_dynamic_options(
    surface: LatentSurface,
    catalog: CogCatalog,
    archive: ResultArchive,
    cog_id: str,
    k: int,
) -> list[OptionRef]:
    """Derive up to ``k`` new options for a dynamic cog from top archive results.

    Each new option perturbs the effect its source configuration realized
    for this cog, capped strictly below the cog's best initial effect, and
    inherits the source option's cost/latency deltas and interaction
    behavior. Option ids encode the source evaluation, so re-invoking on
    the same archive appends nothing.
    """
    cog = catalog.cog(cog_id)
    if not cog.dynamic:
        raise ContractError(f"cog {cog_id!r} is not dynamic")
    if k < 1:
        return []
    from .objectives import scalar_score  # local import keeps module load light

    feasible = [o for o in archive.observations if o.feasible]
    feasible.sort(key=lambda o: (-scalar_score(o.metrics, archive.spec), o.eval_index))
    new_refs: list[OptionRef] = []
    cog_token = zlib.crc32(cog_id.encode("utf-8"))
    for source in feasible[:k]:
        new_id = f"ev{source.eval_index}"
        if cog.has_option(new_id):
            continue
        src_option = source.assignments[cog_id]
        src_effect = surface.effects[cog_id][src_option]
        rng = np.random.default_rng(
            np.random.SeedSequence([surface.seed, _STREAM_EVOLVE, cog_token, source.eval_index])
        )
        perturbed = src_effect + float(rng.normal(0.0, 0.3 * surface.effect_scale))
        capped = min(perturbed, surface.effect_max[cog_id] - 1e-9)
        surface.effects[cog_id][new_id] = capped
        surface.cost_delta[cog_id][new_id] = surface.cost_delta[cog_id][src_option]
        surface.latency_delta[cog_id][new_id] = surface.latency_delta[cog_id][src_option]
        surface.option_root[cog_id][new_id] = surface.option_root[cog_id][src_option]
        new_refs.append(
            OptionRef(
                id=new_id,
                payload={"derived_from": src_option, "source_eval": source.eval_index},
                provenance="evolved",
            )
        )
    if new_refs:
        extend_options(catalog, cog_id, new_refs)
    return new_refs
