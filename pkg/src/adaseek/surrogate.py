"""Tree-structured Parzen surrogate over discrete cog spaces.

Feedback entries are split into a good group (top gamma quantile of
feasible scores) and a bad group (everything else, plus every entry that
violated a feasibility threshold). Each group gets one Laplace-smoothed
categorical mass function per cog. New candidates are drawn from the good
density and the one maximizing the good/bad likelihood ratio wins, which
is the standard density-ratio route to maximizing expected improvement.

Models are immutable once fitted; sampling takes an explicit RNG so runs
are replayable and parallel schedules stay deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .cogspace import CogCatalog

DEFAULT_GAMMA = 0.25
DEFAULT_SMOOTHING = 1.0
DEFAULT_N_CANDIDATES = 24


@dataclass(frozen=True)
class FeedbackEntry:
    """One scored partial configuration over a layer's scope.

    ``order`` is a deterministic recency key: flushed observations use
    ``(0, eval_index)`` and in-flight evaluations use their structural
    position, so ties resolve identically on every schedule.
    """

    assignment: Mapping[str, str]
    score: float
    feasible: bool
    order: tuple[int, ...] = (0, 0)


@dataclass
class FeedbackSet:
    scope: tuple[str, ...]
    entries: list[FeedbackEntry] = field(default_factory=list)

    def add(self, entry: FeedbackEntry) -> None:
        self.entries.append(entry)


class SplitResult(NamedTuple):
    l_entries: list[FeedbackEntry]
    g_entries: list[FeedbackEntry]
    gamma: float
    split_score: float


@dataclass(frozen=True)
class DensityModel:
    """Fitted per-cog mass functions for the good (l) and bad (g) groups."""

    scope: tuple[str, ...]
    l_mass: dict[str, dict[str, float]]
    g_mass: dict[str, dict[str, float]]
    gamma: float
    split_score: float
    degenerate: bool = False  # no feasible entry existed when fitting


def split_observations(
    entries: Sequence[FeedbackEntry], gamma: float = DEFAULT_GAMMA
) -> SplitResult:
    """Partition entries into the good and bad groups.

    Feasible entries are sorted by score descending and the top
    ``max(1, ceil(gamma * n_feasible))`` form the good group; every
    infeasible entry lands in the bad group regardless of score. With no
    feasible entries at all, the single best-scoring entry stands in as
    the good group (degenerate case; callers may fall back to uniform).
    """
    if not entries:
        raise ValueError("split requires at least one entry")
    feasible = sorted(
        (e for e in entries if e.feasible), key=lambda e: (-e.score, e.order)
    )
    infeasible = [e for e in entries if not e.feasible]
    if feasible:
        n_l = max(1, math.ceil(gamma * len(feasible)))
        l_entries = feasible[:n_l]
        g_entries = feasible[n_l:] + infeasible
    else:
        ordered = sorted(entries, key=lambda e: (-e.score, e.order))
        l_entries = ordered[:1]
        g_entries = ordered[1:]
    split_score = min(e.score for e in l_entries)
    return SplitResult(l_entries, g_entries, gamma, split_score)


def fit_density(
    entries: Sequence[FeedbackEntry],
    scope: Sequence[str],
    catalog: CogCatalog,
    smoothing: float = DEFAULT_SMOOTHING,
) -> dict[str, dict[str, float]]:
    """One smoothed categorical mass function per cog in scope.

    mass(option) = (count + smoothing) / (n + m * smoothing), so every
    option (including never-observed and freshly appended ones) keeps
    strictly positive mass and the good/bad ratio stays finite.
    """
    if not scope:
        raise ValueError("scope must be non-empty")
    masses: dict[str, dict[str, float]] = {}
    n = len(entries)
    for cid in scope:
        option_ids = catalog.cog(cid).option_ids()
        m = len(option_ids)
        counts = {oid: 0 for oid in option_ids}
        for entry in entries:
            counts[entry.assignment[cid]] += 1
        denom = n + m * smoothing
        masses[cid] = {oid: (counts[oid] + smoothing) / denom for oid in option_ids}
    return masses


def fit_model(
    feedback: FeedbackSet,
    catalog: CogCatalog,
    gamma: float = DEFAULT_GAMMA,
    smoothing: float = DEFAULT_SMOOTHING,
) -> DensityModel:
    """Split the feedback and fit both densities. Empty feedback fits uniform."""
    scope = feedback.scope
    if not feedback.entries:
        uniform = fit_density([], scope, catalog, smoothing)
        return DensityModel(scope, uniform, dict(uniform), gamma, float("-inf"))
    l_entries, g_entries, gamma, split_score = split_observations(feedback.entries, gamma)
    degenerate = not any(e.feasible for e in feedback.entries)
    return DensityModel(
        scope=scope,
        l_mass=fit_density(l_entries, scope, catalog, smoothing),
        g_mass=fit_density(g_entries, scope, catalog, smoothing),
        gamma=gamma,
        split_score=split_score,
        degenerate=degenerate,
    )


def sample_candidates(
    model: DensityModel, catalog: CogCatalog, rng: np.random.Generator, n_cand: int
) -> list[dict[str, str]]:
    """Draw candidate assignments from the good density, one cog at a time.

    The draw order (scope order, then candidate index) is part of the
    sampling contract: tests replay it to cross-check the argmax.
    """
    per_cog: list[tuple[str, list[str], np.ndarray]] = []
    for cid in model.scope:
        option_ids = catalog.cog(cid).option_ids()
        probs = np.array([model.l_mass[cid][oid] for oid in option_ids], dtype=float)
        probs /= probs.sum()
        per_cog.append((cid, option_ids, probs))
    candidates: list[dict[str, str]] = []
    for _ in range(n_cand):
        assignment: dict[str, str] = {}
        for cid, option_ids, probs in per_cog:
            idx = int(rng.choice(len(option_ids), p=probs))
            assignment[cid] = option_ids[idx]
        candidates.append(assignment)
    return candidates


def ratio_score(model: DensityModel, assignment: Mapping[str, str]) -> float:
    """Product over cogs of good-mass / bad-mass for the assigned options."""
    score = 1.0
    for cid in model.scope:
        oid = assignment[cid]
        score *= model.l_mass[cid][oid] / model.g_mass[cid][oid]
    return score


def select_candidate(
    model: DensityModel,
    candidates: Sequence[Mapping[str, str]],
    exclude: Callable[[Mapping[str, str]], bool] | None = None,
) -> dict[str, str]:
    """Argmax of the density ratio over the candidate list, first-drawn wins ties.

    With ``exclude``, excluded candidates are skipped unless every candidate
    is excluded, in which case the unfiltered argmax is returned (the caller
    still pays budget for the duplicate; the evaluation cache serves it).
    """
    best: dict[str, str] | None = None
    best_score = -math.inf
    for cand in candidates:
        if exclude is not None and exclude(cand):
            continue
        score = ratio_score(model, cand)
        if score > best_score:
            best = dict(cand)
            best_score = score
    if best is not None:
        return best
    for cand in candidates:
        score = ratio_score(model, cand)
        if score > best_score:
            best = dict(cand)
            best_score = score
    assert best is not None
    return best


def tpe_sample(
    feedback: FeedbackSet,
    catalog: CogCatalog,
    n: int,
    rng: np.random.Generator,
    n_cand: int = DEFAULT_N_CANDIDATES,
    gamma: float = DEFAULT_GAMMA,
    smoothing: float = DEFAULT_SMOOTHING,
    exclude: Callable[[Mapping[str, str]], bool] | None = None,
) -> list[dict[str, str]]:
    """Propose ``n`` assignments over the feedback's scope.

    Each proposal draws ``n_cand`` candidates from the good density and
    keeps the density-ratio argmax. With empty feedback both densities are
    uniform, so proposals reduce to uniform draws. Proposals are refit
    against the same feedback (the caller appends new evidence between
    calls), and need not be distinct unless ``exclude`` is supplied.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    model = fit_model(feedback, catalog, gamma=gamma, smoothing=smoothing)
    out: list[dict[str, str]] = []
    for _ in range(n):
        candidates = sample_candidates(model, catalog, rng, n_cand)
        out.append(select_candidate(model, candidates, exclude))
    return out
