"""Discrete tuning dimensions ("cogs"), configurations, and layer grouping.

A cog names one tunable dimension of a workflow: an architecture rewrite,
a step implementation swap, or a prompt-style weight change. A catalog is
the full set of cogs in scope; a configuration assigns one option per cog.
Layer grouping splits a catalog into one to three nested search layers,
weight cogs innermost and architecture cogs outermost.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping


class SchemaError(ValueError):
    """A space description document is malformed."""


class ContractError(RuntimeError):
    """An operation was invoked outside its contract."""


class Category(str, Enum):
    ARCHITECTURE = "architecture"
    STEP = "step"
    WEIGHT = "weight"


#: Target value for cogs that apply to the whole workflow rather than one step.
GLOBAL_TARGET = "*"

_SPACE_DOC_VERSION = 1
_COG_FIELDS = {"id", "category", "target", "dynamic", "options"}
_OPTION_FIELDS = {"id", "payload"}


@dataclass(frozen=True)
class OptionRef:
    """One selectable value of a cog. The payload is opaque to the optimizer."""

    id: str
    payload: Any = None
    provenance: str = "static"  # "static" | "evolved"


@dataclass
class Cog:
    id: str
    category: Category
    target: str
    options: list[OptionRef]
    dynamic: bool = False

    def option_ids(self) -> list[str]:
        return [o.id for o in self.options]

    def has_option(self, option_id: str) -> bool:
        return any(o.id == option_id for o in self.options)


@dataclass
class CogCatalog:
    """The whole tunable space. ``version`` bumps whenever any option list grows."""

    cogs: list[Cog]
    version: int = 0
    _by_id: dict[str, Cog] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._reindex()

    def _reindex(self) -> None:
        self._by_id = {c.id: c for c in self.cogs}
        if len(self._by_id) != len(self.cogs):
            raise SchemaError("duplicate cog ids in catalog")

    def cog(self, cog_id: str) -> Cog:
        try:
            return self._by_id[cog_id]
        except KeyError:
            raise ValueError(f"unknown cog id: {cog_id!r}") from None

    def cog_ids(self) -> list[str]:
        return [c.id for c in self.cogs]

    def by_category(self, category: Category) -> list[Cog]:
        return [c for c in self.cogs if c.category is category]

    def subset(self, cog_ids: Iterable[str]) -> "CogCatalog":
        """A filtered view sharing the same Cog objects (used for frozen-cog runs)."""
        keep = set(cog_ids)
        for cid in keep:
            self.cog(cid)
        return CogCatalog([c for c in self.cogs if c.id in keep], version=self.version)


@dataclass(frozen=True)
class Configuration:
    """A (possibly partial) assignment of one option id per cog id."""

    assignments: Mapping[str, str]
    catalog_version: int = 0

    def restricted(self, scope: Iterable[str]) -> dict[str, str]:
        return {cid: self.assignments[cid] for cid in scope}

    def validate(self, catalog: CogCatalog, scope: Iterable[str] | None = None) -> None:
        """Check every referenced cog/option exists; with ``scope``, check coverage."""
        for cid, oid in self.assignments.items():
            cog = catalog.cog(cid)
            if not cog.has_option(oid):
                raise ValueError(f"cog {cid!r} has no option {oid!r}")
        if scope is not None:
            want = set(scope)
            have = set(self.assignments)
            if want != have:
                missing = sorted(want - have)
                extra = sorted(have - want)
                raise ValueError(f"assignment scope mismatch: missing={missing} extra={extra}")


@dataclass
class LayerPlan:
    """Layer grouping for one round: layers ordered innermost first."""

    round_l: int
    layers: list[tuple[str, ...]]
    sizes: list[float] = field(default_factory=list)
    budgets: list[int] = field(default_factory=list)


def build_catalog(document: Mapping[str, Any]) -> CogCatalog:
    """Build a catalog (version 0) from a space description document.

    The document is the parsed form of ``space.json``; unknown fields are
    rejected so stale files fail loudly rather than silently dropping cogs.
    """
    if not isinstance(document, Mapping):
        raise SchemaError("space description must be a mapping")
    unknown = set(document) - {"version", "cogs"}
    if unknown:
        raise SchemaError(f"unknown top-level fields: {sorted(unknown)}")
    if document.get("version") != _SPACE_DOC_VERSION:
        raise SchemaError(f"unsupported space description version: {document.get('version')!r}")
    raw_cogs = document.get("cogs")
    if not isinstance(raw_cogs, list) or not raw_cogs:
        raise SchemaError("space description must list at least one cog")

    cogs: list[Cog] = []
    seen: set[str] = set()
    for raw in raw_cogs:
        if not isinstance(raw, Mapping):
            raise SchemaError("each cog entry must be a mapping")
        unknown = set(raw) - _COG_FIELDS
        if unknown:
            raise SchemaError(f"unknown cog fields: {sorted(unknown)}")
        cid = raw.get("id")
        if not isinstance(cid, str) or not cid:
            raise SchemaError("cog id must be a non-empty string")
        if cid in seen:
            raise SchemaError(f"duplicate cog id: {cid!r}")
        seen.add(cid)
        try:
            category = Category(raw.get("category"))
        except ValueError:
            raise SchemaError(f"unknown category {raw.get('category')!r} for cog {cid!r}") from None
        raw_options = raw.get("options")
        if not isinstance(raw_options, list) or not raw_options:
            raise SchemaError(f"cog {cid!r} must list at least one option")
        options: list[OptionRef] = []
        opt_seen: set[str] = set()
        for raw_opt in raw_options:
            if not isinstance(raw_opt, Mapping):
                raise SchemaError(f"cog {cid!r}: each option must be a mapping")
            unknown = set(raw_opt) - _OPTION_FIELDS
            if unknown:
                raise SchemaError(f"cog {cid!r}: unknown option fields: {sorted(unknown)}")
            oid = raw_opt.get("id")
            if not isinstance(oid, str) or not oid:
                raise SchemaError(f"cog {cid!r}: option id must be a non-empty string")
            if oid in opt_seen:
                raise SchemaError(f"cog {cid!r}: duplicate option id {oid!r}")
            opt_seen.add(oid)
            options.append(OptionRef(id=oid, payload=raw_opt.get("payload")))
        cogs.append(
            Cog(
                id=cid,
                category=category,
                target=str(raw.get("target", GLOBAL_TARGET)),
                options=options,
                dynamic=bool(raw.get("dynamic", False)),
            )
        )
    return CogCatalog(cogs, version=0)


def catalog_to_document(catalog: CogCatalog) -> dict[str, Any]:
    """Inverse of :func:`build_catalog` for static options (space.json content)."""
    return {
        "version": _SPACE_DOC_VERSION,
        "cogs": [
            {
                "id": c.id,
                "category": c.category.value,
                "target": c.target,
                "dynamic": c.dynamic,
                "options": [{"id": o.id, "payload": o.payload} for o in c.options],
            }
            for c in catalog.cogs
        ],
    }


def group_layers(catalog: CogCatalog, num_layers: int) -> LayerPlan:
    """Partition the catalog's cogs into ``num_layers`` nested layers.

    One layer holds everything; two layers split architecture cogs out;
    three layers separate weight (innermost), step, and architecture cogs.
    Empty layers are legal and are skipped over by the search.
    """
    if num_layers not in (1, 2, 3):
        raise ValueError(f"layer count must be 1, 2 or 3, got {num_layers}")
    arch = tuple(c.id for c in catalog.cogs if c.category is Category.ARCHITECTURE)
    step = tuple(c.id for c in catalog.cogs if c.category is Category.STEP)
    weight = tuple(c.id for c in catalog.cogs if c.category is Category.WEIGHT)
    if num_layers == 1:
        layers = [tuple(catalog.cog_ids())]
    elif num_layers == 2:
        inner = tuple(c.id for c in catalog.cogs if c.category is not Category.ARCHITECTURE)
        layers = [inner, arch]
    else:
        layers = [weight, step, arch]
    return LayerPlan(round_l=num_layers, layers=layers)


def space_size(catalog: CogCatalog, cog_subset: Iterable[str]) -> int:
    """Product of option counts over the subset; 1 for the empty subset."""
    size = 1
    for cid in cog_subset:
        size *= len(catalog.cog(cid).options)
    return size


def canonical_key(assignments: Mapping[str, str]) -> str:
    """Deterministic, insertion-order-independent key for an assignment map."""
    return json.dumps(dict(sorted(assignments.items())), separators=(",", ":"))


def configuration_key(config: Configuration) -> str:
    """Key for a configuration; equal assignments give equal keys at any catalog version."""
    return canonical_key(config.assignments)


def extend_options(catalog: CogCatalog, cog_id: str, new_options: list[OptionRef]) -> CogCatalog:
    """Append options to a dynamic cog in place, bumping the catalog version.

    Appending an empty list is a no-op and leaves the version untouched.
    Previously issued configurations stay valid: options are never removed.
    """
    cog = catalog.cog(cog_id)
    if not cog.dynamic:
        raise ContractError(f"cog {cog_id!r} is not dynamic")
    if not new_options:
        return catalog
    existing = set(cog.option_ids())
    fresh: set[str] = set()
    for opt in new_options:
        if opt.id in existing or opt.id in fresh:
            raise ValueError(f"cog {cog_id!r} already has option {opt.id!r}")
        fresh.add(opt.id)
    cog.options.extend(new_options)
    catalog.version += 1
    return catalog
