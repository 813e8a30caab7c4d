"""Command-line harness: optimize, baselines, reports, surface generation.

The CLI owns all file I/O. Configuration comes from an optional flat JSON
config file overridden by flags; the ADASEEK_SEED environment variable
overrides the seed from either source. Archives written by every
subcommand share one schema, so reports never care who produced them.

Exit codes: 0 success, 2 bad configuration or missing input, 3 locked run
directory, 4 evaluator setup failure, 5 grid on an oversized space,
6 corrupt archive line.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .cogspace import CogCatalog, SchemaError, build_catalog, catalog_to_document
from .driver import (
    ARCHIVE_NAME,
    FRONTIER_NAME,
    MANIFEST_NAME,
    GridTooLargeError,
    RunLockedError,
    adaseek_run,
    resume_run,
    run_flat_tpe,
    run_grid,
    run_random,
    spec_from_doc,
)
from .objectives import (
    DIRECTIONS,
    ArchiveFormatError,
    EvaluatorSpec,
    Observation,
    ResultArchive,
    load_archive,
    pareto_frontier,
    scalar_score,
    select_best,
    write_frontier_csv,
)
from .search import Knobs
from .simflow import SimBundleError, load_surface_file, make_evaluator

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_LOCKED = 3
EXIT_EVALUATOR = 4
EXIT_GRID_TOO_LARGE = 5
EXIT_CORRUPT_ARCHIVE = 6

SURFACE_DOC_VERSION = 1


def _err(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


@dataclass
class RunConfig:
    space: str | None = None
    surface: str | None = None
    out: str | None = None
    budget: int = 64
    seed: int = 0
    objectives: tuple[str, ...] = ("quality",)
    thresholds: dict[str, float] = field(default_factory=dict)
    resume: bool = False
    trace: bool = False
    baseline: str = "random"
    knobs: Knobs = field(default_factory=Knobs)


_KNOB_FLAGS = {
    "alpha": float,
    "eta": int,
    "chunk_size": int,
    "gamma": float,
    "smoothing": float,
    "n_candidates": int,
    "early_stop_window": int,
    "early_stop_epsilon": float,
    "parallel": int,
    "select_k": int,
    "evolve_every": int,
    "evolve_k": int,
    "importance_percent": float,
}


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON config file; flags win over it")
    parser.add_argument("--space", help="space description file (space.json)")
    parser.add_argument("--surface", help="surface spec file (surface.json)")
    parser.add_argument("--out", help="run directory to create/use")
    parser.add_argument("--budget", type=int, help="total evaluation budget")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--objectives", help="comma list from quality,cost,latency")
    parser.add_argument(
        "--threshold",
        action="append",
        default=None,
        metavar="METRIC=BOUND",
        help="feasibility bound (quality>=v, cost<=v, latency<=v); repeatable",
    )
    parser.add_argument("--force-layers", choices=["auto", "1", "2", "3"], default=None)
    parser.add_argument("--paper-exact-sqrt", action="store_true", default=None)
    parser.add_argument("--no-early-stop", action="store_true", default=None)
    parser.add_argument("--no-dedup", action="store_true", default=None)
    parser.add_argument("--importance-filter", action="store_true", default=None)
    parser.add_argument("--complexity-filter", action="store_true", default=None)
    parser.add_argument("--surrogate-trace", action="store_true", default=None)
    parser.add_argument("--trace", action="store_true", default=None)
    for name, kind in _KNOB_FLAGS.items():
        parser.add_argument(f"--{name.replace('_', '-')}", type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaseek", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_opt = sub.add_parser("optimize", help="run the adaptive hierarchical search")
    _add_run_flags(p_opt)
    p_opt.add_argument("--resume", action="store_true", default=None)

    p_base = sub.add_parser("baseline", help="run a baseline search")
    p_base.add_argument("--kind", choices=["random", "grid", "flat_tpe"], required=True)
    _add_run_flags(p_base)

    p_rep = sub.add_parser("report", help="summarize one or more archives")
    p_rep.add_argument("archives", nargs="+", help="archive.jsonl paths")
    p_rep.add_argument("--out", default="report")
    p_rep.add_argument("--objectives", default=None)

    p_gen = sub.add_parser("gen-surface", help="generate a seeded synthetic workflow")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--steps", type=int, default=3)
    p_gen.add_argument("--cogs-per-step", type=int, default=2)
    p_gen.add_argument("--options", type=int, default=4)
    p_gen.add_argument("--density", type=float, default=0.3)
    p_gen.add_argument("--noise-sd", type=float, default=0.0)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--dump", action="store_true", help="also write surface_dump.json")
    return parser


def _parse_thresholds(raw: Iterable[str]) -> dict[str, float]:
    thresholds: dict[str, float] = {}
    for item in raw:
        if "=" not in item:
            raise ValueError(f"bad threshold {item!r}, expected METRIC=BOUND")
        name, value = item.split("=", 1)
        thresholds[name.strip()] = float(value)
    return thresholds


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig()
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        for key in ("space", "surface", "out", "budget", "seed", "resume", "trace", "baseline"):
            if key in doc:
                setattr(config, key, doc[key])
        if "objectives" in doc:
            config.objectives = tuple(doc["objectives"])
        if "thresholds" in doc:
            config.thresholds = {k: float(v) for k, v in doc["thresholds"].items()}
        if "knobs" in doc:
            config.knobs = Knobs.from_dict(doc["knobs"])
    for key in ("space", "surface", "out"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(config, key, value)
    if getattr(args, "budget", None) is not None:
        config.budget = args.budget
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "objectives", None):
        config.objectives = tuple(s.strip() for s in args.objectives.split(",") if s.strip())
    if getattr(args, "threshold", None):
        config.thresholds.update(_parse_thresholds(args.threshold))
    if getattr(args, "resume", None):
        config.resume = True
    if getattr(args, "trace", None):
        config.trace = True
    if getattr(args, "kind", None):
        config.baseline = args.kind
    for name in _KNOB_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            setattr(config.knobs, name, value)
    if getattr(args, "no_early_stop", None):
        config.knobs.early_stop = False
    if getattr(args, "no_dedup", None):
        config.knobs.dedup = False
    if getattr(args, "paper_exact_sqrt", None):
        config.knobs.paper_exact_sqrt = True
    if getattr(args, "importance_filter", None):
        config.knobs.importance_filter = True
    if getattr(args, "complexity_filter", None):
        config.knobs.complexity_filter = True
    if getattr(args, "surrogate_trace", None):
        config.knobs.surrogate_trace = True
    forced = getattr(args, "force_layers", None)
    if forced is not None:
        config.knobs.forced_layers = None if forced == "auto" else int(forced)
    env_seed = os.environ.get("ADASEEK_SEED")
    if env_seed is not None:
        config.seed = int(env_seed)
    return config


def _setup_simulation(config: RunConfig):
    """Build (catalog, evaluate, sim bundle) from the space and surface files."""
    from .driver import SimBundle

    if not config.space or not Path(config.space).is_file():
        raise FileNotFoundError(f"space file not found: {config.space}")
    if not config.surface or not Path(config.surface).is_file():
        raise FileNotFoundError(f"surface file not found: {config.surface}")
    space_doc = json.loads(Path(config.space).read_text(encoding="utf-8"))
    catalog = build_catalog(space_doc)
    graph, gen_catalog, surface = load_surface_file(config.surface)
    if catalog_to_document(gen_catalog) != catalog_to_document(catalog):
        raise SimBundleError("space.json does not match the catalog generated by surface.json")
    evaluate = make_evaluator(graph, surface, catalog)
    return catalog, evaluate, SimBundle(graph=graph, surface=surface, catalog=catalog)


def _summary_lines(
    archive: ResultArchive, spec: EvaluatorSpec, selected: Sequence[Observation]
) -> list[str]:
    lines = [
        f"evaluations: {len(archive)}",
        f"objectives: {', '.join(spec.objectives)}",
        f"frontier size: {len(pareto_frontier(archive, spec))}",
        "selected configurations:",
    ]
    for obs in selected:
        m = obs.metrics
        lines.append(
            f"  #{obs.eval_index}: quality={m.quality:.4f} cost={m.cost:.4f} "
            f"latency={m.latency:.4f} score={scalar_score(m, spec):.4f} {obs.key}"
        )
    return lines


def _cmd_optimize(args: argparse.Namespace) -> int:
    try:
        config = _resolve_config(args)
    except (ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_BAD_CONFIG
    if config.budget < 1:
        _err("budget must be >= 1")
        return EXIT_BAD_CONFIG
    if not config.out:
        _err("an output run directory is required (--out)")
        return EXIT_BAD_CONFIG
    try:
        spec = EvaluatorSpec(objectives=config.objectives, thresholds=config.thresholds)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_BAD_CONFIG
    try:
        catalog, evaluate, sim = _setup_simulation(config)
    except (FileNotFoundError, SchemaError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, (FileNotFoundError, SchemaError, json.JSONDecodeError)):
            _err(str(exc))
            return EXIT_BAD_CONFIG
        _err(str(exc))
        return EXIT_EVALUATOR
    except SimBundleError as exc:
        _err(str(exc))
        return EXIT_EVALUATOR

    out = Path(config.out)
    try:
        if config.resume and (out / MANIFEST_NAME).is_file():
            archive, selected = resume_run(
                out, config.budget, catalog, evaluate, sim=sim
            )
            spec = archive.spec
        else:
            archive, selected = adaseek_run(
                catalog,
                evaluate,
                spec,
                config.budget,
                knobs=config.knobs,
                seed=config.seed,
                run_dir=out,
                sim=sim,
                trace_to_file=config.trace or config.knobs.surrogate_trace,
            )
    except RunLockedError as exc:
        _err(str(exc))
        return EXIT_LOCKED
    except ArchiveFormatError as exc:
        _err(str(exc))
        return EXIT_CORRUPT_ARCHIVE

    lines = _summary_lines(archive, spec, selected)
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


def _cmd_baseline(args: argparse.Namespace) -> int:
    try:
        config = _resolve_config(args)
    except (ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_BAD_CONFIG
    if not config.out:
        _err("an output run directory is required (--out)")
        return EXIT_BAD_CONFIG
    try:
        spec = EvaluatorSpec(objectives=config.objectives, thresholds=config.thresholds)
        catalog, evaluate, _sim = _setup_simulation(config)
    except (FileNotFoundError, SchemaError, json.JSONDecodeError) as exc:
        _err(str(exc))
        return EXIT_BAD_CONFIG
    except (SimBundleError, ValueError) as exc:
        _err(str(exc))
        return EXIT_EVALUATOR
    try:
        if config.baseline == "random":
            archive, selected = run_random(
                catalog, evaluate, spec, config.budget, config.seed, config.out, config.knobs
            )
        elif config.baseline == "grid":
            archive, selected = run_grid(
                catalog, evaluate, spec, config.seed, config.out, config.knobs
            )
        elif config.baseline == "flat_tpe":
            archive, selected = run_flat_tpe(
                catalog, evaluate, spec, config.budget, config.seed, config.out, config.knobs
            )
        else:
            _err(f"unknown baseline kind {config.baseline!r}")
            return EXIT_BAD_CONFIG
    except GridTooLargeError as exc:
        _err(str(exc))
        return EXIT_GRID_TOO_LARGE
    except RunLockedError as exc:
        _err(str(exc))
        return EXIT_LOCKED

    lines = _summary_lines(archive, spec, selected)
    (Path(config.out) / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


def _union_volume(gains: list[tuple[float, ...]]) -> float:
    """Volume of the union of origin-anchored boxes (all coordinates > 0)."""
    if not gains:
        return 0.0
    if len(gains[0]) == 1:
        return max(g[0] for g in gains)
    pts = sorted(gains, key=lambda g: -g[0])
    volume = 0.0
    for i in range(len(pts)):
        width = pts[i][0] - (pts[i + 1][0] if i + 1 < len(pts) else 0.0)
        if width > 0:
            volume += width * _union_volume([p[1:] for p in pts[: i + 1]])
    return volume


def hypervolume(
    frontier: Sequence[Observation],
    spec: EvaluatorSpec,
    reference: Mapping[str, float],
) -> float:
    """Objective-space volume dominated by the frontier relative to ``reference``.

    Supports the up-to-three paper objectives; equals the inclusion-
    exclusion union volume of the per-point dominated boxes.
    """
    gains: list[tuple[float, ...]] = []
    for obs in frontier:
        gain = tuple(
            DIRECTIONS[name] * (obs.metrics.get(name) - reference[name])
            for name in spec.objectives
        )
        if all(g > 0 for g in gain):
            gains.append(gain)
    return _union_volume(gains)


def reference_point(archives: Sequence[ResultArchive], spec: EvaluatorSpec) -> dict[str, float]:
    """Documented convention: quality 0, cost/latency at 1.1x the observed max."""
    feasible = [o for archive in archives for o in archive.observations if o.feasible]
    max_cost = max((o.metrics.cost for o in feasible), default=1.0)
    max_latency = max((o.metrics.latency for o in feasible), default=1.0)
    return {"quality": 0.0, "cost": 1.1 * max_cost, "latency": 1.1 * max_latency}


def _cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.out)
    objectives: tuple[str, ...] | None = None
    if args.objectives:
        objectives = tuple(s.strip() for s in args.objectives.split(",") if s.strip())
    archives: list[tuple[str, ResultArchive]] = []
    for path in args.archives:
        if not Path(path).is_file():
            _err(f"archive not found: {path}")
            return EXIT_BAD_CONFIG
        if objectives is None:
            manifest_path = Path(path).parent / MANIFEST_NAME
            if manifest_path.is_file():
                doc = json.loads(manifest_path.read_text(encoding="utf-8"))
                objectives = tuple(doc["evaluator"]["objectives"])
    if objectives is None:
        objectives = ("quality", "cost", "latency")
    try:
        spec = EvaluatorSpec(objectives=objectives)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_BAD_CONFIG
    try:
        for path in args.archives:
            archives.append((path, load_archive(path, spec)))
    except ArchiveFormatError as exc:
        _err(str(exc))
        return EXIT_CORRUPT_ARCHIVE

    out.mkdir(parents=True, exist_ok=True)
    reference = reference_point([a for _, a in archives], spec)
    rows: list[dict[str, Any]] = []
    for path, archive in archives:
        frontier = pareto_frontier(archive, spec)
        stem = Path(path).parent.name or Path(path).stem
        write_frontier_csv(str(out / f"{stem}_frontier.csv"), frontier)
        best = {
            name: (
                max((o.metrics.get(name) for o in archive.feasible()), default=float("nan"))
                if DIRECTIONS[name] > 0
                else min((o.metrics.get(name) for o in archive.feasible()), default=float("nan"))
            )
            for name in spec.objectives
        }
        rows.append(
            {
                "archive": path,
                "evaluations": len(archive),
                "frontier_size": len(frontier),
                "hypervolume": hypervolume(frontier, spec, reference),
                **{f"best_{name}": best[name] for name in spec.objectives},
            }
        )

    header = ["archive", "evaluations", "frontier_size", "hypervolume"] + [
        f"best_{name}" for name in spec.objectives
    ]
    csv_lines = [",".join(header)]
    for row in rows:
        csv_lines.append(",".join(str(row[h]) for h in header))
    (out / "comparison.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")

    widths = {h: max(len(h), *(len(str(r[h])) for r in rows)) for h in header}
    print("  ".join(h.ljust(widths[h]) for h in header))
    for row in rows:
        print("  ".join(str(row[h]).ljust(widths[h]) for h in header))
    print(f"reference point: {json.dumps(reference, sort_keys=True)}")
    return EXIT_OK


def _cmd_gen_surface(args: argparse.Namespace) -> int:
    from .simflow import generate_surface

    out = Path(args.out)
    try:
        graph, catalog, surface = generate_surface(
            args.seed,
            args.steps,
            args.cogs_per_step,
            args.options,
            args.density,
            noise_sd=args.noise_sd,
        )
    except ValueError as exc:
        _err(str(exc))
        return EXIT_BAD_CONFIG
    out.mkdir(parents=True, exist_ok=True)
    space_doc = catalog_to_document(catalog)
    (out / "space.json").write_text(json.dumps(space_doc, indent=2, sort_keys=True), encoding="utf-8")
    surface_doc = {
        "version": SURFACE_DOC_VERSION,
        "seed": args.seed,
        "n_steps": args.steps,
        "cogs_per_step": args.cogs_per_step,
        "options_per_cog": args.options,
        "interaction_density": args.density,
        "noise_sd": args.noise_sd,
    }
    (out / "surface.json").write_text(
        json.dumps(surface_doc, indent=2, sort_keys=True), encoding="utf-8"
    )
    if args.dump:
        (out / "surface_dump.json").write_text(surface.serialize(), encoding="utf-8")
    print(f"wrote {out / 'space.json'} and {out / 'surface.json'}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "optimize":
        return _cmd_optimize(args)
    if args.command == "baseline":
        return _cmd_baseline(args)
    if args.command == "report":
        return _cmd_report(args)
    if args.command == "gen-surface":
        return _cmd_gen_surface(args)
    parser.error(f"unknown command {args.command!r}")
    return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
