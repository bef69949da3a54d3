"""The ``benchforge`` command line: the single entry point for runs and results.

Exit codes: 0 success, 1 user error (bad config, template, filter or input),
2 execution failure (a stage or combination did not succeed).
"""

from __future__ import annotations

import argparse
import getpass
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from benchforge import DEMO_DIR
from benchforge.analysis import (
    PHASES,
    ScalingPoint,
    aggregate_seeds,
    emit_plot,
    parse_timers,
    write_table,
)
from benchforge.config import DEFAULT_SCHEMA, DocumentRepository, ResolvedConfig, diff, resolve
from benchforge.controller import (
    SHARED,
    Project,
    RunRequest,
    build_run,
    execute_run,
    make_executor,
    status,
)
from benchforge.errors import AnalysisError, BenchforgeError, ExecutionError
from benchforge.provenance import ID_PATTERN, Archive, BenchmarkRecord, RecordFilter

EXIT_OK, EXIT_USER, EXIT_EXEC = 0, 1, 2


def _parse_set(items: Sequence[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise BenchforgeError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value) if value.strip() else ""
    return out


def _workdir(args) -> Path:
    return Path(args.workdir or os.environ.get("BENCHFORGE_WORKDIR") or ".").resolve()


def _archive(args, create: bool = True) -> Archive:
    root = args.archive_root or os.environ.get("BENCHFORGE_ARCHIVE")
    if not root:
        root = _workdir(args) / "archive"
    return Archive(root)


def _project(args) -> tuple[Project, str | None]:
    """Locate configs, templates and machines; returns the project and config ref."""
    config = args.config
    root = None
    if getattr(args, "demo", False):
        root = DEMO_DIR
        config = config or "demo"
    elif args.project:
        root = Path(args.project)
    config_root = args.config_root or os.environ.get("BENCHFORGE_CONFIG_ROOT")
    if config_root is None and root is not None:
        config_root = root / "configs"
    if config_root is None and config and Path(config).is_file():
        config_root = Path(config).resolve().parent
    base = root or (Path(config_root).resolve().parent if config_root else Path("."))
    project = Project.load(
        config_root=config_root,
        templates_root=args.templates_root or base / "templates",
        machines_root=args.machines_root or base / "machines",
    )
    return project, config


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workdir", help="directory holding runs/ (default: $BENCHFORGE_WORKDIR or .)")
    p.add_argument("--archive-root", help="archive directory (default: $BENCHFORGE_ARCHIVE or <workdir>/archive)")
    p.add_argument("--porcelain", action="store_true", help="stable tab-separated output")


def _add_project(p: argparse.ArgumentParser) -> None:
    p.add_argument("--project", help="directory with configs/, templates/ and machines/")
    p.add_argument("--config-root", help="config repository root (default: $BENCHFORGE_CONFIG_ROOT)")
    p.add_argument("--templates-root")
    p.add_argument("--machines-root")


def _add_selection(p: argparse.ArgumentParser) -> None:
    p.add_argument("record_ids", nargs="*", help="record ids (default: all matching --filter)")
    p.add_argument("--filter", action="append", default=[], metavar="KEY<OP>VALUE")
    p.add_argument("--resource-key", default="param.run.nodes")
    p.add_argument("--seed-key", default="param.run.seed")
    p.add_argument("--timer-file", default="timers.txt")
    p.add_argument("--out", default="analysis", help="output directory")
    p.add_argument("--stem", default="scaling")
    p.add_argument("--label", default="")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="benchforge", description="Continuous benchmarking orchestrator.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="build and execute a benchmark run")
    p.add_argument("--config", help="config document path or name")
    p.add_argument("--demo", action="store_true", help="use the bundled demo project")
    p.add_argument("--machine", action="append", default=[], help="target machine (repeatable)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="inline override")
    p.add_argument("--executor", choices=("local", "mock"), default="mock")
    p.add_argument("--requester", default=None)
    p.add_argument("--retries", type=int, default=0)
    p.add_argument("--timeout", type=float, default=None, help="per-stage timeout (s, or ticks for mock)")
    _add_project(p)
    _add_common(p)

    p = sub.add_parser("status", help="show stage states of a run")
    p.add_argument("run_id")
    _add_common(p)

    p = sub.add_parser("list", help="list archived records")
    _add_common(p)

    p = sub.add_parser("query", help="select archived records by metadata/config/annotations")
    p.add_argument("--filter", action="append", default=[], metavar="KEY<OP>VALUE")
    _add_common(p)

    p = sub.add_parser("analyze", help="aggregate timer files across seeds per resource count")
    _add_selection(p)
    _add_common(p)

    p = sub.add_parser("plot", help="write the scaling plot and its table")
    _add_selection(p)
    p.add_argument("--style", choices=("weak", "strong"), default="weak")
    _add_common(p)

    p = sub.add_parser("diff", help="compare two resolved configs (paths, names, or record ids)")
    p.add_argument("left")
    p.add_argument("right")
    p.add_argument("--project", help="directory with configs/")
    p.add_argument("--config-root", help="config repository root (default: $BENCHFORGE_CONFIG_ROOT)")
    _add_common(p)
    return ap


def _print(args, human: str, fields: Sequence[Any]) -> None:
    print("\t".join(str(f) for f in fields) if args.porcelain else human)


def cmd_run(args) -> int:
    if not args.config and not args.demo:
        raise BenchforgeError("run needs --config or --demo")
    project, config = _project(args)
    machines = args.machine or (["mock-A"] if args.demo else [])
    req = RunRequest(
        config_ref=config,
        target_machines=tuple(machines),
        overrides=_parse_set(args.set),
        requester=args.requester or os.environ.get("USER") or getpass.getuser(),
    )
    workdir = _workdir(args)
    runs = build_run(req, project.repo, project.templates, project.machines, schema=project.schema, workdir=workdir)
    archive = _archive(args)
    code = EXIT_OK
    for run in runs:
        executor = make_executor(args.executor, run.machine)
        try:
            report = execute_run(run, executor, archive, timeout=args.timeout, retries=args.retries)
        finally:
            executor.shutdown()
        _print(args, f"run {report.run_id} on {report.machine}", ("run", report.run_id, report.machine))
        for inst in run.instances:
            o = inst.combination.ordinal
            state = report.combination_states[o]
            rid = report.record_ids.get(o, "-")
            combo = " ".join(f"{k}={v}" for k, v in sorted(inst.combination.assignments.items()))
            _print(
                args,
                f"  [{o}] {state:<9} {rid}  {combo}",
                ("combination", report.run_id, o, state, rid, json.dumps(dict(inst.combination.assignments), sort_keys=True)),
            )
        for where, detail in report.failures.items():
            print(f"  failure at {where}: {detail}", file=sys.stderr)
        if not report.ok:
            code = EXIT_EXEC
    return code


def cmd_status(args) -> int:
    states = status(args.run_id, _workdir(args))
    for (stage, ordinal), state in states.items():
        label = "shared" if ordinal == SHARED else ordinal
        _print(args, f"{stage:<12} {label!s:<7} {state}", (stage, label, state))
    return EXIT_OK


def _summary(rec: BenchmarkRecord, args) -> None:
    combo = json.dumps(dict(sorted(rec.combination.assignments.items())))
    _print(
        args,
        f"{rec.record_id}  {rec.metadata.machine:<8} {rec.run_id}  {combo}",
        (rec.record_id, rec.metadata.machine, rec.run_id, combo),
    )


def cmd_list(args) -> int:
    for rec in _archive(args).records():
        _summary(rec, args)
    return EXIT_OK


def cmd_query(args) -> int:
    archive = _archive(args)
    f = RecordFilter.parse(args.filter)
    for rid in archive.query(f):
        _summary(archive.fetch(rid), args)
    return EXIT_OK


def _selected(args) -> list[BenchmarkRecord]:
    archive = _archive(args)
    if args.record_ids:
        ids = list(args.record_ids)
        if args.filter:
            keep = set(archive.query(RecordFilter.parse(args.filter)))
            ids = [i for i in ids if i in keep]
    else:
        ids = archive.query(RecordFilter.parse(args.filter))
    if not ids:
        raise AnalysisError("no records selected")
    return [archive.fetch(i) for i in ids]


def _points(records: Sequence[BenchmarkRecord], args) -> list[ScalingPoint]:
    schemas = {json.loads(r.resolved_config).get("schema_id") for r in records}
    if len(schemas) > 1:
        raise AnalysisError(f"records mix config schemas {sorted(map(str, schemas))}")
    points = []
    for rec in records:
        if args.timer_file not in rec.raw_files:
            raise AnalysisError(f"record {rec.record_id} has no {args.timer_file} (mixed workload schemas?)")
        view = rec.view()
        for key in (args.resource_key, args.seed_key):
            if key not in view:
                raise AnalysisError(f"record {rec.record_id} lacks {key}")
        points.append(
            ScalingPoint(int(view[args.resource_key]), int(view[args.seed_key]), parse_timers(rec.raw_files[args.timer_file]))
        )
    return points


def cmd_analyze(args) -> int:
    ar = aggregate_seeds(_points(_selected(args), args), label=args.label)
    table = write_table(ar, Path(args.out) / f"{args.stem}.csv")
    for g in ar.groups:
        fractions = " ".join(f"{ph}={g.fractions[ph]:.4f}" for ph in PHASES)
        _print(
            args,
            f"nodes={g.resource_count} n_seeds={g.n_seeds} rtf={g.rtf_mean:.6g}±{g.rtf_stderr:.2g} {fractions}",
            (g.resource_count, g.n_seeds, repr(g.rtf_mean), repr(g.rtf_stderr), *(repr(g.fractions[p]) for p in PHASES)),
        )
    _print(args, f"table {table}", ("table", table))
    return EXIT_OK


def cmd_plot(args) -> int:
    ar = aggregate_seeds(_points(_selected(args), args), label=args.label)
    svg, table = emit_plot(ar, args.out, args.style, args.stem)
    _print(args, f"plot {svg}", ("plot", svg))
    _print(args, f"table {table}", ("table", table))
    return EXIT_OK


def _resolved_for_diff(ref: str, args) -> ResolvedConfig:
    if ID_PATTERN.match(ref):
        return _archive(args).fetch(ref).config()
    config_root = args.config_root or os.environ.get("BENCHFORGE_CONFIG_ROOT")
    if config_root is None and args.project:
        config_root = Path(args.project) / "configs"
    if config_root is None and Path(ref).is_file():
        config_root = Path(ref).resolve().parent
    repo = DocumentRepository(config_root)
    return resolve(repo.load(ref), repo, DEFAULT_SCHEMA)


def cmd_diff(args) -> int:
    left = _resolved_for_diff(args.left, args)
    right = _resolved_for_diff(args.right, args)
    for key, a, b in diff(left, right):
        _print(args, f"{key}: {a!r} -> {b!r}", (key, json.dumps(a), json.dumps(b)))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "status": cmd_status,
    "list": cmd_list,
    "query": cmd_query,
    "analyze": cmd_analyze,
    "plot": cmd_plot,
    "diff": cmd_diff,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ExecutionError as exc:
        print(f"benchforge: [{exc.layer}] {exc}", file=sys.stderr)
        return EXIT_EXEC
    except BenchforgeError as exc:
        print(f"benchforge: [{exc.layer}] {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
