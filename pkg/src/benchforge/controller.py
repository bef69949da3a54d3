"""Run construction and execution.

A :class:`RunRequest` names a config, optional inline overrides and one or
more target machines. :func:`build_run` resolves the config, composes a
blueprint per machine, expands the parameter space and instantiates one
pipeline per combination. :func:`execute_run` runs the shared stage prefix
once, fans the remaining stages out per combination, and archives the
Execution stage output of every successful combination.

Working directory layout::

    runs/<run_id>/run.json
    runs/<run_id>/instances/<ordinal>.json
    runs/<run_id>/events.log
    runs/<run_id>/commands.log
    runs/<run_id>/artifacts/<stage>/<ordinal | shared>/
"""

from __future__ import annotations

import json
import os
import secrets
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import benchforge
from benchforge.config import (
    DEFAULT_SCHEMA,
    ConfigDocument,
    DocumentRepository,
    ParameterCombination,
    ResolvedConfig,
    Schema,
    expand_parameter_space,
    parameter_axes,
    resolve,
)
from benchforge.errors import ArchiveError, ControllerError, ExecutorError, MachineError, TemplateError
from benchforge.executor import (
    LOCAL_MACHINE,
    Executor,
    JobRequest,
    JobState,
    LocalExecutor,
    MachineSpec,
    MockBatchExecutor,
    Resources,
    load_machines,
)
from benchforge.provenance import Archive, BenchmarkRecord, ExecutionContext, collect_metadata, utc_now
from benchforge.templates import PipelineInstance, TemplateLibrary, instantiate, plan_stage_split, substitute

SHARED = "SHARED"
PENDING, RUNNING, SUCCEEDED, FAILED, SKIPPED = "pending", "running", "succeeded", "failed", "skipped"
TERMINAL = (SUCCEEDED, FAILED, SKIPPED)
_ALLOWED = {
    PENDING: {RUNNING, SKIPPED},
    RUNNING: {RUNNING, SUCCEEDED, FAILED},
    SUCCEEDED: set(),
    FAILED: set(),
    SKIPPED: set(),
}

DEFAULT_WORKFLOW = "benchmark"
ARCHIVE_STAGE = "Execution"
LOCAL_STAGES = ("Analyze", "Plot")
INTERNET_STAGES = ("Preparation",)


@dataclass(frozen=True)
class RunRequest:
    config_ref: str | os.PathLike
    target_machines: tuple[str, ...]
    overrides: Mapping[str, Any] = field(default_factory=dict)
    requester: str = "unknown"

    def __post_init__(self):
        object.__setattr__(self, "target_machines", tuple(self.target_machines))
        if not self.target_machines:
            raise ControllerError("a run request needs at least one target machine")
        for key in self.overrides:
            if not isinstance(key, str) or not key or any(not p for p in key.split(".")):
                raise ControllerError(f"override key {key!r} is not a dotted key path")


@dataclass
class Project:
    """Everything a run is built from: configs, templates and machines."""

    repo: DocumentRepository
    templates: TemplateLibrary
    machines: dict[str, MachineSpec]
    schema: Schema = DEFAULT_SCHEMA

    @classmethod
    def load(
        cls,
        root: str | Path | None = None,
        *,
        config_root: str | Path | None = None,
        templates_root: str | Path | None = None,
        machines_root: str | Path | None = None,
    ) -> "Project":
        root = Path(root) if root is not None else None
        config_root = config_root or (root / "configs" if root else None)
        templates_root = templates_root or (root / "templates" if root else None)
        machines_root = machines_root or (root / "machines" if root else None)
        if templates_root is None:
            raise TemplateError("no template root given")
        machines = {"local": LOCAL_MACHINE}
        if machines_root is not None and Path(machines_root).is_dir():
            machines.update(load_machines(machines_root))
        return cls(
            repo=DocumentRepository(config_root),
            templates=TemplateLibrary.load(templates_root),
            machines=machines,
        )


@dataclass(frozen=True)
class JobPlan:
    node_class: str
    resources: Resources


class EventLog:
    """Append-only JSON-lines log of stage state transitions."""

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.Lock()

    def append(self, run_id: str, stage: str, ordinal: int | str, new_state: str, detail: str = "") -> None:
        event = {
            "timestamp": utc_now(),
            "run_id": run_id,
            "stage": stage,
            "ordinal": ordinal,
            "new_state": new_state,
            "detail": detail,
        }
        line = json.dumps(event, ensure_ascii=False) + "\n"
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    @staticmethod
    def replay(path: Path) -> dict[tuple[str, int | str], str]:
        states: dict[tuple[str, int | str], str] = {}
        if not path.exists():
            return states
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.endswith("\n"):
                    break  # torn final write
                event = json.loads(line)
                states[(event["stage"], event["ordinal"])] = event["new_state"]
        return states


@dataclass
class PipelineRun:
    run_id: str
    machine: MachineSpec
    resolved: ResolvedConfig
    instances: list[PipelineInstance]
    stages: tuple[str, ...]
    shared_stages: tuple[str, ...]
    fanout_stages: tuple[str, ...]
    job_plans: dict[tuple[str, int | str], JobPlan]
    requester: str = "unknown"
    run_dir: Path | None = None
    stage_states: dict[tuple[str, int | str], str] = field(default_factory=dict)
    artifacts: dict[str, list[Path]] = field(default_factory=dict)
    command_log: list[dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()
        self._events = EventLog(self.run_dir / "events.log") if self.run_dir else None
        if not self.stage_states:
            for key in self.state_keys():
                self.stage_states[key] = PENDING

    def state_keys(self) -> list[tuple[str, int | str]]:
        keys: list[tuple[str, int | str]] = [(s, SHARED) for s in self.shared_stages]
        keys += [(s, inst.combination.ordinal) for s in self.fanout_stages for inst in self.instances]
        return keys

    def set_state(self, stage: str, ordinal: int | str, new: str, detail: str = "") -> None:
        with self._lock:
            old = self.stage_states[(stage, ordinal)]
            if new not in _ALLOWED[old]:
                raise ControllerError(f"illegal transition {old} -> {new} for {stage}/{ordinal}")
            self.stage_states[(stage, ordinal)] = new
            if self._events is not None:
                self._events.append(self.run_id, stage, ordinal, new, detail)

    def snapshot(self) -> dict[tuple[str, int | str], str]:
        with self._lock:
            return dict(self.stage_states)

    def serialized_instances(self) -> list[str]:
        return [inst.to_json() for inst in self.instances]

    def persist(self) -> None:
        assert self.run_dir is not None
        (self.run_dir / "instances").mkdir(parents=True, exist_ok=True)
        for inst in self.instances:
            (self.run_dir / "instances" / f"{inst.combination.ordinal}.json").write_text(inst.to_json(), encoding="utf-8")
        meta = {
            "run_id": self.run_id,
            "machine": self.machine.name,
            "requester": self.requester,
            "stages": list(self.stages),
            "shared_stages": list(self.shared_stages),
            "fanout_stages": list(self.fanout_stages),
            "job_plans": [
                {
                    "stage": stage,
                    "ordinal": ordinal,
                    "node_class": plan.node_class,
                    "nodes": plan.resources.nodes,
                    "tasks_per_node": plan.resources.tasks_per_node,
                    "threads_per_task": plan.resources.threads_per_task,
                }
                for (stage, ordinal), plan in self.job_plans.items()
            ],
            "resolved": self.resolved.to_dict(),
        }
        (self.run_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if not (self.run_dir / "events.log").exists():
            for stage, ordinal in self.state_keys():
                self._events.append(self.run_id, stage, ordinal, PENDING, "built")


@dataclass
class RunReport:
    run_id: str
    machine: str
    combination_states: dict[int, str]
    record_ids: dict[int, str]
    stage_durations: dict[str, float]
    failures: dict[Any, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(s == SUCCEEDED for s in self.combination_states.values())


def _new_run_id(machine: str) -> str:
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    return f"{stamp}-{machine}-{secrets.token_hex(3)}"


def _render_int(value: Any, rc: ResolvedConfig, combo: ParameterCombination, what: str) -> int:
    if isinstance(value, str):
        value = substitute(value, rc, combo)
    try:
        return int(value)
    except (TypeError, ValueError):
        raise TemplateError(f"{what}: {value!r} is not an integer") from None


def build_run_from_resolved(
    rc: ResolvedConfig,
    machine: MachineSpec,
    templates: TemplateLibrary,
    *,
    requester: str = "unknown",
    workdir: str | Path | None = None,
    run_id: str | None = None,
) -> PipelineRun:
    """Build one machine's pipeline run from an already-resolved config."""
    workflow = rc.get("workflow.name", DEFAULT_WORKFLOW)
    bp = templates.blueprint(workflow, machine.platform, machine.name)
    combos = expand_parameter_space(rc)
    axes = parameter_axes(rc)
    instances = [instantiate(bp, rc, combo) for combo in combos]
    shared, fanout = plan_stage_split(bp, axes)
    axis_keys = {a.key_path for a in axes}

    plans: dict[tuple[str, int | str], JobPlan] = {}
    for stage in bp.stages:
        sr = machine.stage_resources(stage)
        targets = [(SHARED, combos[0])] if stage in shared else [(c.ordinal, c) for c in combos]
        for ordinal, combo in targets:
            fields = {}
            for name in ("nodes", "tasks_per_node", "threads_per_task"):
                raw = getattr(sr, name)
                if stage in shared and isinstance(raw, str) and any(f"{{{{{k}}}}}" in raw for k in axis_keys):
                    raise TemplateError(
                        f"machine {machine.name}: shared stage {stage!r} sizes its job by a parameter axis"
                    )
                fields[name] = _render_int(raw, rc, combo, f"{machine.name}/{stage}.{name}")
            plans[(stage, ordinal)] = JobPlan(sr.node_class, Resources(**fields))

    run_id = run_id or _new_run_id(machine.name)
    run_dir = Path(workdir) / "runs" / run_id if workdir is not None else None
    run = PipelineRun(
        run_id=run_id,
        machine=machine,
        resolved=rc,
        instances=instances,
        stages=bp.stages,
        shared_stages=shared,
        fanout_stages=fanout,
        job_plans=plans,
        requester=requester,
        run_dir=run_dir,
    )
    if run_dir is not None:
        run.persist()
    return run


def resolve_request(req: RunRequest, repo: DocumentRepository, schema: Schema = DEFAULT_SCHEMA) -> ResolvedConfig:
    ref = req.config_ref
    doc = ref if isinstance(ref, ConfigDocument) else repo.load(ref)
    return resolve(doc, repo, schema, overrides=dict(req.overrides) or None)


def build_run(
    req: RunRequest,
    repo: DocumentRepository,
    templates: TemplateLibrary,
    machines: Mapping[str, MachineSpec],
    *,
    schema: Schema = DEFAULT_SCHEMA,
    workdir: str | Path | None = None,
) -> list[PipelineRun]:
    """One :class:`PipelineRun` per target machine, all stages pending."""
    for name in req.target_machines:
        if name not in machines:
            raise MachineError(f"unknown machine {name!r}; known: {', '.join(sorted(machines))}")
    rc = resolve_request(req, repo, schema)
    return [
        build_run_from_resolved(rc, machines[name], templates, requester=req.requester, workdir=workdir)
        for name in req.target_machines
    ]


def make_executor(kind: str, machine: MachineSpec, **kwargs) -> Executor:
    if kind == "mock":
        return MockBatchExecutor(machine, **kwargs)
    if kind == "local":
        classes = tuple(dict.fromkeys(("local",) + tuple(machine.node_classes)))
        return LocalExecutor(node_classes=classes, env_allowlist=machine.env_allowlist, **kwargs)
    raise ControllerError(f"unknown executor {kind!r}; expected 'local' or 'mock'")


def _package_pythonpath() -> str:
    src = str(Path(benchforge.__file__).resolve().parent.parent)
    existing = os.environ.get("PYTHONPATH")
    return src + (os.pathsep + existing if existing else "")


def _collect_raw(directory: Path) -> dict[str, bytes]:
    return {
        p.relative_to(directory).as_posix(): p.read_bytes()
        for p in sorted(directory.rglob("*"))
        if p.is_file()
    }


class _Runner:
    def __init__(self, run: PipelineRun, executor: Executor, archive: Archive | None,
                 local: Executor | None, timeout: float | None, retries: int):
        if run.run_dir is None:
            raise ControllerError("run has no working directory; build it with workdir=...")
        self.run = run
        self.executor = executor
        self.archive = archive
        self.local = local
        self.timeout = timeout
        self.retries = retries
        self.records: dict[int, str] = {}
        self.failures: dict[Any, str] = {}
        self.durations: dict[str, float] = {}
        self._cmdlog = run.run_dir / "commands.log"

    def _executor_for(self, stage: str) -> Executor:
        if stage in LOCAL_STAGES:
            if self.local is None:
                self.local = LocalExecutor(env_allowlist=self.run.machine.env_allowlist)
            return self.local
        return self.executor

    def _request(self, stage: str, ordinal: int | str, inst: PipelineInstance, executor: Executor) -> JobRequest:
        run = self.run
        label = "shared" if ordinal == SHARED else str(ordinal)
        wd = run.run_dir / "artifacts" / stage / label
        plan = run.job_plans[(stage, ordinal)]
        node_class = plan.node_class
        if stage in LOCAL_STAGES or node_class not in executor.node_classes:
            node_class = "local" if "local" in executor.node_classes else node_class
        env = {
            **run.machine.env,
            "BENCHFORGE_RUN_ID": run.run_id,
            "BENCHFORGE_RUN_DIR": str(run.run_dir),
            "BENCHFORGE_SHARED_DIR": str(run.run_dir / "artifacts"),
            "BENCHFORGE_ARTIFACTS": str(wd),
            "BENCHFORGE_STAGE": stage,
            "BENCHFORGE_ORDINAL": label,
            "BENCHFORGE_PYTHON": sys.executable,
            "PYTHONPATH": _package_pythonpath(),
        }
        return JobRequest(
            commands=inst.per_stage_commands[stage],
            working_dir=wd,
            resources=plan.resources,
            env=env,
            node_class=node_class,
            needs_internet=stage in INTERNET_STAGES,
            label=f"{run.run_id}/{stage}/{label}",
        )

    def _log_command(self, stage: str, ordinal: int | str, job_id: str, req: JobRequest) -> None:
        entry = {"stage": stage, "ordinal": ordinal, "job_id": job_id, "commands": list(req.commands)}
        self.run.command_log.append(entry)
        with open(self._cmdlog, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")

    def _run_jobs(self, stage: str, items: list[tuple[int | str, PipelineInstance]]) -> dict[int | str, tuple[bool, str]]:
        """Run one job per item with bounded retries; returns ordinal -> (ok, detail)."""
        executor = self._executor_for(stage)
        results: dict[int | str, tuple[bool, str]] = {}
        todo = list(items)
        for attempt in range(self.retries + 1):
            submitted = []
            for ordinal, inst in todo:
                try:
                    req = self._request(stage, ordinal, inst, executor)
                    handle = executor.submit(req)
                except ExecutorError as exc:
                    results[ordinal] = (False, f"submission failed: {exc}")
                    continue
                self._log_command(stage, ordinal, handle.job_id, req)
                submitted.append((ordinal, inst, handle))
            statuses = executor.wait_all([h for _, _, h in submitted], self.timeout) if submitted else []
            retry = []
            for (ordinal, inst, _), st in zip(submitted, statuses):
                if st.state is JobState.SUCCEEDED:
                    results[ordinal] = (True, "")
                    continue
                if st.state is JobState.TIMED_OUT:
                    detail = f"timeout: {st.detail}"
                else:
                    detail = f"{st.state.value} (exit code {st.exit_code})"
                results[ordinal] = (False, detail)
                retry.append((ordinal, inst))
            if not retry or attempt == self.retries:
                break
            for ordinal, _ in retry:
                self.run.set_state(stage, ordinal, RUNNING, f"retry {attempt + 1}")
            todo = retry
        return results

    def _archive(self, ordinal: int, inst: PipelineInstance) -> str:
        run = self.run
        wd = run.run_dir / "artifacts" / ARCHIVE_STAGE / str(ordinal)
        plan = run.job_plans[(ARCHIVE_STAGE, ordinal)]
        ctx = ExecutionContext.for_machine(run.machine, plan.node_class)
        rec = BenchmarkRecord(
            run_id=run.run_id,
            combination=inst.combination,
            resolved_config=run.resolved.to_json(),
            raw_files=_collect_raw(wd),
            metadata=collect_metadata(ctx),
            requester=run.requester,
            config_name=run.resolved.name,
        )
        if not rec.raw_files:
            raise ArchiveError("Execution produced no files")
        return self.archive.store(rec)

    def execute(self) -> RunReport:
        run = self.run
        states = run.snapshot()
        shared_failed = False
        base = run.instances[0]
        for stage in run.shared_stages:
            key = (stage, SHARED)
            if states[key] == SUCCEEDED:
                continue
            if shared_failed or states[key] in (FAILED, SKIPPED):
                shared_failed = True
                if states[key] == PENDING:
                    run.set_state(stage, SHARED, SKIPPED, "earlier shared stage failed")
                continue
            t0 = time.monotonic()
            run.set_state(stage, SHARED, RUNNING, "resumed" if states[key] == RUNNING else "")
            ok, detail = self._run_jobs(stage, [(SHARED, base)])[SHARED]
            self.durations[stage] = time.monotonic() - t0
            run.set_state(stage, SHARED, SUCCEEDED if ok else FAILED, detail)
            if ok:
                run.artifacts[stage] = sorted((run.run_dir / "artifacts" / stage / "shared").rglob("*"))
            else:
                shared_failed = True
                self.failures[stage] = detail

        for stage in run.fanout_stages:
            active = []
            for inst in run.instances:
                o = inst.combination.ordinal
                state = run.stage_states[(stage, o)]
                if state in TERMINAL:
                    continue
                if shared_failed:
                    run.set_state(stage, o, SKIPPED, "shared stage failed")
                    continue
                earlier = run.fanout_stages[: run.fanout_stages.index(stage)]
                if any(run.stage_states[(s, o)] != SUCCEEDED for s in earlier):
                    run.set_state(stage, o, SKIPPED, "earlier stage did not succeed")
                    continue
                run.set_state(stage, o, RUNNING, "resumed" if state == RUNNING else "")
                active.append((o, inst))
            if not active:
                continue
            t0 = time.monotonic()
            results = self._run_jobs(stage, active)
            self.durations[stage] = time.monotonic() - t0
            for o, inst in active:
                ok, detail = results[o]
                if ok and stage == ARCHIVE_STAGE and self.archive is not None:
                    try:
                        self.records[o] = self._archive(o, inst)
                    except ArchiveError as exc:
                        ok, detail = False, f"archiving failed: {exc}"
                run.set_state(stage, o, SUCCEEDED if ok else FAILED, detail)
                if not ok:
                    self.failures[o] = f"{stage}: {detail}"
            run.artifacts[stage] = sorted((run.run_dir / "artifacts" / stage).rglob("*"))

        combo_states = {}
        for inst in run.instances:
            o = inst.combination.ordinal
            states = [run.stage_states[(s, SHARED)] for s in run.shared_stages]
            states += [run.stage_states[(s, o)] for s in run.fanout_stages]
            if FAILED in states and any(run.stage_states[(s, o)] == FAILED for s in run.fanout_stages):
                combo_states[o] = FAILED
            elif all(s == SUCCEEDED for s in states):
                combo_states[o] = SUCCEEDED
            else:
                combo_states[o] = SKIPPED
        self._recover_records()
        return RunReport(run.run_id, run.machine.name, combo_states, dict(self.records), self.durations, self.failures)

    def _recover_records(self) -> None:
        """On resume, pick up record ids archived by an earlier invocation."""
        if self.archive is None:
            return
        for inst in self.run.instances:
            o = inst.combination.ordinal
            if o in self.records or self.run.stage_states.get((ARCHIVE_STAGE, o)) != SUCCEEDED:
                continue
            hits = self.archive.query([f"run_id={self.run.run_id}"])
            for rid in hits:
                if self.archive.fetch(rid).combination.ordinal == o:
                    self.records[o] = rid


def execute_run(
    run: PipelineRun,
    executor: Executor,
    archive: Archive | None,
    *,
    local_executor: Executor | None = None,
    timeout: float | None = None,
    retries: int = 0,
) -> RunReport:
    """Run shared stages once, then fan out per combination; see module docs."""
    runner = _Runner(run, executor, archive, local_executor, timeout, retries)
    try:
        return runner.execute()
    finally:
        if local_executor is None and runner.local is not None:
            runner.local.shutdown()


def load_run(run_id: str, workdir: str | Path, machines: Mapping[str, MachineSpec]) -> PipelineRun:
    """Rebuild a persisted run (for resume) from its run directory."""
    run_dir = Path(workdir) / "runs" / run_id
    try:
        meta = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    except OSError:
        raise ControllerError(f"unknown run {run_id!r}") from None
    if meta["machine"] not in machines:
        raise MachineError(f"unknown machine {meta['machine']!r}")
    from benchforge.templates import PipelineBlueprint, WorkflowTemplate

    rc = ResolvedConfig.from_dict(meta["resolved"])
    wf = WorkflowTemplate(rc.get("workflow.name", DEFAULT_WORKFLOW), tuple(meta["stages"]))
    instances = []
    for path in sorted((run_dir / "instances").glob("*.json"), key=lambda p: int(p.stem)):
        data = json.loads(path.read_text(encoding="utf-8"))
        cmds = {s["stage"]: tuple(s["commands"]) for s in data["stages"]}
        bp = PipelineBlueprint(wf, cmds)
        instances.append(PipelineInstance(bp, ParameterCombination.from_dict(data["combination"]), cmds))
    plans = {
        (p["stage"], p["ordinal"]): JobPlan(
            p["node_class"], Resources(p["nodes"], p["tasks_per_node"], p["threads_per_task"])
        )
        for p in meta["job_plans"]
    }
    states = EventLog.replay(run_dir / "events.log")
    return PipelineRun(
        run_id=run_id,
        machine=machines[meta["machine"]],
        resolved=rc,
        instances=instances,
        stages=tuple(meta["stages"]),
        shared_stages=tuple(meta["shared_stages"]),
        fanout_stages=tuple(meta["fanout_stages"]),
        job_plans=plans,
        requester=meta["requester"],
        run_dir=run_dir,
        stage_states=states,
    )


def status(run_id: str, workdir: str | Path) -> dict[tuple[str, int | str], str]:
    """Point-in-time stage states of a run, read from its event log."""
    path = Path(workdir) / "runs" / run_id / "events.log"
    if not path.exists():
        raise ControllerError(f"unknown run {run_id!r}")
    return EventLog.replay(path)
