"""Executor backends.

Two backends run a stage's command list as a job:

:class:`LocalExecutor`
    runs jobs on this host in worker threads, wall-clock time.
:class:`MockBatchExecutor`
    emulates an HPC resource manager in logical ticks: per-class capacity,
    queue delays, FIFO start order per node class, and node classes with or
    without internet access. Commands still run on this host when a job
    starts, so outputs are real; only scheduling is simulated.

Both run commands fail-fast: the first nonzero exit aborts the job and
becomes its exit code. Jobs see an environment built from an allowlist of
host variables overlaid with the request's ``env``.
"""

from __future__ import annotations

import enum
import itertools
import os
import random
import signal
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from benchforge.errors import ExecutorError, MachineError, UnknownHandleError

DEFAULT_ENV_ALLOWLIST = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "USER", "TZ")
STDOUT_NAME = "stdout.txt"
STDERR_NAME = "stderr.txt"


class JobState(str, enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    CANCELLED = "cancelled"
    TIMED_OUT = "timed_out"

    @property
    def terminal(self) -> bool:
        return self not in (JobState.QUEUED, JobState.RUNNING)


@dataclass(frozen=True)
class Resources:
    nodes: int = 1
    tasks_per_node: int = 1
    threads_per_task: int = 1

    def __post_init__(self):
        for name in ("nodes", "tasks_per_node", "threads_per_task"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ExecutorError(f"resources.{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class JobRequest:
    commands: tuple[str, ...]
    working_dir: Path
    resources: Resources = Resources()
    env: Mapping[str, str] = field(default_factory=dict)
    node_class: str = "compute"
    needs_internet: bool = False
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "commands", tuple(self.commands))
        object.__setattr__(self, "working_dir", Path(self.working_dir))
        if not self.commands:
            raise ExecutorError("job has no commands")


@dataclass(frozen=True)
class JobHandle:
    job_id: str
    submitted_at: float


@dataclass(frozen=True)
class JobStatus:
    state: JobState
    exit_code: int | None = None
    outputs: tuple[Path, ...] = ()
    detail: str = ""

    def __post_init__(self):
        has_code = self.exit_code is not None
        if has_code != (self.state in (JobState.SUCCEEDED, JobState.FAILED)):
            raise ExecutorError(f"exit code {self.exit_code!r} inconsistent with state {self.state.value}")
        if self.state is JobState.SUCCEEDED and self.exit_code != 0:
            raise ExecutorError("succeeded jobs must exit with 0")
        if self.state is JobState.FAILED and self.exit_code == 0:
            raise ExecutorError("failed jobs must exit nonzero")


def build_env(allowlist: Sequence[str], overlay: Mapping[str, str], base: Mapping[str, str] | None = None) -> dict[str, str]:
    base = os.environ if base is None else base
    env = {k: base[k] for k in allowlist if k in base}
    env.update({k: str(v) for k, v in overlay.items()})
    return env


class _Cancelled(Exception):
    pass


def run_commands(
    commands: Sequence[str],
    cwd: Path,
    env: Mapping[str, str],
    *,
    cancel: threading.Event | None = None,
    on_spawn=None,
) -> int:
    """Run commands in order under bash; return the exit code of the last one run."""
    cwd.mkdir(parents=True, exist_ok=True)
    code = 0
    with open(cwd / STDOUT_NAME, "ab") as out, open(cwd / STDERR_NAME, "ab") as err:
        for command in commands:
            if cancel is not None and cancel.is_set():
                raise _Cancelled
            proc = subprocess.Popen(
                command,
                shell=True,
                executable="/bin/bash",
                cwd=cwd,
                env=dict(env),
                stdout=out,
                stderr=err,
                start_new_session=True,
            )
            if on_spawn is not None:
                on_spawn(proc)
            code = proc.wait()
            if cancel is not None and cancel.is_set():
                raise _Cancelled
            if code != 0:
                # signal deaths come back negative
                return code if code > 0 else 128 - code
    return code


def _outputs(req: JobRequest) -> tuple[Path, ...]:
    return (req.working_dir / STDOUT_NAME, req.working_dir / STDERR_NAME)


class Executor:
    """Interface shared by all backends."""

    name = "abstract"
    node_classes: tuple[str, ...] = ()

    def submit(self, req: JobRequest) -> JobHandle:
        raise NotImplementedError

    def poll(self, handle: JobHandle) -> JobStatus:
        raise NotImplementedError

    def wait_all(self, handles: Sequence[JobHandle], timeout: float | None = None) -> list[JobStatus]:
        raise NotImplementedError

    def cancel(self, handle: JobHandle) -> JobStatus:
        raise NotImplementedError

    def shutdown(self) -> None:
        pass

    def class_has_internet(self, node_class: str) -> bool:
        return True


# --- local backend --------------------------------------------------------


@dataclass
class _LocalJob:
    req: JobRequest
    handle: JobHandle
    state: JobState = JobState.QUEUED
    exit_code: int | None = None
    detail: str = ""
    cancel: threading.Event = field(default_factory=threading.Event)
    proc: subprocess.Popen | None = None
    done: threading.Event = field(default_factory=threading.Event)

    def status(self) -> JobStatus:
        return JobStatus(self.state, self.exit_code, _outputs(self.req), self.detail)


class LocalExecutor(Executor):
    """Runs jobs on this host, up to ``max_workers`` at a time."""

    name = "local"

    def __init__(
        self,
        max_workers: int | None = None,
        *,
        node_classes: Sequence[str] = ("local", "login", "compute"),
        max_nodes: int = 1024,
        env_allowlist: Sequence[str] = DEFAULT_ENV_ALLOWLIST,
        grace_period: float = 5.0,
    ):
        self.node_classes = tuple(node_classes)
        self.max_nodes = max_nodes
        self.env_allowlist = tuple(env_allowlist)
        self.grace_period = grace_period
        self._slots = threading.Semaphore(max_workers or os.cpu_count() or 1)
        self._jobs: dict[str, _LocalJob] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._closed = False

    def submit(self, req: JobRequest) -> JobHandle:
        if self._closed:
            raise ExecutorError("local backend is shut down")
        if req.node_class not in self.node_classes:
            raise ExecutorError(f"local backend: unknown node class {req.node_class!r}")
        if req.resources.nodes > self.max_nodes:
            raise ExecutorError(f"local backend: {req.resources.nodes} nodes exceed limit {self.max_nodes}")
        with self._lock:
            handle = JobHandle(f"local-{next(self._ids)}", time.time())
            job = _LocalJob(req, handle)
            self._jobs[handle.job_id] = job
        threading.Thread(target=self._run, args=(job,), daemon=True).start()
        return handle

    def _run(self, job: _LocalJob) -> None:
        with self._slots:
            with self._lock:
                if job.cancel.is_set():
                    job.done.set()
                    return
                job.state = JobState.RUNNING

            def spawned(proc):
                job.proc = proc

            env = build_env(self.env_allowlist, job.req.env)
            try:
                code = run_commands(job.req.commands, job.req.working_dir, env, cancel=job.cancel, on_spawn=spawned)
            except _Cancelled:
                code = None
            except OSError as exc:
                code = 127
                job.detail = str(exc)
            with self._lock:
                if not job.state.terminal:
                    if code is None:
                        job.state = JobState.CANCELLED
                    else:
                        job.exit_code = code
                        job.state = JobState.SUCCEEDED if code == 0 else JobState.FAILED
            job.done.set()

    def _job(self, handle: JobHandle) -> _LocalJob:
        try:
            return self._jobs[handle.job_id]
        except KeyError:
            raise UnknownHandleError(f"unknown job {handle.job_id!r}") from None

    def poll(self, handle: JobHandle) -> JobStatus:
        job = self._job(handle)
        with self._lock:
            return job.status()

    def _terminate(self, job: _LocalJob, final: JobState, detail: str) -> None:
        with self._lock:
            if job.state.terminal:
                return
            job.cancel.set()
            job.state = final
            job.detail = detail
            proc = job.proc
        if proc is not None and proc.poll() is None:
            try:
                os.killpg(proc.pid, signal.SIGTERM)
            except ProcessLookupError:
                pass
            try:
                proc.wait(self.grace_period)
            except subprocess.TimeoutExpired:
                os.killpg(proc.pid, signal.SIGKILL)

    def cancel(self, handle: JobHandle) -> JobStatus:
        job = self._job(handle)
        self._terminate(job, JobState.CANCELLED, "cancelled")
        return self.poll(handle)

    def wait_all(self, handles: Sequence[JobHandle], timeout: float | None = None) -> list[JobStatus]:
        jobs = [self._job(h) for h in handles]
        deadline = None if timeout is None else time.monotonic() + timeout
        for job in jobs:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            job.done.wait(remaining)
        for job in jobs:
            if not job.done.is_set():
                self._terminate(job, JobState.TIMED_OUT, f"timed out after {timeout}s")
        return [self.poll(h) for h in handles]

    def shutdown(self) -> None:
        self._closed = True
        for job in list(self._jobs.values()):
            self._terminate(job, JobState.CANCELLED, "backend shut down")


# --- machine properties and the mock batch backend -----------------------


@dataclass(frozen=True)
class NodeClass:
    name: str
    capacity: int = 1
    max_nodes: int = 1
    queue_delay: tuple[int, int] = (0, 0)
    run_ticks: int = 1
    internet: bool = False


@dataclass(frozen=True)
class StageResources:
    node_class: str
    nodes: Any = 1
    tasks_per_node: Any = 1
    threads_per_task: Any = 1


@dataclass(frozen=True)
class MachineSpec:
    """Declarative description of a (mock) machine, read from ``machines/<name>.yaml``."""

    name: str
    platform: str
    node_classes: Mapping[str, NodeClass]
    stages: Mapping[str, StageResources] = field(default_factory=dict)
    env_allowlist: tuple[str, ...] = DEFAULT_ENV_ALLOWLIST
    env: Mapping[str, str] = field(default_factory=dict)
    software_versions: Mapping[str, str] = field(default_factory=dict)
    hardware: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0

    @property
    def internet_access_node_classes(self) -> tuple[str, ...]:
        return tuple(n for n, c in self.node_classes.items() if c.internet)

    def stage_resources(self, stage: str) -> StageResources:
        if stage in self.stages:
            return self.stages[stage]
        if "default" in self.stages:
            return self.stages["default"]
        return StageResources(next(iter(self.node_classes)))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], name: str | None = None) -> "MachineSpec":
        name = data.get("name", name)
        if not name:
            raise MachineError("machine needs a name")
        internet = set(data.get("internet_access_node_classes", ()))
        classes = {}
        for cname, props in (data.get("node_classes") or {}).items():
            props = props or {}
            delay = props.get("queue_delay", 0)
            if isinstance(delay, int):
                delay = (delay, delay)
            elif isinstance(delay, Mapping):
                delay = (int(delay["min"]), int(delay["max"]))
            else:
                delay = (int(delay[0]), int(delay[1]))
            if delay[0] < 0 or delay[1] < delay[0]:
                raise MachineError(f"{name}: bad queue_delay for class {cname!r}")
            classes[cname] = NodeClass(
                cname,
                capacity=int(props.get("capacity", 1)),
                max_nodes=int(props.get("max_nodes", 1)),
                queue_delay=delay,
                run_ticks=int(props.get("run_ticks", 1)),
                internet=cname in internet,
            )
        if not classes:
            raise MachineError(f"{name}: no node classes declared")
        unknown = internet - set(classes)
        if unknown:
            raise MachineError(f"{name}: internet access declared for unknown classes {sorted(unknown)}")
        stages = {}
        for stage, props in (data.get("stages") or {}).items():
            props = dict(props or {})
            cls_name = props.pop("node_class", "compute")
            if cls_name not in classes:
                raise MachineError(f"{name}: stage {stage!r} uses unknown node class {cls_name!r}")
            stages[stage] = StageResources(cls_name, **props)
        return cls(
            name=name,
            platform=data.get("platform", "generic"),
            node_classes=classes,
            stages=stages,
            env_allowlist=tuple(data.get("env_allowlist", DEFAULT_ENV_ALLOWLIST)),
            env={k: str(v) for k, v in (data.get("env") or {}).items()},
            software_versions={k: str(v) for k, v in (data.get("software_versions") or {}).items()},
            hardware=dict(data.get("hardware") or {}),
            seed=int(data.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "MachineSpec":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise MachineError(f"cannot load machine file {path}: {exc}") from exc
        return cls.from_dict(data, name=path.stem)


LOCAL_MACHINE = MachineSpec(
    name="local",
    platform="generic",
    node_classes={"local": NodeClass("local", capacity=os.cpu_count() or 1, max_nodes=1024, internet=True)},
    stages={"default": StageResources("local")},
)


def load_machines(root: str | Path) -> dict[str, MachineSpec]:
    root = Path(root)
    machines = {}
    for path in sorted(root.glob("*.y*ml")):
        spec = MachineSpec.load(path)
        machines[spec.name] = spec
    return machines


@dataclass
class _MockJob:
    req: JobRequest
    handle: JobHandle
    eligible_at: int
    state: JobState = JobState.QUEUED
    exit_code: int | None = None
    finish_at: int | None = None
    pending_code: int | None = None
    detail: str = ""

    def status(self) -> JobStatus:
        return JobStatus(self.state, self.exit_code, _outputs(self.req), self.detail)


class MockBatchExecutor(Executor):
    """Deterministic batch-scheduler emulation in logical ticks.

    ``poll`` observes the current tick and then advances the clock by one, so
    a job with queue delay ``d`` reports ``queued`` for exactly ``d`` polls.
    ``wait_all`` timeouts are measured in ticks.
    """

    name = "mock"

    def __init__(self, machine: MachineSpec, *, seed: int | None = None, tick_on_poll: bool = True):
        self.machine = machine
        self.node_classes = tuple(machine.node_classes)
        self.tick_on_poll = tick_on_poll
        self.clock = 0
        self.trace: list[tuple[int, str, str]] = []
        self._rng = random.Random(machine.seed if seed is None else seed)
        self._jobs: dict[str, _MockJob] = {}
        self._queues: dict[str, list[_MockJob]] = {c: [] for c in machine.node_classes}
        self._running: dict[str, list[_MockJob]] = {c: [] for c in machine.node_classes}
        self._ids = itertools.count(1)
        self._lock = threading.RLock()
        self._closed = False
        self.max_running_seen: dict[str, int] = {c: 0 for c in machine.node_classes}

    def class_has_internet(self, node_class: str) -> bool:
        nc = self.machine.node_classes.get(node_class)
        return bool(nc and nc.internet)

    def _record(self, job: _MockJob, state: JobState) -> None:
        job.state = state
        self.trace.append((self.clock, job.handle.job_id, state.value))

    def submit(self, req: JobRequest) -> JobHandle:
        with self._lock:
            if self._closed:
                raise ExecutorError(f"{self.machine.name}: backend is shut down")
            nc = self.machine.node_classes.get(req.node_class)
            if nc is None:
                raise ExecutorError(f"{self.machine.name}: unknown node class {req.node_class!r}")
            if req.resources.nodes > nc.max_nodes:
                raise ExecutorError(
                    f"{self.machine.name}: {req.resources.nodes} nodes exceed {nc.name} limit {nc.max_nodes}"
                )
            if req.needs_internet and not nc.internet:
                raise ExecutorError(
                    f"{self.machine.name}: node class {nc.name!r} has no internet access "
                    f"(allowed: {list(self.machine.internet_access_node_classes)})"
                )
            lo, hi = nc.queue_delay
            delay = lo if lo == hi else self._rng.randint(lo, hi)
            handle = JobHandle(f"{self.machine.name}-{next(self._ids)}", float(self.clock))
            job = _MockJob(req, handle, eligible_at=self.clock + delay)
            self._jobs[handle.job_id] = job
            self._queues[nc.name].append(job)
            self._record(job, JobState.QUEUED)
            return handle

    def _process(self) -> None:
        """Apply every transition due at the current tick."""
        for cname, running in self._running.items():
            for job in list(running):
                if job.finish_at is not None and job.finish_at <= self.clock:
                    running.remove(job)
                    job.exit_code = job.pending_code
                    self._record(job, JobState.SUCCEEDED if job.exit_code == 0 else JobState.FAILED)
        for cname, queue in self._queues.items():
            capacity = self.machine.node_classes[cname].capacity
            running = self._running[cname]
            while queue and len(running) < capacity and queue[0].eligible_at <= self.clock:
                job = queue.pop(0)
                self._start(job)
                running.append(job)
            self.max_running_seen[cname] = max(self.max_running_seen[cname], len(running))

    def _start(self, job: _MockJob) -> None:
        self._record(job, JobState.RUNNING)
        env = build_env(self.machine.env_allowlist, {**self.machine.env, **job.req.env})
        try:
            job.pending_code = run_commands(job.req.commands, job.req.working_dir, env)
        except OSError as exc:
            job.pending_code = 127
            job.detail = str(exc)
        job.finish_at = self.clock + self.machine.node_classes[job.req.node_class].run_ticks

    def advance(self, ticks: int = 1) -> None:
        with self._lock:
            for _ in range(ticks):
                self._process()
                self.clock += 1
            self._process()

    def _job(self, handle: JobHandle) -> _MockJob:
        try:
            return self._jobs[handle.job_id]
        except KeyError:
            raise UnknownHandleError(f"unknown job {handle.job_id!r}") from None

    def poll(self, handle: JobHandle) -> JobStatus:
        with self._lock:
            job = self._job(handle)
            self._process()
            status = job.status()
            if self.tick_on_poll:
                self.clock += 1
            return status

    def _remove(self, job: _MockJob) -> None:
        cname = job.req.node_class
        if job in self._queues[cname]:
            self._queues[cname].remove(job)
        if job in self._running[cname]:
            self._running[cname].remove(job)

    def cancel(self, handle: JobHandle) -> JobStatus:
        with self._lock:
            job = self._job(handle)
            if not job.state.terminal:
                self._remove(job)
                job.detail = "cancelled"
                self._record(job, JobState.CANCELLED)
            return job.status()

    def wait_all(self, handles: Sequence[JobHandle], timeout: float | None = None) -> list[JobStatus]:
        with self._lock:
            jobs = [self._job(h) for h in handles]
            start = self.clock
            self._process()
            while not all(j.state.terminal for j in jobs):
                if timeout is not None and self.clock - start >= timeout:
                    for job in jobs:
                        if not job.state.terminal:
                            self._remove(job)
                            job.detail = f"timed out after {timeout} ticks"
                            self._record(job, JobState.TIMED_OUT)
                    break
                self.clock += 1
                self._process()
            return [j.status() for j in jobs]

    def trace_text(self) -> str:
        return "".join(f"{t}\t{job}\t{state}\n" for t, job, state in self.trace)

    def shutdown(self) -> None:
        with self._lock:
            self._closed = True
