"""Metadata capture and the benchmark record archive.

Archive layout (root from ``--archive-root`` or ``BENCHFORGE_ARCHIVE``)::

    <root>/records/<record_id>/
        manifest.txt       human-readable header + one line per blob
        record.json        run id, combination, requester, config name
        metadata.json      MetadataSnapshot
        config.json        resolved config snapshot, verbatim
        annotations.json   post-hoc annotations
        raw/<name>         raw benchmark output

Manifest blob lines are ``<relative path>\\t<byte length>\\t<sha256 hex>``;
every blob is verified on fetch. Records are written to a scratch directory
and published with an atomic rename.
"""

from __future__ import annotations

import datetime as _dt
import json
import os
import platform
import random
import re
import shutil
import socket
import threading
import time
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path, PurePosixPath
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Sequence

import filelock
import yaml

import benchforge
from benchforge.config import ParameterCombination, ResolvedConfig, kind_of
from benchforge.errors import ArchiveError, ChecksumError, FilterError
from benchforge.executor import DEFAULT_ENV_ALLOWLIST, MachineSpec

UNKNOWN = "unknown"
COLLECTOR_VERSION = f"benchforge-metadata/{benchforge.__version__}"

ID_PATTERN = re.compile(r"^\d{8}T\d{6}Z-[0-9A-V]{6}$")
_B32HEX = "0123456789ABCDEFGHIJKLMNOPQRSTUV"
_SUFFIX_SPACE = 32**6
_SUFFIX_STEP = 1 << 16

NAMESPACES = ("metadata", "config", "combination", "annotations", "param")
TOP_FIELDS = ("record_id", "run_id", "requester", "config_name")
RESERVED_ANNOTATION_ROOTS = set(NAMESPACES) | set(TOP_FIELDS)


@dataclass(frozen=True)
class MetadataSnapshot:
    machine: str
    node_class: str
    captured_env: Mapping[str, str]
    software_versions: Mapping[str, str]
    timestamp: str
    collector_version: str = COLLECTOR_VERSION
    hardware: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "machine": self.machine,
            "node_class": self.node_class,
            "captured_env": dict(sorted(self.captured_env.items())),
            "software_versions": dict(sorted(self.software_versions.items())),
            "timestamp": self.timestamp,
            "collector_version": self.collector_version,
            "hardware": dict(sorted(self.hardware.items())),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetadataSnapshot":
        return cls(**data)


@dataclass(frozen=True)
class ExecutionContext:
    machine: str = "local"
    node_class: str = "local"
    env: Mapping[str, str] | None = None
    env_allowlist: Sequence[str] = DEFAULT_ENV_ALLOWLIST
    software_versions: Mapping[str, str] = field(default_factory=dict)
    hardware: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def for_machine(cls, spec: MachineSpec, node_class: str, env: Mapping[str, str] | None = None) -> "ExecutionContext":
        return cls(
            machine=spec.name,
            node_class=node_class,
            env=env,
            env_allowlist=spec.env_allowlist,
            software_versions=spec.software_versions,
            hardware=spec.hardware,
        )


def utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _safe(fn, default=UNKNOWN):
    try:
        value = fn()
    except Exception:
        return default
    return default if value in (None, "") else value


def _numpy_version() -> str:
    import numpy

    return numpy.__version__


def collect_metadata(ctx: ExecutionContext) -> MetadataSnapshot:
    """Snapshot machine, environment and software versions; never raises."""
    env = os.environ if ctx.env is None else ctx.env
    captured = {k: str(env[k]) for k in ctx.env_allowlist if k in env}
    software = {
        "python": _safe(lambda: platform.python_version()),
        "benchforge": benchforge.__version__,
        "numpy": _safe(_numpy_version),
        "os": _safe(lambda: f"{platform.system()} {platform.release()}"),
    }
    software.update({k: str(v) for k, v in ctx.software_versions.items()})
    if ctx.hardware:
        hardware = {k: v for k, v in ctx.hardware.items()}
    else:
        hardware = {
            "hostname": _safe(socket.gethostname),
            "cpu_count": _safe(os.cpu_count),
            "arch": _safe(platform.machine),
            "processor": _safe(platform.processor),
        }
    return MetadataSnapshot(
        machine=ctx.machine or UNKNOWN,
        node_class=ctx.node_class or UNKNOWN,
        captured_env=captured,
        software_versions=software,
        timestamp=utc_now(),
        hardware=hardware,
    )


@dataclass(frozen=True)
class BenchmarkRecord:
    run_id: str
    combination: ParameterCombination
    resolved_config: str
    raw_files: Mapping[str, bytes]
    metadata: MetadataSnapshot
    annotations: Mapping[str, Any] = field(default_factory=dict)
    record_id: str | None = None
    requester: str = UNKNOWN
    config_name: str = UNKNOWN

    def __post_init__(self):
        object.__setattr__(self, "raw_files", MappingProxyType(dict(self.raw_files)))
        object.__setattr__(self, "annotations", MappingProxyType(dict(self.annotations)))
        for name in self.raw_files:
            p = PurePosixPath(name)
            if p.is_absolute() or ".." in p.parts or not name:
                raise ArchiveError(f"bad raw file name {name!r}")

    def config(self) -> ResolvedConfig:
        return ResolvedConfig.from_json(self.resolved_config)

    def view(self) -> dict[str, Any]:
        """Flat dotted-key view used by queries."""
        config = json.loads(self.resolved_config).get("entries", {})
        combo = dict(self.combination.assignments)
        out: dict[str, Any] = {
            "record_id": self.record_id,
            "run_id": self.run_id,
            "requester": self.requester,
            "config_name": self.config_name,
        }
        meta = self.metadata.to_dict()
        for key, value in meta.items():
            if isinstance(value, dict):
                for sub, v in value.items():
                    out[f"metadata.{key}.{sub}"] = v
            else:
                out[f"metadata.{key}"] = value
        for key, value in config.items():
            out[f"config.{key}"] = value
            out[f"param.{key}"] = value
        for key, value in combo.items():
            out[f"combination.{key}"] = value
            out[f"param.{key}"] = value
        for key, value in self.annotations.items():
            out[f"annotations.{key}"] = value
        return out


# --- filters ---------------------------------------------------------------

OPERATORS = {"=": "=", "==": "=", "!=": "!=", "≠": "!=", "<": "<", "<=": "<=", "≤": "<=",
             ">": ">", ">=": ">=", "≥": ">=", "contains": "contains", "~": "contains"}
_ORDERED = ("<", "<=", ">", ">=")
_FILTER_RE = re.compile(r"^\s*([^\s=<>!~≠≤≥]+)\s*(==|!=|<=|>=|=|<|>|~|≠|≤|≥)\s*(.*?)\s*$")
_CONTAINS_RE = re.compile(r"^\s*([^\s=<>!~≠≤≥]+)\s+(contains)\s+(.*?)\s*$")


def _valid_key(key: str) -> bool:
    parts = key.split(".")
    if any(not p for p in parts):
        return False
    if parts[0] in TOP_FIELDS:
        return len(parts) == 1
    return parts[0] in NAMESPACES and len(parts) >= 2


@dataclass(frozen=True)
class Predicate:
    key: str
    op: str
    value: Any
    # literal text of the value; string-valued fields compare against it
    text: str | None = None

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise FilterError(f"unknown operator {self.op!r}")
        object.__setattr__(self, "op", OPERATORS[self.op])
        if not _valid_key(self.key):
            raise FilterError(
                f"invalid key path {self.key!r}; use one of {', '.join(TOP_FIELDS)} "
                f"or <{'|'.join(NAMESPACES)}>.<key>"
            )
        kind = kind_of(self.value)
        if self.op in _ORDERED and kind not in ("int", "float", "str"):
            raise FilterError(f"operator {self.op!r} needs an ordered value, got {kind}")
        if kind not in ("int", "float", "str", "bool"):
            raise FilterError(f"filter values must be scalars, got {kind}")

    def matches(self, view: Mapping[str, Any]) -> bool:
        if self.key not in view:
            return False
        actual = view[self.key]
        want = self.value
        if isinstance(actual, str) and self.text is not None:
            want = self.text
        if self.op == "contains":
            if isinstance(actual, str):
                return isinstance(want, str) and want in actual
            if isinstance(actual, (list, tuple)):
                return any(_equal(item, want) for item in actual)
            return False
        if self.op == "=":
            return _equal(actual, want)
        if self.op == "!=":
            return not _equal(actual, want)
        if not _comparable(actual, want):
            return False
        return {
            "<": actual < want,
            "<=": actual <= want,
            ">": actual > want,
            ">=": actual >= want,
        }[self.op]


def _numeric(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _equal(a: Any, b: Any) -> bool:
    if _numeric(a) and _numeric(b):
        return a == b
    return kind_of(a) == kind_of(b) and a == b


def _comparable(a: Any, b: Any) -> bool:
    return (_numeric(a) and _numeric(b)) or (isinstance(a, str) and isinstance(b, str))


def parse_filter_value(text: str) -> Any:
    try:
        value = yaml.safe_load(text) if text != "" else ""
    except yaml.YAMLError:
        return text
    return value if kind_of(value) in ("int", "float", "str", "bool") else text


def parse_predicate(text: str) -> Predicate:
    """Parse ``key<op>value``; ops are = != < <= > >= and ``~`` or ``contains``."""
    m = _CONTAINS_RE.match(text) or _FILTER_RE.match(text)
    if m is None:
        raise FilterError(f"cannot parse filter {text!r}; expected key<op>value")
    key, op, value = m.groups()
    if value[:1] in tuple("=<>!~≠≤≥"):
        raise FilterError(f"unknown operator {op + value[0]!r} in filter {text!r}")
    return Predicate(key, op, parse_filter_value(value), value)


@dataclass(frozen=True)
class RecordFilter:
    predicates: tuple[Predicate, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "predicates", tuple(self.predicates))

    @classmethod
    def parse(cls, texts: Iterable[str]) -> "RecordFilter":
        return cls(tuple(parse_predicate(t) for t in texts))

    def matches(self, view: Mapping[str, Any]) -> bool:
        return all(p.matches(view) for p in self.predicates)


# --- archive ---------------------------------------------------------------


def _b32(n: int) -> str:
    chars = []
    for _ in range(6):
        n, r = divmod(n, 32)
        chars.append(_B32HEX[r])
    return "".join(reversed(chars))


def _unb32(s: str) -> int:
    n = 0
    for ch in s:
        n = n * 32 + _B32HEX.index(ch)
    return n


def _write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())


def _json(data: Any) -> bytes:
    return (json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode()


class Archive:
    """Directory-backed record store with checksummed manifests."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.records_dir = self.root / "records"
        self._tmp = self.root / "tmp"
        self.records_dir.mkdir(parents=True, exist_ok=True)
        self._tmp.mkdir(parents=True, exist_ok=True)
        self._file_lock = filelock.FileLock(str(self.root / ".lock"))
        self._thread_lock = threading.Lock()
        self._rng = random.SystemRandom()

    @classmethod
    def from_env(cls, root: str | os.PathLike | None = None) -> "Archive":
        root = root or os.environ.get("BENCHFORGE_ARCHIVE")
        if not root:
            raise ArchiveError("no archive root: pass --archive-root or set BENCHFORGE_ARCHIVE")
        return cls(root)

    # ids are allocated under a lock so that they sort in creation order
    def _new_id(self) -> str:
        with self._thread_lock, self._file_lock:
            last_path = self.root / ".last_id"
            last = last_path.read_text().strip() if last_path.exists() else ""
            while True:
                stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
                last_stamp, _, last_suffix = last.partition("-")
                if stamp < last_stamp:
                    stamp = last_stamp
                if stamp == last_stamp:
                    n = _unb32(last_suffix) + self._rng.randint(1, _SUFFIX_STEP)
                    if n >= _SUFFIX_SPACE:
                        time.sleep(0.05)
                        continue
                else:
                    n = self._rng.randrange(_SUFFIX_SPACE // 2)
                record_id = f"{stamp}-{_b32(n)}"
                last = record_id
                if not (self.records_dir / record_id).exists():
                    break
            last_path.write_text(record_id + "\n")
            return record_id

    def _manifest(self, record_id: str, rec: BenchmarkRecord, blobs: Mapping[str, bytes]) -> bytes:
        lines = [
            f"# record_id: {record_id}",
            f"# run_id: {rec.run_id}",
            f"# requester: {rec.requester}",
            f"# config: {rec.config_name}",
            f"# machine: {rec.metadata.machine}",
            f"# created: {rec.metadata.timestamp}",
            f"# combination: {json.dumps(dict(sorted(rec.combination.assignments.items())))}",
        ]
        for rel in sorted(blobs):
            data = blobs[rel]
            lines.append(f"{rel}\t{len(data)}\t{sha256(data).hexdigest()}")
        return ("\n".join(lines) + "\n").encode()

    @staticmethod
    def _blobs(rec: BenchmarkRecord, record_id: str) -> dict[str, bytes]:
        blobs = {
            "record.json": _json(
                {
                    "record_id": record_id,
                    "run_id": rec.run_id,
                    "combination": rec.combination.to_dict(),
                    "requester": rec.requester,
                    "config_name": rec.config_name,
                }
            ),
            "metadata.json": _json(rec.metadata.to_dict()),
            "config.json": rec.resolved_config.encode(),
            "annotations.json": _json(dict(rec.annotations)),
        }
        for name, data in rec.raw_files.items():
            blobs[f"raw/{name}"] = bytes(data)
        return blobs

    def store(self, rec: BenchmarkRecord) -> str:
        """Persist a record durably and return its new id."""
        record_id = self._new_id()
        blobs = self._blobs(rec, record_id)
        scratch = self._tmp / f"{record_id}.partial"
        try:
            for rel, data in blobs.items():
                _write(scratch / rel, data)
            _write(scratch / "manifest.txt", self._manifest(record_id, rec, blobs))
            os.rename(scratch, self.records_dir / record_id)
        except OSError as exc:
            shutil.rmtree(scratch, ignore_errors=True)
            raise ArchiveError(f"cannot store record: {exc}") from exc
        return record_id

    def _dir(self, record_id: str) -> Path:
        if not ID_PATTERN.match(record_id or ""):
            raise ArchiveError(f"malformed record id {record_id!r}")
        path = self.records_dir / record_id
        if not path.is_dir():
            raise ArchiveError(f"unknown record id {record_id!r}")
        return path

    def _read_manifest(self, path: Path) -> dict[str, tuple[int, str]]:
        entries = {}
        for line in (path / "manifest.txt").read_text(encoding="utf-8").splitlines():
            if not line or line.startswith("#"):
                continue
            rel, length, digest = line.rsplit("\t", 2)
            entries[rel] = (int(length), digest)
        return entries

    def _read_verified(self, record_id: str) -> dict[str, bytes]:
        path = self._dir(record_id)
        blobs = {}
        for rel, (length, digest) in self._read_manifest(path).items():
            try:
                data = (path / rel).read_bytes()
            except OSError as exc:
                raise ChecksumError(f"{record_id}: blob {rel} unreadable: {exc}") from exc
            if len(data) != length or sha256(data).hexdigest() != digest:
                raise ChecksumError(f"{record_id}: checksum mismatch for {rel}")
            blobs[rel] = data
        return blobs

    @staticmethod
    def _assemble(blobs: Mapping[str, bytes]) -> BenchmarkRecord:
        info = json.loads(blobs["record.json"])
        return BenchmarkRecord(
            record_id=info["record_id"],
            run_id=info["run_id"],
            combination=ParameterCombination.from_dict(info["combination"]),
            requester=info["requester"],
            config_name=info["config_name"],
            resolved_config=blobs["config.json"].decode(),
            metadata=MetadataSnapshot.from_dict(json.loads(blobs["metadata.json"])),
            annotations=json.loads(blobs["annotations.json"]),
            raw_files={rel[4:]: data for rel, data in blobs.items() if rel.startswith("raw/")},
        )

    def fetch(self, record_id: str) -> BenchmarkRecord:
        """Load a record, verifying every blob against its manifest checksum."""
        return self._assemble(self._read_verified(record_id))

    def ids(self) -> list[str]:
        return sorted(p.name for p in self.records_dir.iterdir() if ID_PATTERN.match(p.name))

    def _light(self, record_id: str) -> BenchmarkRecord:
        path = self._dir(record_id)
        blobs = {
            name: (path / name).read_bytes()
            for name in ("record.json", "metadata.json", "config.json", "annotations.json")
        }
        return self._assemble(blobs)

    def records(self) -> Iterable[BenchmarkRecord]:
        for record_id in self.ids():
            yield self._light(record_id)

    def query(self, f: RecordFilter | Iterable[str] = RecordFilter()) -> list[str]:
        """Ids of records satisfying every predicate, in id order."""
        if not isinstance(f, RecordFilter):
            f = RecordFilter.parse(f)
        return [rec.record_id for rec in self.records() if f.matches(rec.view())]

    def annotate(self, record_id: str, key: str, value: Any) -> BenchmarkRecord:
        """Add or overwrite an annotation; raw files and metadata stay untouched."""
        if not key or any(not p for p in key.split(".")):
            raise ArchiveError(f"invalid annotation key {key!r}")
        if key.split(".")[0] in RESERVED_ANNOTATION_ROOTS:
            raise ArchiveError(f"annotation key {key!r} collides with a reserved namespace")
        if kind_of(value) not in ("int", "float", "str", "bool", "list"):
            raise ArchiveError(f"annotation values must be scalars or lists, got {kind_of(value)}")
        path = self._dir(record_id)
        lock = filelock.FileLock(str(path / ".annotate.lock"))
        with lock:
            blobs = self._read_verified(record_id)
            annotations = json.loads(blobs["annotations.json"])
            annotations[key] = value
            blobs["annotations.json"] = _json(annotations)
            rec = self._assemble(blobs)
            tmp = path / "annotations.json.tmp"
            _write(tmp, blobs["annotations.json"])
            manifest = self._manifest(record_id, rec, {k: v for k, v in blobs.items()})
            _write(path / "manifest.txt.tmp", manifest)
            os.replace(tmp, path / "annotations.json")
            os.replace(path / "manifest.txt.tmp", path / "manifest.txt")
        return rec
