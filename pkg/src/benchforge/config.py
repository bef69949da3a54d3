"""Hierarchical benchmark configurations.

A configuration is a chain of YAML documents. Each document may name a
parent through the reserved ``extends`` key; resolving a document merges the
chain from the base down, so that every child overrides selected keys and
inherits the rest. Nested maps merge key by key, lists and scalars replace
wholesale, and the ``__delete__`` sentinel removes an inherited key.

Parameter axes live under ``experiment.axes``; their Cartesian product is the
parameter space a pipeline fans out over.
"""

from __future__ import annotations

import io
import itertools
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Iterator, Mapping

import yaml

from benchforge.errors import ConfigError, SchemaError

DELETE = "__delete__"
RESERVED_KEYS = ("name", "extends", "roles")
ROLES = ("machine", "platform", "software", "model", "user")
AXES_PREFIX = "experiment.axes."
OVERRIDE_SOURCE = "request-override"

DEFAULT_MAX_DEPTH = 16
DEFAULT_MAX_AXES = 8


def kind_of(value: Any) -> str:
    """Return the value-kind name used for schema and merge checks."""
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, str):
        return "str"
    if isinstance(value, (list, tuple)):
        return "list"
    if isinstance(value, Mapping):
        return "map"
    return type(value).__name__


def render_scalar(value: Any) -> str:
    """Canonical text form of a scalar, used for template substitution."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return value
    raise ConfigError(f"cannot render value of kind {kind_of(value)}")


def _check_key(key: Any, where: str) -> str:
    if not isinstance(key, str) or not key:
        raise ConfigError(f"{where}: keys must be non-empty strings, got {key!r}")
    if any(not part for part in key.split(".")):
        raise ConfigError(f"{where}: malformed key path {key!r}")
    return key


def _check_value(value: Any, where: str) -> Any:
    kind = kind_of(value)
    if kind in ("bool", "int", "float", "str"):
        return value
    if kind == "list":
        items = list(value)
        for item in items:
            if kind_of(item) not in ("bool", "int", "float", "str"):
                raise ConfigError(f"{where}: lists may only hold scalars")
        return items
    if kind == "map":
        return value
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _nest(raw: Mapping[str, Any], where: str) -> dict[str, Any]:
    """Expand dotted keys into nested maps, rejecting duplicate key paths."""
    out: dict[str, Any] = {}
    for key, value in raw.items():
        _check_key(key, where)
        parts = key.split(".")
        node = out
        for i, part in enumerate(parts[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{where}: duplicate key path {'.'.join(parts[: i + 1])!r}")
            node = child
        last = parts[-1]
        path = f"{where}:{key}"
        if isinstance(value, Mapping):
            sub = _nest(value, f"{where}:{key}")
            existing = node.get(last)
            if existing is None:
                node[last] = sub
            elif isinstance(existing, dict):
                _merge_disjoint(existing, sub, key, where)
            else:
                raise ConfigError(f"{where}: duplicate key path {key!r}")
        else:
            if last in node:
                raise ConfigError(f"{where}: duplicate key path {key!r}")
            node[last] = _check_value(value, path)
    return out


def _merge_disjoint(dst: dict, src: dict, prefix: str, where: str) -> None:
    for key, value in src.items():
        if key not in dst:
            dst[key] = value
        elif isinstance(dst[key], dict) and isinstance(value, dict):
            _merge_disjoint(dst[key], value, f"{prefix}.{key}", where)
        else:
            raise ConfigError(f"{where}: duplicate key path {prefix}.{key!r}")


class _StrictLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader: yaml.SafeLoader, node: yaml.MappingNode, deep: bool = False):
    loader.flatten_mapping(node)
    mapping = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in mapping:
            raise ConfigError(
                f"duplicate key path {key!r} (line {key_node.start_mark.line + 1})"
            )
        mapping[key] = loader.construct_object(value_node, deep=deep)
    return mapping


_StrictLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping
)


def flatten(tree: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    """Flatten a nested map into ``{dotted.path: leaf}``."""
    out: dict[str, Any] = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(flatten(value, path + "."))
        else:
            out[path] = value
    return out


def _freeze(value: Any) -> Any:
    if isinstance(value, Mapping):
        return MappingProxyType({k: _freeze(v) for k, v in value.items()})
    if isinstance(value, list):
        return tuple(value)
    return value


def _thaw(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {k: _thaw(v) for k, v in value.items()}
    if isinstance(value, tuple):
        return list(value)
    return value


@dataclass(frozen=True)
class ConfigDocument:
    name: str
    parent: str | None = None
    sections: Mapping[str, Any] = field(default_factory=dict)
    roles: Mapping[str, str] = field(default_factory=dict)
    path: Path | None = None

    def __post_init__(self):
        if not self.name:
            raise ConfigError("document name must be non-empty")
        for section, role in self.roles.items():
            if role not in ROLES:
                raise ConfigError(f"{self.name}: unknown role {role!r} for section {section!r}")
        object.__setattr__(self, "sections", _freeze(_nest(_thaw(self.sections), self.name)))
        object.__setattr__(self, "roles", MappingProxyType(dict(self.roles)))

    def tree(self) -> dict[str, Any]:
        """A mutable deep copy of the section tree."""
        return _thaw(self.sections)

    def entries(self) -> dict[str, Any]:
        return flatten(self.tree())


def parse_document(
    data: Mapping[str, Any], *, default_name: str | None = None, path: Path | None = None
) -> ConfigDocument:
    """Build a document from an already-parsed mapping."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or default_name}: top level must be a mapping")
    data = dict(data)
    name = data.pop("name", default_name)
    if not isinstance(name, str) or not name:
        raise ConfigError(f"{path}: document needs a non-empty 'name'")
    parent = data.pop("extends", None)
    if parent is not None and (not isinstance(parent, str) or not parent):
        raise ConfigError(f"{name}: 'extends' must be a document name or path")
    roles = data.pop("roles", {}) or {}
    if not isinstance(roles, Mapping):
        raise ConfigError(f"{name}: 'roles' must map section names to roles")
    return ConfigDocument(name=name, parent=parent, sections=data, roles=roles, path=path)


def load_document(source: str | os.PathLike | bytes | io.IOBase) -> ConfigDocument:
    """Load one YAML config document from a path, bytes, or a binary/text stream.

    The parent, if declared, is recorded but not loaded.
    """
    path = None
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
    elif isinstance(source, bytes):
        text = source.decode("utf-8")
    else:
        text = source.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")
    where = str(path) if path else "<stream>"
    try:
        data = yaml.load(text, Loader=_StrictLoader)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{where}: parse error: {exc}") from exc
    if data is None or data == {}:
        raise ConfigError(f"{where}: empty document")
    return parse_document(data, default_name=path.stem if path else None, path=path)


class DocumentRepository:
    """Looks up config documents by name or by path.

    Names resolve to ``<root>/<name>.yaml`` (or ``.yml``); references that
    look like paths resolve relative to the referring document.
    """

    def __init__(self, root: str | os.PathLike | None = None, documents: Iterable[ConfigDocument] = ()):
        self.root = Path(root) if root is not None else None
        self._docs: dict[str, ConfigDocument] = {}
        for doc in documents:
            self.add(doc)

    @classmethod
    def from_env(cls, root: str | os.PathLike | None = None) -> "DocumentRepository":
        root = root or os.environ.get("BENCHFORGE_CONFIG_ROOT")
        return cls(root)

    def add(self, doc: ConfigDocument) -> None:
        self._docs[doc.name] = doc

    def get(self, ref: str, relative_to: ConfigDocument | None = None) -> ConfigDocument:
        if ref in self._docs:
            return self._docs[ref]
        candidates: list[Path] = []
        looks_like_path = "/" in ref or ref.endswith((".yaml", ".yml"))
        if looks_like_path:
            p = Path(ref)
            if not p.is_absolute() and relative_to is not None and relative_to.path is not None:
                candidates.append(relative_to.path.parent / p)
            if not p.is_absolute() and self.root is not None:
                candidates.append(self.root / p)
            candidates.append(p)
        else:
            dirs = []
            if relative_to is not None and relative_to.path is not None:
                dirs.append(relative_to.path.parent)
            if self.root is not None:
                dirs.append(self.root)
            for d in dirs:
                candidates += [d / f"{ref}.yaml", d / f"{ref}.yml"]
        for cand in candidates:
            if cand.is_file():
                doc = load_document(cand)
                self._docs.setdefault(ref, doc)
                return doc
        raise ConfigError(f"missing ancestor: no document {ref!r} in repository")

    def load(self, ref: str | os.PathLike) -> ConfigDocument:
        """Load the document a user named on the command line."""
        p = Path(ref)
        if p.is_file():
            doc = load_document(p)
            self._docs.setdefault(doc.name, doc)
            return doc
        return self.get(str(ref))


@dataclass(frozen=True)
class Schema:
    """Required keys and expected value kinds for a resolved config."""

    schema_id: str
    required: frozenset[str] = frozenset()
    kinds: Mapping[str, str] = field(default_factory=dict)

    def validate(self, entries: Mapping[str, Any], axes: Mapping[str, list]) -> None:
        for key in sorted(self.required):
            if key not in entries and key not in axes:
                raise SchemaError(f"schema {self.schema_id}: missing required key {key!r}")
        for key, kind in self.kinds.items():
            if key in entries and kind_of(entries[key]) != kind:
                raise SchemaError(
                    f"schema {self.schema_id}: {key!r} must be {kind}, "
                    f"got {kind_of(entries[key])}"
                )
            for value in axes.get(key, ()):
                if kind_of(value) != kind:
                    raise SchemaError(
                        f"schema {self.schema_id}: axis {key!r} values must be {kind}"
                    )


ANY_SCHEMA = Schema("any")
DEFAULT_SCHEMA = Schema(
    "benchforge/v1",
    required=frozenset({"run.nodes"}),
    kinds={"run.nodes": "int", "run.seed": "int"},
)


@dataclass(frozen=True)
class ResolvedConfig:
    """A fully merged config: flat dotted entries plus per-key provenance."""

    entries: Mapping[str, Any]
    provenance: Mapping[str, str]
    schema_id: str
    name: str = ""
    chain: tuple[str, ...] = ()
    roles: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entries", MappingProxyType({k: _freeze(v) for k, v in self.entries.items()}))
        object.__setattr__(self, "provenance", MappingProxyType(dict(self.provenance)))
        object.__setattr__(self, "roles", MappingProxyType(dict(self.roles)))
        object.__setattr__(self, "chain", tuple(self.chain))

    def __getitem__(self, key: str) -> Any:
        return self.entries[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.entries.get(key, default)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def axes(self) -> dict[str, list]:
        """Axis key path (without the ``experiment.axes.`` prefix) to its values."""
        return {
            key[len(AXES_PREFIX):]: list(value)
            for key, value in self.entries.items()
            if key.startswith(AXES_PREFIX) and isinstance(value, tuple)
        }

    def role_of(self, key: str) -> str | None:
        return self.roles.get(key.split(".", 1)[0])

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "schema_id": self.schema_id,
            "chain": list(self.chain),
            "roles": dict(sorted(self.roles.items())),
            "entries": {k: _thaw(v) for k, v in sorted(self.entries.items())},
            "provenance": dict(sorted(self.provenance.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ResolvedConfig":
        return cls(
            entries=data["entries"],
            provenance=data["provenance"],
            schema_id=data["schema_id"],
            name=data.get("name", ""),
            chain=tuple(data.get("chain", ())),
            roles=data.get("roles", {}),
        )

    @classmethod
    def from_json(cls, text: str | bytes) -> "ResolvedConfig":
        return cls.from_dict(json.loads(text))


def _chain(doc: ConfigDocument, repo: DocumentRepository | None, max_depth: int) -> list[ConfigDocument]:
    """Return the inheritance chain, base first."""
    chain = [doc]
    seen = {doc.name}
    current = doc
    while current.parent is not None:
        if repo is None:
            raise ConfigError(f"missing ancestor {current.parent!r}: no repository given")
        parent = repo.get(current.parent, relative_to=current)
        if parent.name in seen:
            names = " -> ".join(d.name for d in reversed(chain))
            raise ConfigError(f"inheritance cycle: {names} -> {parent.name}")
        seen.add(parent.name)
        chain.append(parent)
        if len(chain) > max_depth:
            raise ConfigError(f"inheritance depth limit {max_depth} exceeded at {doc.name!r}")
        current = parent
    chain.reverse()
    return chain


def _merge_layer(tree: dict, prov: dict, layer: Mapping[str, Any], source: str, prefix: str = "") -> None:
    for key, value in layer.items():
        path = f"{prefix}{key}"
        if isinstance(value, str) and value == DELETE:
            tree.pop(key, None)
            for p in [p for p in prov if p == path or p.startswith(path + ".")]:
                del prov[p]
            continue
        existing = tree.get(key)
        if isinstance(value, Mapping):
            if not isinstance(existing, dict):
                if existing is not None:
                    raise SchemaError(
                        f"{source}: {path!r} overrides a {kind_of(existing)} with a map"
                    )
                tree[key] = {}
            _merge_layer(tree[key], prov, value, source, path + ".")
            continue
        if existing is not None and kind_of(existing) != kind_of(value):
            raise SchemaError(
                f"{source}: {path!r} overrides a {kind_of(existing)} with a {kind_of(value)}"
            )
        tree[key] = list(value) if isinstance(value, (list, tuple)) else value
        prov[path] = source


def _prune_empty(tree: dict) -> None:
    for key in list(tree):
        if isinstance(tree[key], dict):
            _prune_empty(tree[key])
            if not tree[key]:
                del tree[key]


def resolve(
    doc: ConfigDocument,
    repo: DocumentRepository | None = None,
    schema: Schema = ANY_SCHEMA,
    *,
    overrides: Mapping[str, Any] | None = None,
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> ResolvedConfig:
    """Merge ``doc`` with all its ancestors and validate against ``schema``.

    ``overrides`` is applied as a final layer whose provenance is
    ``"request-override"``.
    """
    chain = _chain(doc, repo, max_depth)
    tree: dict[str, Any] = {}
    prov: dict[str, str] = {}
    roles: dict[str, str] = {}
    for layer in chain:
        _merge_layer(tree, prov, layer.tree(), layer.name)
        roles.update(layer.roles)
    if overrides:
        _merge_layer(tree, prov, _nest(dict(overrides), OVERRIDE_SOURCE), OVERRIDE_SOURCE)
    _prune_empty(tree)
    entries = flatten(tree)
    provenance = {key: prov[key] for key in entries}
    axes = {
        key[len(AXES_PREFIX):]: value
        for key, value in entries.items()
        if key.startswith(AXES_PREFIX) and isinstance(value, list)
    }
    schema.validate(entries, axes)
    return ResolvedConfig(
        entries=entries,
        provenance=provenance,
        schema_id=schema.schema_id,
        name=doc.name,
        chain=tuple(d.name for d in chain) + ((OVERRIDE_SOURCE,) if overrides else ()),
        roles=roles,
    )


@dataclass(frozen=True)
class ParameterAxis:
    key_path: str
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values:
            raise ConfigError(f"axis {self.key_path!r} has no values")
        kinds = {kind_of(v) for v in self.values}
        if len(kinds) != 1:
            raise ConfigError(f"axis {self.key_path!r} mixes value kinds {sorted(kinds)}")


@dataclass(frozen=True)
class ParameterCombination:
    assignments: Mapping[str, Any]
    ordinal: int

    def __post_init__(self):
        object.__setattr__(self, "assignments", MappingProxyType(dict(self.assignments)))

    def to_dict(self) -> dict[str, Any]:
        return {"ordinal": self.ordinal, "assignments": dict(sorted(self.assignments.items()))}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ParameterCombination":
        return cls(assignments=data["assignments"], ordinal=data["ordinal"])


def parameter_axes(rc: ResolvedConfig) -> list[ParameterAxis]:
    """Axes of the parameter space, sorted by key path."""
    return [ParameterAxis(key, tuple(values)) for key, values in sorted(rc.axes().items())]


def iter_combinations(axes: list[ParameterAxis]) -> Iterator[ParameterCombination]:
    keys = [axis.key_path for axis in axes]
    for ordinal, values in enumerate(itertools.product(*(axis.values for axis in axes))):
        yield ParameterCombination(dict(zip(keys, values)), ordinal)


def expand_parameter_space(rc: ResolvedConfig, *, max_axes: int = DEFAULT_MAX_AXES) -> list[ParameterCombination]:
    """Cartesian product of all axes: lexicographic by key path, last axis fastest."""
    for key, value in rc.entries.items():
        if key.startswith(AXES_PREFIX) and isinstance(value, tuple) and not value:
            raise ConfigError(f"axis {key[len(AXES_PREFIX):]!r} has no values")
    axes = parameter_axes(rc)
    if len(axes) > max_axes:
        raise ConfigError(f"{len(axes)} axes exceed the limit of {max_axes}")
    return list(iter_combinations(axes))


def diff(rc1: ResolvedConfig, rc2: ResolvedConfig) -> list[tuple[str, Any, Any]]:
    """Keys whose values differ, as ``(key, left, right)``; absent sides are ``None``."""
    if rc1.schema_id != rc2.schema_id:
        raise SchemaError(f"schema mismatch: {rc1.schema_id!r} vs {rc2.schema_id!r}")
    out = []
    for key in sorted(set(rc1.entries) | set(rc2.entries)):
        left = _thaw(rc1.entries.get(key))
        right = _thaw(rc2.entries.get(key))
        if left != right or kind_of(left) != kind_of(right):
            out.append((key, left, right))
    return out
