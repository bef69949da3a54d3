"""Layered pipeline templates.

Four layers specialize a benchmark pipeline:

* a workflow template fixes the ordered stage names;
* a platform supplies one skeleton per stage, with ``@block <name>`` slot
  lines marking where machine-specific blocks go;
* a machine supplies named blocks, whose bodies are literal command lines,
  ``@impl <name>`` references to implementation templates, or nested
  ``@block <name>`` references;
* implementation templates hold the concrete command lines.

Composing the layers yields a :class:`PipelineBlueprint` whose commands may
still contain ``{{dotted.key}}`` placeholders; instantiating it for one
parameter combination yields a fully literal :class:`PipelineInstance`.

On disk::

    templates/workflow/<name>.yaml          stages: [...]
    templates/platform/<platform>/<stage>.sh
    templates/machine/<machine>/<block>.sh
    templates/impl/<name>.sh
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Sequence, Union

import yaml

from benchforge.config import (
    ParameterAxis,
    ParameterCombination,
    ResolvedConfig,
    kind_of,
    render_scalar,
)
from benchforge.errors import TemplateError

DEFAULT_STAGES = ("Preparation", "Build", "Execution", "Transfer", "Annotation", "Analyze", "Plot")

PLACEHOLDER = re.compile(r"\{\{([A-Za-z0-9_\-]+(?:\.[A-Za-z0-9_\-]+)*)\}\}")
_BRACES = re.compile(r"\{\{|\}\}")
_DIRECTIVE = re.compile(r"^\s*@(block|impl)\s+(\S.*?)\s*$")


def placeholders(text: str) -> list[str]:
    """Key paths referenced by ``text``; raises on malformed brace pairs."""
    keys = PLACEHOLDER.findall(text)
    if len(_BRACES.findall(PLACEHOLDER.sub("", text))):
        raise TemplateError(f"malformed placeholder in {text!r}")
    return keys


@dataclass(frozen=True)
class Slot:
    """A slot marker in a platform skeleton, filled by a machine block."""

    name: str


@dataclass(frozen=True)
class BlockRef:
    name: str


@dataclass(frozen=True)
class ImplRef:
    name: str


Line = Union[str, Slot]
BlockLine = Union[str, BlockRef, ImplRef]


@dataclass(frozen=True)
class WorkflowTemplate:
    name: str
    stages: tuple[str, ...] = DEFAULT_STAGES

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise TemplateError(f"workflow {self.name!r} has no stages")
        if any(not s for s in self.stages) or len(set(self.stages)) != len(self.stages):
            raise TemplateError(f"workflow {self.name!r}: stage names must be unique and non-empty")


@dataclass(frozen=True)
class PlatformStageTemplate:
    stage: str
    skeleton: tuple[Line, ...]

    def __post_init__(self):
        object.__setattr__(self, "skeleton", tuple(self.skeleton))
        if not self.skeleton:
            raise TemplateError(f"platform skeleton for stage {self.stage!r} is empty")
        for line in self.skeleton:
            if isinstance(line, Slot) and not line.name:
                raise TemplateError(f"unnamed slot in stage {self.stage!r}")
            if isinstance(line, str):
                placeholders(line)


@dataclass(frozen=True)
class MachineBlock:
    name: str
    body: tuple[BlockLine, ...]

    def __post_init__(self):
        object.__setattr__(self, "body", tuple(self.body))
        for line in self.body:
            if isinstance(line, str):
                placeholders(line)


@dataclass(frozen=True)
class ImplementationTemplate:
    name: str
    commands: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "commands", tuple(self.commands))
        for command in self.commands:
            placeholders(command)


@dataclass(frozen=True)
class PipelineBlueprint:
    workflow: WorkflowTemplate
    per_stage_commands: Mapping[str, tuple[str, ...]]
    referenced_keys: frozenset[str] = frozenset()

    def __post_init__(self):
        cmds = {stage: tuple(self.per_stage_commands[stage]) for stage in self.workflow.stages}
        object.__setattr__(self, "per_stage_commands", MappingProxyType(cmds))
        keys = frozenset(k for stage in cmds for k in self.stage_keys(stage))
        object.__setattr__(self, "referenced_keys", keys)

    @property
    def stages(self) -> tuple[str, ...]:
        return self.workflow.stages

    def stage_keys(self, stage: str) -> set[str]:
        return {k for command in self.per_stage_commands[stage] for k in placeholders(command)}


@dataclass(frozen=True)
class PipelineInstance:
    blueprint: PipelineBlueprint
    combination: ParameterCombination
    per_stage_commands: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        object.__setattr__(
            self,
            "per_stage_commands",
            MappingProxyType({s: tuple(c) for s, c in self.per_stage_commands.items()}),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "workflow": self.blueprint.workflow.name,
            "combination": self.combination.to_dict(),
            "stages": [
                {"stage": stage, "commands": list(self.per_stage_commands[stage])}
                for stage in self.blueprint.stages
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _index(items: Iterable[Any], attr: str, what: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in items:
        key = getattr(item, attr)
        if key in out:
            raise TemplateError(f"duplicate {what} {key!r}")
        out[key] = item
    return out


def compose_blueprint(
    wf: WorkflowTemplate,
    platform: Iterable[PlatformStageTemplate],
    machine: Iterable[MachineBlock],
    impls: Iterable[ImplementationTemplate],
) -> PipelineBlueprint:
    """Fill the platform skeletons with machine blocks and implementation commands."""
    stages = _index(platform, "stage", "platform stage template")
    blocks = _index(machine, "name", "machine block")
    impl_map = _index(impls, "name", "implementation template")

    def expand_block(name: str, stack: tuple[str, ...]) -> list[str]:
        if name in stack:
            raise TemplateError(f"block reference cycle: {' -> '.join(stack + (name,))}")
        if name not in blocks:
            raise TemplateError(f"unresolved slot or block reference {name!r}")
        out: list[str] = []
        for line in blocks[name].body:
            if isinstance(line, BlockRef):
                out += expand_block(line.name, stack + (name,))
            elif isinstance(line, ImplRef):
                if line.name not in impl_map:
                    raise TemplateError(
                        f"block {name!r}: unresolved implementation reference {line.name!r}"
                    )
                out += impl_map[line.name].commands
            else:
                out.append(line)
        return out

    per_stage: dict[str, tuple[str, ...]] = {}
    for stage in wf.stages:
        if stage not in stages:
            raise TemplateError(f"no platform template for stage {stage!r}")
        commands: list[str] = []
        for line in stages[stage].skeleton:
            if isinstance(line, Slot):
                commands += expand_block(line.name, ())
            else:
                commands.append(line)
        per_stage[stage] = tuple(commands)
    return PipelineBlueprint(wf, per_stage)


def _lookup(key: str, rc: ResolvedConfig | Mapping[str, Any], combo: ParameterCombination) -> Any:
    if key in combo.assignments:
        return combo.assignments[key]
    entries = rc.entries if isinstance(rc, ResolvedConfig) else rc
    if key in entries:
        return entries[key]
    raise TemplateError(f"unresolved placeholder {{{{{key}}}}}")


def substitute(command: str, rc: ResolvedConfig | Mapping[str, Any], combo: ParameterCombination) -> str:
    placeholders(command)

    def repl(match: re.Match) -> str:
        key = match.group(1)
        value = _lookup(key, rc, combo)
        if kind_of(value) in ("list", "map"):
            raise TemplateError(f"placeholder {{{{{key}}}}} resolves to a {kind_of(value)}")
        return render_scalar(value)

    return PLACEHOLDER.sub(repl, command)


def instantiate(bp: PipelineBlueprint, rc: ResolvedConfig, combo: ParameterCombination) -> PipelineInstance:
    """Substitute every placeholder; combination values shadow config values."""
    per_stage = {
        stage: tuple(substitute(c, rc, combo) for c in bp.per_stage_commands[stage])
        for stage in bp.stages
    }
    return PipelineInstance(bp, combo, per_stage)


def plan_stage_split(
    bp: PipelineBlueprint, axes: Sequence[ParameterAxis | str]
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Split stages into the longest axis-independent prefix and the rest."""
    axis_keys = {a.key_path if isinstance(a, ParameterAxis) else a for a in axes}
    stages = bp.stages
    cut = len(stages)
    for i, stage in enumerate(stages):
        if bp.stage_keys(stage) & axis_keys:
            cut = i
            break
    return stages[:cut], stages[cut:]


# --- file loading ---------------------------------------------------------


def _read_lines(path: Path) -> list[str]:
    lines = []
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.rstrip()
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        lines.append(line.strip())
    return lines


def _parse_skeleton(path: Path) -> PlatformStageTemplate:
    skeleton: list[Line] = []
    for line in _read_lines(path):
        m = _DIRECTIVE.match(line)
        if m is None:
            skeleton.append(line)
        elif m.group(1) == "block":
            skeleton.append(Slot(m.group(2)))
        else:
            raise TemplateError(f"{path}: platform skeletons may only use @block slots")
    return PlatformStageTemplate(path.stem, skeleton)


def _parse_block(path: Path) -> MachineBlock:
    body: list[BlockLine] = []
    for line in _read_lines(path):
        m = _DIRECTIVE.match(line)
        if m is None:
            body.append(line)
        elif m.group(1) == "block":
            body.append(BlockRef(m.group(2)))
        else:
            body.append(ImplRef(m.group(2)))
    return MachineBlock(path.stem, body)


@dataclass
class TemplateLibrary:
    """All template layers found under one ``templates/`` root."""

    workflows: dict[str, WorkflowTemplate] = field(default_factory=dict)
    platforms: dict[str, list[PlatformStageTemplate]] = field(default_factory=dict)
    machines: dict[str, list[MachineBlock]] = field(default_factory=dict)
    impls: list[ImplementationTemplate] = field(default_factory=list)

    @classmethod
    def load(cls, root: str | Path) -> "TemplateLibrary":
        root = Path(root)
        if not root.is_dir():
            raise TemplateError(f"template root {root} does not exist")
        lib = cls()
        for path in sorted((root / "workflow").glob("*.y*ml")):
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
            name = data.get("name", path.stem)
            lib.workflows[name] = WorkflowTemplate(name, tuple(data.get("stages", DEFAULT_STAGES)))
        for pdir in sorted(p for p in (root / "platform").glob("*") if p.is_dir()):
            lib.platforms[pdir.name] = [_parse_skeleton(p) for p in sorted(pdir.glob("*.sh"))]
        for mdir in sorted(p for p in (root / "machine").glob("*") if p.is_dir()):
            lib.machines[mdir.name] = [_parse_block(p) for p in sorted(mdir.glob("*.sh"))]
        for path in sorted((root / "impl").glob("*.sh")):
            lib.impls.append(ImplementationTemplate(path.stem, _read_lines(path)))
        return lib

    def blueprint(self, workflow: str, platform: str, machine: str) -> PipelineBlueprint:
        if workflow not in self.workflows:
            raise TemplateError(f"unknown workflow template {workflow!r}")
        if platform not in self.platforms:
            raise TemplateError(f"unknown platform {platform!r}")
        if machine not in self.machines:
            raise TemplateError(f"no machine templates for {machine!r}")
        return compose_blueprint(
            self.workflows[workflow], self.platforms[platform], self.machines[machine], self.impls
        )
