import itertools
import re

import pytest

from benchforge import DEMO_DIR
from benchforge.config import ConfigDocument, ParameterAxis, ParameterCombination, expand_parameter_space, parameter_axes, resolve
from benchforge.errors import TemplateError
from benchforge.templates import (
    DEFAULT_STAGES,
    BlockRef,
    ImplRef,
    ImplementationTemplate,
    MachineBlock,
    PlatformStageTemplate,
    Slot,
    TemplateLibrary,
    WorkflowTemplate,
    compose_blueprint,
    instantiate,
    plan_stage_split,
    placeholders,
)

RESIDUE = re.compile(r"\{\{|\}\}")


def test_single_substitution():
    wf = WorkflowTemplate("w", ["Build"])
    bp = compose_blueprint(
        wf,
        [PlatformStageTemplate("Build", [Slot("load environment"), "make"])],
        [MachineBlock("load environment", ["module load {{env.stack}}"])],
        [],
    )
    assert bp.per_stage_commands["Build"] == ("module load {{env.stack}}", "make")
    assert bp.referenced_keys == {"env.stack"}


def test_unresolved_slot():
    wf = WorkflowTemplate("w", ["Build"])
    with pytest.raises(TemplateError, match="missing"):
        compose_blueprint(wf, [PlatformStageTemplate("Build", [Slot("missing")])], [], [])


def test_missing_platform_stage():
    wf = WorkflowTemplate("w", ["Build", "Execution"])
    with pytest.raises(TemplateError, match="Execution"):
        compose_blueprint(wf, [PlatformStageTemplate("Build", ["make"])], [], [])


def test_unresolved_impl():
    wf = WorkflowTemplate("w", ["Build"])
    with pytest.raises(TemplateError, match="implementation"):
        compose_blueprint(
            wf, [PlatformStageTemplate("Build", [Slot("b")])], [MachineBlock("b", [ImplRef("nope")])], []
        )


def test_block_cycle():
    wf = WorkflowTemplate("w", ["Build"])
    blocks = [MachineBlock("a", [BlockRef("b")]), MachineBlock("b", ["x", BlockRef("a")])]
    with pytest.raises(TemplateError, match="cycle"):
        compose_blueprint(wf, [PlatformStageTemplate("Build", [Slot("a")])], blocks, [])


def test_nested_blocks_in_declaration_order():
    # hand-expanded: outer = [pre, inner(impl(c1, c2), mid), post]
    wf = WorkflowTemplate("w", ["Execution"])
    blocks = [
        MachineBlock("outer", ["pre", BlockRef("inner"), "post"]),
        MachineBlock("inner", [ImplRef("cmds"), "mid {{run.nodes}}"]),
    ]
    impls = [ImplementationTemplate("cmds", ["c1", "c2 {{run.seed}}"])]
    bp = compose_blueprint(wf, [PlatformStageTemplate("Execution", [Slot("outer")])], blocks, impls)
    assert bp.per_stage_commands["Execution"] == ("pre", "c1", "c2 {{run.seed}}", "mid {{run.nodes}}", "post")
    assert bp.referenced_keys == {"run.nodes", "run.seed"}


@pytest.mark.parametrize("bad", ["{{}}", "{{a.}}", "{{a", "b}}", "{{ a }}", "{{a..b}}"])
def test_malformed_placeholders(bad):
    with pytest.raises(TemplateError):
        placeholders(f"echo {bad}")


def test_shell_braces_are_fine():
    assert placeholders('echo "${HOME}" {{x.y}}') == ["x.y"]


def test_workflow_invariants():
    with pytest.raises(TemplateError):
        WorkflowTemplate("w", [])
    with pytest.raises(TemplateError):
        WorkflowTemplate("w", ["A", "A"])
    assert WorkflowTemplate("w").stages == DEFAULT_STAGES


def _bp(stage_cmds):
    stages = list(stage_cmds)
    wf = WorkflowTemplate("w", stages)
    return compose_blueprint(wf, [PlatformStageTemplate(s, c) for s, c in stage_cmds.items()], [], [])


class TestInstantiate:
    def test_simple(self):
        bp = _bp({"Execution": ["srun -N {{run.nodes}}"]})
        inst = instantiate(bp, resolve(ConfigDocument("x", sections={"run": {"nodes": 1}})), ParameterCombination({"run.nodes": 4}, 0))
        assert inst.per_stage_commands["Execution"] == ("srun -N 4",)

    def test_unresolved(self):
        bp = _bp({"Execution": ["x {{run.missing}}"]})
        with pytest.raises(TemplateError, match="run.missing"):
            instantiate(bp, resolve(ConfigDocument("x", sections={"a": 1})), ParameterCombination({}, 0))

    def test_list_not_substitutable(self):
        bp = _bp({"Execution": ["x {{mods}}"]})
        with pytest.raises(TemplateError, match="list"):
            instantiate(bp, resolve(ConfigDocument("x", sections={"mods": [1, 2]})), ParameterCombination({}, 0))

    def test_scalar_rendering(self):
        bp = _bp({"E": ["{{a}} {{b}} {{c}} {{d}} {{e}}"]})
        rc = resolve(ConfigDocument("x", sections={"a": 7, "b": 0.1, "c": True, "d": "s p", "e": 1e-20}))
        inst = instantiate(bp, rc, ParameterCombination({}, 0))
        assert inst.per_stage_commands["E"] == ("7 0.1 true s p 1e-20",)

    def test_three_placeholders_two_stages(self):
        bp = _bp({"Build": ["make -j{{build.jobs}}"], "Execution": ["srun -N {{run.nodes}} ./app --seed {{run.seed}}"]})
        rc = resolve(ConfigDocument("x", sections={"build": {"jobs": 8}, "run": {"nodes": 1, "seed": 5}}))
        inst = instantiate(bp, rc, ParameterCombination({"run.nodes": 2}, 0))
        text = inst.to_json()
        assert not RESIDUE.search("".join(c for cmds in inst.per_stage_commands.values() for c in cmds))
        assert "srun -N 2 ./app --seed 5" in text
        assert inst.to_json() == instantiate(bp, rc, ParameterCombination({"run.nodes": 2}, 0)).to_json()


class TestSplit:
    def bp(self):
        cmds = {s: [f"echo {s}"] for s in DEFAULT_STAGES}
        cmds["Build"] = ["make {{env.stack}}"]
        cmds["Execution"] = ["srun -N {{run.nodes}}"]
        return _bp(cmds)

    def test_prefix_rule(self):
        shared, fanout = plan_stage_split(self.bp(), [ParameterAxis("run.nodes", (1, 2))])
        assert shared == ("Preparation", "Build")
        assert fanout == ("Execution", "Transfer", "Annotation", "Analyze", "Plot")

    def test_no_axes(self):
        shared, fanout = plan_stage_split(self.bp(), [])
        assert shared == DEFAULT_STAGES and fanout == ()

    def test_first_stage_references_axis(self):
        shared, fanout = plan_stage_split(self.bp(), ["env.stack"])
        assert shared == ("Preparation",)
        cmds = {s: ["echo {{run.nodes}}"] for s in DEFAULT_STAGES}
        shared, fanout = plan_stage_split(_bp(cmds), ["run.nodes"])
        assert shared == () and fanout == DEFAULT_STAGES


def test_demo_library_layers(demo_project):
    lib = demo_project.templates
    rc = resolve(demo_project.repo.get("demo"), demo_project.repo)
    a = lib.blueprint("benchmark", "generic", "mock-A")
    b = lib.blueprint("benchmark", "generic", "mock-B")
    # machine blocks differ, stage structure does not
    assert a.stages == b.stages == DEFAULT_STAGES
    assert a.per_stage_commands["Build"] != b.per_stage_commands["Build"]
    combos = expand_parameter_space(rc)
    shared, _ = plan_stage_split(a, parameter_axes(rc))
    assert shared == ("Preparation", "Build")
    # split soundness: shared stages are identical across every combination
    for stage in shared:
        rendered = {instantiate(a, rc, c).per_stage_commands[stage] for c in combos}
        assert len(rendered) == 1
    for c in combos:
        inst = instantiate(a, rc, c)
        assert not RESIDUE.search(inst.to_json())


def test_library_load_errors(tmp_path):
    with pytest.raises(TemplateError):
        TemplateLibrary.load(tmp_path / "nope")
    lib = TemplateLibrary.load(DEMO_DIR / "templates")
    with pytest.raises(TemplateError, match="machine"):
        lib.blueprint("benchmark", "generic", "mock-Z")
    with pytest.raises(TemplateError, match="platform"):
        lib.blueprint("benchmark", "nowhere", "mock-A")


def test_split_soundness_exhaustive():
    # every subset of three keys as axes, stages referencing various keys
    keys = ["a", "b", "c"]
    cmds = {"S1": ["x {{c}}"], "S2": ["y {{a}}"], "S3": ["z {{b}} {{c}}"], "S4": ["w"]}
    bp = _bp(cmds)
    base = resolve(ConfigDocument("x", sections={"a": 0, "b": 0, "c": 0}))
    for r in range(len(keys) + 1):
        for axes in itertools.combinations(keys, r):
            combos = [ParameterCombination(dict(zip(axes, vals)), i)
                      for i, vals in enumerate(itertools.product(range(4), repeat=len(axes)))]
            shared, fanout = plan_stage_split(bp, list(axes))
            assert shared + fanout == bp.stages
            for stage in shared:
                assert len({instantiate(bp, base, c).per_stage_commands[stage] for c in combos}) == 1
