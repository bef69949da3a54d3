from __future__ import annotations

import sys
import textwrap
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from benchforge import DEMO_DIR
from benchforge.controller import Project
from benchforge.provenance import Archive


def write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(textwrap.dedent(text).lstrip("\n"), encoding="utf-8")
    return path


@pytest.fixture
def demo_project() -> Project:
    return Project.load(DEMO_DIR)


@pytest.fixture
def archive(tmp_path) -> Archive:
    return Archive(tmp_path / "archive")


@pytest.fixture
def mini_project(tmp_path) -> Path:
    """A small project whose commands only use shell builtins and coreutils.

    Execution writes a timer file derived from the combination; Build appends
    to a log outside the run directory so tests can count its executions.
    """
    root = tmp_path / "mini"
    write(root / "configs/base.yaml", """
        name: base
        software: {stack: gcc/12}
        run: {nodes: 1, seed: 1, fail_ordinal: -1}
        paths: {build_log: BUILD_LOG}
    """)
    write(root / "configs/sweep.yaml", """
        name: sweep
        extends: base
        experiment:
          axes:
            run.nodes: [1, 2]
            run.seed: [1, 2, 3]
    """)
    write(root / "templates/workflow/benchmark.yaml", """
        stages: [Preparation, Build, Execution, Transfer, Annotation, Analyze, Plot]
    """)
    plat = root / "templates/platform/generic"
    write(plat / "Preparation.sh", "@block prepare\n")
    write(plat / "Build.sh", "@block load_env\n@block build\n")
    write(plat / "Execution.sh", "@block load_env\n@block execute\n")
    write(plat / "Transfer.sh", "echo transfer {{run.nodes}}\n")
    write(plat / "Annotation.sh", "echo annotate\n")
    write(plat / "Analyze.sh", "cat \"$BENCHFORGE_SHARED_DIR/Execution/$BENCHFORGE_ORDINAL/timers.txt\"\n")
    write(plat / "Plot.sh", "echo plot\n")
    mach = root / "templates/machine/mock-A"
    write(mach / "prepare.sh", "echo fetched > sources.txt\n")
    write(mach / "load_env.sh", "echo module load {{software.stack}}\n")
    write(mach / "build.sh", "@impl build_app\n")
    write(mach / "execute.sh", "@impl run_app\n")
    write(root / "templates/impl/build_app.sh", """
        test -f "$BENCHFORGE_SHARED_DIR/Preparation/shared/sources.txt"
        echo build >> {{paths.build_log}}
        echo binary > app.bin
    """)
    write(root / "templates/impl/run_app.sh", """
        test -f "$BENCHFORGE_SHARED_DIR/Build/shared/app.bin"
        test "$BENCHFORGE_ORDINAL" != "{{run.fail_ordinal}}"
        printf 'construction 0.5\\nupdate {{run.nodes}}.0\\ncollocate 0.25\\ncommunicate 0.5\\ndeliver {{run.seed}}.0\\nmodel_time 2.0\\n' > timers.txt
    """)
    write(root / "machines/mock-A.yaml", """
        name: mock-A
        platform: generic
        seed: 3
        internet_access_node_classes: [login]
        node_classes:
          login: {capacity: 1, max_nodes: 1, queue_delay: 0, run_ticks: 1}
          compute: {capacity: 2, max_nodes: 4, queue_delay: {min: 0, max: 2}, run_ticks: 1}
        stages:
          Preparation: {node_class: login}
          Build: {node_class: compute}
          Execution: {node_class: compute, nodes: "{{run.nodes}}"}
          default: {node_class: login}
        software_versions: {simulator: mini-1.0}
        hardware: {cpu: mock-cpu}
    """)
    # second machine sharing the same blocks
    for f in mach.iterdir():
        write(root / "templates/machine/mock-B" / f.name, f.read_text())
    write(root / "machines/mock-B.yaml", (root / "machines/mock-A.yaml").read_text().replace("mock-A", "mock-B"))
    return root


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(acceptance_log.RESULTS):
        ok, text = acceptance_log.RESULTS[number]
        terminalreporter.write_line(acceptance_log.line(number, ok, text))
