"""Continuous benchmarking orchestrator.

Hierarchical configs are resolved, expanded into parameter combinations,
specialized through layered templates into pipelines, executed over a
local or mock batch backend, archived with provenance metadata, and
summarized as scaling analyses.
"""

from pathlib import Path

__version__ = "0.1.0"

DEMO_DIR = Path(__file__).parent / "data" / "demo"
