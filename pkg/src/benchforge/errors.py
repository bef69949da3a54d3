"""Exception hierarchy.

User-facing errors (bad configs, templates, filters, inputs) map to CLI exit
code 1; :class:`ExecutionError` maps to exit code 2.
"""

from __future__ import annotations


class BenchforgeError(Exception):
    """Base class for all errors raised by this package."""

    layer = "benchforge"


class ConfigError(BenchforgeError):
    layer = "config"


class SchemaError(ConfigError):
    layer = "config/schema"


class TemplateError(BenchforgeError):
    layer = "templates"


class MachineError(BenchforgeError):
    layer = "machine"


class ExecutorError(BenchforgeError):
    layer = "executor"


class UnknownHandleError(ExecutorError):
    pass


class ControllerError(BenchforgeError):
    layer = "controller"


class ArchiveError(BenchforgeError):
    layer = "archive"


class ChecksumError(ArchiveError):
    pass


class FilterError(ArchiveError):
    layer = "archive/query"


class AnalysisError(BenchforgeError):
    layer = "analysis"


class ExecutionError(BenchforgeError):
    """A pipeline ran but did not finish cleanly."""

    layer = "execution"
