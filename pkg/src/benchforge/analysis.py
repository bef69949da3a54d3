"""Timer parsing, real-time factors, seed statistics and scaling plots.

Timer files are UTF-8 lines ``<key> <seconds>`` with exactly the keys
``construction update collocate communicate deliver model_time``.
"""

from __future__ import annotations

import csv
import io
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from benchforge.errors import AnalysisError

PHASES = ("update", "collocate", "communicate", "deliver")
TIMER_KEYS = ("construction",) + PHASES + ("model_time",)
# every quantity that gets a mean/stderr row
QUANTITIES = ("construction",) + PHASES + ("propagation",)
TABLE_COLUMNS = ("resource_count", "phase", "mean_s", "stderr_s", "fraction", "rtf_mean", "rtf_stderr", "n_seeds")


@dataclass(frozen=True)
class PhaseTimers:
    t_construction: float
    t_update: float
    t_collocate: float
    t_communicate: float
    t_deliver: float
    t_model: float

    def __post_init__(self):
        for name in ("t_construction", "t_update", "t_collocate", "t_communicate", "t_deliver"):
            if getattr(self, name) < 0:
                raise AnalysisError(f"{name} must be non-negative")
        if not self.t_model > 0:
            raise AnalysisError("t_model must be positive")

    def phase(self, name: str) -> float:
        return getattr(self, f"t_{name}")

    @property
    def propagation(self) -> float:
        return self.t_update + self.t_collocate + self.t_communicate + self.t_deliver

    def to_text(self) -> str:
        values = (self.t_construction, self.t_update, self.t_collocate, self.t_communicate, self.t_deliver, self.t_model)
        return "".join(f"{k} {v!r}\n" for k, v in zip(TIMER_KEYS, values))


def parse_timers(raw: bytes | str) -> PhaseTimers:
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    values: dict[str, float] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise AnalysisError(f"timer line {lineno}: expected '<key> <seconds>'")
        key, value = parts
        if key not in TIMER_KEYS:
            raise AnalysisError(f"timer line {lineno}: unknown key {key!r}")
        if key in values:
            raise AnalysisError(f"timer field {key!r} appears more than once")
        try:
            values[key] = float(value)
        except ValueError:
            raise AnalysisError(f"timer field {key!r}: not a number: {value!r}") from None
        if not math.isfinite(values[key]):
            raise AnalysisError(f"timer field {key!r} is not finite")
    missing = [k for k in TIMER_KEYS if k not in values]
    if missing:
        raise AnalysisError(f"timer file is missing field(s): {', '.join(missing)}")
    return PhaseTimers(
        values["construction"],
        values["update"],
        values["collocate"],
        values["communicate"],
        values["deliver"],
        values["model_time"],
    )


def real_time_factor(t: PhaseTimers) -> float:
    """State-propagation wall-clock time divided by model time."""
    return t.propagation / t.t_model


def phase_fractions(t: PhaseTimers) -> tuple[float, float, float, float]:
    total = t.propagation
    if total <= 0:
        raise AnalysisError("phase fractions undefined: zero propagation time")
    return tuple(t.phase(p) / total for p in PHASES)


@dataclass(frozen=True)
class ScalingPoint:
    resource_count: int
    seed: int
    timers: PhaseTimers

    def __post_init__(self):
        if self.resource_count < 1:
            raise AnalysisError("resource_count must be >= 1")


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and standard error (sample sd, n-1) / sqrt(n)."""
    n = len(values)
    if n == 0:
        raise AnalysisError("cannot aggregate an empty group")
    mean = math.fsum(values) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var) / math.sqrt(n)


@dataclass(frozen=True)
class GroupStats:
    resource_count: int
    n_seeds: int
    mean: Mapping[str, float]
    stderr: Mapping[str, float]
    rtf_mean: float
    rtf_stderr: float
    fractions: Mapping[str, float]


@dataclass(frozen=True)
class AnalysisResult:
    groups: tuple[GroupStats, ...]
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(sorted(self.groups, key=lambda g: g.resource_count)))

    @property
    def resource_counts(self) -> tuple[int, ...]:
        return tuple(g.resource_count for g in self.groups)

    def group(self, resource_count: int) -> GroupStats:
        for g in self.groups:
            if g.resource_count == resource_count:
                return g
        raise KeyError(resource_count)


def aggregate_seeds(points: Iterable[ScalingPoint], label: str = "") -> AnalysisResult:
    """Mean and standard error across seeds, per resource count."""
    grouped: dict[int, list[ScalingPoint]] = {}
    for p in points:
        grouped.setdefault(p.resource_count, []).append(p)
    if not grouped:
        raise AnalysisError("no scaling points to aggregate")
    groups = []
    for count, pts in sorted(grouped.items()):
        mean, stderr = {}, {}
        for q in QUANTITIES:
            series = [p.timers.propagation if q == "propagation" else p.timers.phase(q) for p in pts]
            mean[q], stderr[q] = mean_stderr(series)
        rtf_mean, rtf_stderr = mean_stderr([real_time_factor(p.timers) for p in pts])
        total = mean["propagation"]
        if total > 0:
            fractions = {ph: mean[ph] / total for ph in PHASES}
        else:
            fractions = {ph: 0.0 for ph in PHASES}
        groups.append(GroupStats(count, len(pts), mean, stderr, rtf_mean, rtf_stderr, fractions))
    return AnalysisResult(tuple(groups), label)


@dataclass(frozen=True)
class ComparisonResult:
    """Relative change ``(b - a) / a`` of mean durations; negative is faster."""

    per_count: Mapping[int, Mapping[str, float]]
    mean_change: Mapping[str, float]


def compare(a: AnalysisResult, b: AnalysisResult) -> ComparisonResult:
    shared = sorted(set(a.resource_counts) & set(b.resource_counts))
    if not shared:
        raise AnalysisError("analyses share no resource counts")
    per_count: dict[int, dict[str, float]] = {}
    for count in shared:
        ga, gb = a.group(count), b.group(count)
        changes = {}
        for q in QUANTITIES:
            if ga.mean[q] == 0:
                # construction is optional in a workload; phases are not
                if q == "construction":
                    continue
                raise AnalysisError(f"zero baseline mean for {q!r} at resource count {count}")
            changes[q] = (gb.mean[q] - ga.mean[q]) / ga.mean[q]
        per_count[count] = changes
    mean_change = {
        q: math.fsum(per_count[c][q] for c in shared) / len(shared)
        for q in QUANTITIES
        if all(q in per_count[c] for c in shared)
    }
    return ComparisonResult(per_count, mean_change)


# --- output ----------------------------------------------------------------


def table_rows(ar: AnalysisResult) -> list[dict[str, object]]:
    rows = []
    for g in ar.groups:
        for q in QUANTITIES:
            rows.append(
                {
                    "resource_count": g.resource_count,
                    "phase": q,
                    "mean_s": repr(g.mean[q]),
                    "stderr_s": repr(g.stderr[q]),
                    "fraction": repr(g.fractions[q]) if q in PHASES else "",
                    "rtf_mean": repr(g.rtf_mean),
                    "rtf_stderr": repr(g.rtf_stderr),
                    "n_seeds": g.n_seeds,
                }
            )
    return rows


def write_table(ar: AnalysisResult, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(table_rows(ar))
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_table(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


_COLORS = {
    "construction": "#7f7f7f",
    "update": "#1f77b4",
    "collocate": "#2ca02c",
    "communicate": "#d62728",
    "deliver": "#ff7f0e",
    "propagation": "#000000",
}


def emit_plot(ar: AnalysisResult, out_dir: str | Path, style: str = "weak", stem: str = "scaling") -> tuple[Path, Path]:
    """Write ``<stem>.svg`` (absolute times, stacked fractions) and ``<stem>.csv``."""
    if style not in ("weak", "strong"):
        raise AnalysisError(f"unknown plot style {style!r}")
    if not ar.groups:
        raise AnalysisError("nothing to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = list(ar.resource_counts)
    with matplotlib.rc_context({"svg.hashsalt": "benchforge", "svg.fonttype": "path"}):
        fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
        for q in QUANTITIES:
            left.errorbar(
                counts,
                [ar.group(c).mean[q] for c in counts],
                yerr=[ar.group(c).stderr[q] for c in counts],
                marker="o",
                capsize=3,
                color=_COLORS[q],
                label=q,
            )
        left.set_xlabel("nodes")
        left.set_ylabel("wall-clock time (s)")
        left.set_title(f"{style} scaling" + (f": {ar.label}" if ar.label else ""))
        left.set_xticks(counts)
        left.legend(fontsize="small")
        bottom = [0.0] * len(counts)
        for ph in PHASES:
            heights = [ar.group(c).fractions[ph] for c in counts]
            right.bar(counts, heights, bottom=bottom, color=_COLORS[ph], label=ph)
            bottom = [b + h for b, h in zip(bottom, heights)]
        right.set_xlabel("nodes")
        right.set_ylabel("fraction of state propagation")
        right.set_ylim(0, 1)
        right.set_xticks(counts)
        fig.tight_layout()
        svg = out_dir / f"{stem}.svg"
        fig.savefig(svg, format="svg", metadata={"Date": None})
        plt.close(fig)
    table = write_table(ar, out_dir / f"{stem}.csv")
    return svg, table


def main(argv: Sequence[str] | None = None) -> int:
    """Print the real-time factor and phase fractions of one timer file."""
    args = list(sys.argv[1:] if argv is None else argv)
    if len(args) != 1:
        print("usage: python -m benchforge.analysis <timer-file>", file=sys.stderr)
        return 1
    t = parse_timers(Path(args[0]).read_bytes())
    print(f"rtf {real_time_factor(t)!r}")
    if t.propagation > 0:
        for ph, frac in zip(PHASES, phase_fractions(t)):
            print(f"fraction_{ph} {frac!r}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
