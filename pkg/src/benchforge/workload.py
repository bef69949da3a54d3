"""Built-in demo workload: spike exchange with dynamic buffers and table-based STDP.

Ranks are simulated in-process. Each cycle every rank emits a random number
of spikes, which are all-gathered through per-rank buffer sections of a
shared capacity. The first round assumes the current capacity suffices; if
any rank overflows, the capacity grows to ``ceil(g * max_count)`` and a second
round (which cannot overflow) resends everything. After delivery the
capacity shrinks to ``max(ceil(g * window_max), min_capacity)`` when the
largest per-rank count over the last ``window`` cycles falls below
``s * capacity``; shrinking needs no extra round.

Delivered spikes drive pair-based STDP updates whose exponentials come from
precomputed tables on the time grid, falling back to ``math.exp`` outside
the table range.

Run as ``python -m benchforge.workload --out DIR [options]``; writes
``timers.txt`` and ``exchange_stats.txt`` into ``DIR``.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import sys
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from benchforge.analysis import PhaseTimers

Spike = tuple  # (source_rank, neuron_gid, step)


@dataclass(frozen=True)
class ExchangeConfig:
    ranks: int = 4
    initial_section_capacity: int = 8
    growth_factor: float = 1.5
    shrink_threshold: float = 0.25
    min_capacity: int = 4
    steps: int = 100
    seed: int = 1
    spike_rate: float = 4.0
    window: int = 10

    def __post_init__(self):
        if self.ranks < 1:
            raise ValueError("ranks must be positive")
        if not self.growth_factor > 1:
            raise ValueError("growth_factor must exceed 1")
        if not 0 < self.shrink_threshold < 1:
            raise ValueError("shrink_threshold must lie in (0, 1)")
        if self.min_capacity < 1 or self.min_capacity > self.initial_section_capacity:
            raise ValueError("need 1 <= min_capacity <= initial_section_capacity")
        if self.steps < 0 or self.window < 1 or self.spike_rate < 0:
            raise ValueError("steps, window and spike_rate must be non-negative (window >= 1)")


@dataclass(frozen=True)
class ExchangeState:
    section_capacity: int
    resize_grow_count: int = 0
    resize_shrink_count: int = 0
    two_round_count: int = 0
    rounds_total: int = 0
    words_sent: int = 0
    usage_window: tuple[int, ...] = ()

    @classmethod
    def initial(cls, cfg: ExchangeConfig) -> "ExchangeState":
        return cls(section_capacity=cfg.initial_section_capacity)

    @property
    def recent_max_usage(self) -> int:
        return max(self.usage_window, default=0)


def _grown(factor: float, needed: int) -> int:
    # decimal semantics for the factor: 1.1 * 10 is 11, not 11.000000000000002
    return math.ceil(Fraction(repr(factor)) * needed)


def _all_gather(sections: Sequence[Sequence[Spike]], capacity: int) -> list[Spike]:
    buffer: list[Spike] = []
    for section in sections:
        if len(section) > capacity:
            raise AssertionError("section overflow in a guaranteed round")
        buffer.extend(section)
    return buffer


def exchange_cycle(
    per_rank_spikes: Sequence[Sequence[Spike]], st: ExchangeState, cfg: ExchangeConfig
) -> tuple[list[list[Spike]], ExchangeState, int]:
    """One all-gather of spikes with grow-on-overflow and silent shrinking.

    Returns ``(delivered, new_state, rounds_used)``; ``delivered[r]`` is what
    rank ``r`` received.
    """
    if len(per_rank_spikes) != cfg.ranks:
        raise ValueError(f"expected {cfg.ranks} rank spike lists, got {len(per_rank_spikes)}")
    R = cfg.ranks
    capacity = st.section_capacity
    counts = [len(s) for s in per_rank_spikes]
    peak = max(counts, default=0)
    grow = shrink = 0
    rounds = 1
    words = R * R * capacity
    if peak > capacity:
        # round 1 only carried the overflow flag; round 2 resends everything
        capacity = _grown(cfg.growth_factor, peak)
        grow = 1
        rounds = 2
        words += R * R * capacity
    buffer = _all_gather(per_rank_spikes, capacity)
    delivered = [list(buffer) for _ in range(R)]

    window = (st.usage_window + (peak,))[-cfg.window:]
    window_max = max(window)
    if window_max < cfg.shrink_threshold * capacity:
        target = max(_grown(cfg.growth_factor, window_max), cfg.min_capacity)
        if target < capacity:
            capacity = target
            shrink = 1
    new_state = ExchangeState(
        section_capacity=capacity,
        resize_grow_count=st.resize_grow_count + grow,
        resize_shrink_count=st.resize_shrink_count + shrink,
        two_round_count=st.two_round_count + (rounds == 2),
        rounds_total=st.rounds_total + rounds,
        words_sent=st.words_sent + words,
        usage_window=window,
    )
    return delivered, new_state, rounds


# --- exponential tables and STDP -------------------------------------------


def direct_exp(delta_steps: int, h: float, tau: float) -> float:
    return math.exp(-(abs(delta_steps) * h) / tau)


@dataclass(frozen=True)
class ExpTable:
    tau_plus: float
    tau_minus: float
    h: float
    length: int
    values_plus: np.ndarray = field(repr=False)
    values_minus: np.ndarray = field(repr=False)

    def tau(self, branch: str) -> float:
        return self.tau_plus if branch == "plus" else self.tau_minus


def default_table_length(tau_plus: float, tau_minus: float, h: float) -> int:
    """Entries covering ten time constants."""
    return max(1, math.ceil(10 * max(tau_plus, tau_minus) / h))


def build_table(tau_plus: float, tau_minus: float, h: float, length: int | None = None) -> ExpTable:
    if min(tau_plus, tau_minus, h) <= 0:
        raise ValueError("time constants and resolution must be positive")
    if length is None:
        length = default_table_length(tau_plus, tau_minus, h)
    if length < 1:
        raise ValueError("table length must be >= 1")

    def column(tau: float) -> np.ndarray:
        values = np.array([direct_exp(k, h, tau) for k in range(length)], dtype=np.float64)
        values.setflags(write=False)
        return values

    return ExpTable(tau_plus, tau_minus, h, length, column(tau_plus), column(tau_minus))


def exp_lookup(t: ExpTable, branch: str, delta_steps: int) -> float:
    if branch not in ("plus", "minus"):
        raise ValueError(f"branch must be 'plus' or 'minus', got {branch!r}")
    if delta_steps < 0:
        raise ValueError("delta_steps must be non-negative")
    if delta_steps < t.length:
        values = t.values_plus if branch == "plus" else t.values_minus
        return float(values[delta_steps])
    return direct_exp(delta_steps, t.h, t.tau(branch))


@dataclass(frozen=True)
class StdpParams:
    lam: float = 0.01
    alpha: float = 1.0
    w_max: float = 1.0
    tau_plus: float = 20.0
    tau_minus: float = 20.0

    def __post_init__(self):
        if self.lam <= 0 or self.alpha < 0 or self.w_max <= 0:
            raise ValueError("need lambda > 0, alpha >= 0, w_max > 0")
        if self.tau_plus <= 0 or self.tau_minus <= 0:
            raise ValueError("time constants must be positive")


def stdp_update(w: float, delta_steps: int, p: StdpParams, t: ExpTable | None = None, h: float = 0.1) -> float:
    """Pair-based update; positive ``delta_steps`` means post fired after pre."""
    if not 0 <= w <= p.w_max:
        raise ValueError(f"weight {w} outside [0, {p.w_max}]")
    if delta_steps == 0:
        return w
    if t is not None and (t.tau_plus != p.tau_plus or t.tau_minus != p.tau_minus):
        raise ValueError("table time constants differ from the synapse parameters")
    if delta_steps > 0:
        k = exp_lookup(t, "plus", delta_steps) if t is not None else direct_exp(delta_steps, h, p.tau_plus)
        w = w + p.lam * (p.w_max - w) * k
    else:
        k = exp_lookup(t, "minus", -delta_steps) if t is not None else direct_exp(delta_steps, h, p.tau_minus)
        w = w - p.lam * p.alpha * w * k
    return min(max(w, 0.0), p.w_max)


# --- the instrumented demo -------------------------------------------------


@dataclass
class DemoResult:
    timers: PhaseTimers
    state: ExchangeState
    weights: np.ndarray
    content_digest: str
    spikes_sent: int
    timer_path: Path | None = None
    stats_path: Path | None = None


def stats_text(result: DemoResult) -> str:
    st = result.state
    return (
        f"grow_count {st.resize_grow_count}\n"
        f"shrink_count {st.resize_shrink_count}\n"
        f"two_round_count {st.two_round_count}\n"
        f"final_capacity {st.section_capacity}\n"
        f"rounds_total {st.rounds_total}\n"
        f"spikes_sent {result.spikes_sent}\n"
        f"content_digest {result.content_digest}\n"
    )


def run_demo(
    cfg: ExchangeConfig,
    stdp: StdpParams,
    use_table: bool,
    out_dir: str | Path | None,
    *,
    neurons_per_rank: int = 50,
    targets_per_neuron: int = 10,
    cycle_steps: int = 10,
    h: float = 0.1,
    table_length: int | None = None,
) -> DemoResult:
    """Simulate ``cfg.steps`` exchange cycles and time the five phases."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    R, N = cfg.ranks, neurons_per_rank
    n_total = R * N
    targets = rng.integers(0, n_total, size=(n_total, targets_per_neuron))
    # synapse s = gid * targets_per_neuron + j; group local targets per rank
    local_syn: list[list[list[tuple[int, int]]]] = [[[] for _ in range(R)] for _ in range(n_total)]
    for gid in range(n_total):
        for j, tgt in enumerate(targets[gid]):
            local_syn[gid][int(tgt) // N].append((gid * targets_per_neuron + j, int(tgt)))
    weights = [0.5 * stdp.w_max] * (n_total * targets_per_neuron)
    syn_last_pre = [-1] * len(weights)
    last_spike = [-1] * n_total
    v = np.zeros(n_total)
    table = build_table(stdp.tau_plus, stdp.tau_minus, h, table_length) if use_table else None
    state = ExchangeState.initial(cfg)
    digest = hashlib.sha256()
    sent = 0
    t_construction = time.perf_counter() - t0

    t_update = t_collocate = t_communicate = t_deliver = 0.0
    for cycle in range(cfg.steps):
        base = cycle * cycle_steps
        a = time.perf_counter()
        counts = rng.poisson(cfg.spike_rate, size=R)
        drive = rng.standard_normal(n_total)
        v = 0.9 * v + 0.1 * drive
        b = time.perf_counter()
        per_rank = []
        for r in range(R):
            idx = rng.integers(0, N, size=int(counts[r]))
            offs = rng.integers(0, cycle_steps, size=int(counts[r]))
            per_rank.append([(r, r * N + int(i), base + int(o)) for i, o in zip(idx, offs)])
        c = time.perf_counter()
        delivered, state, _ = exchange_cycle(per_rank, state, cfg)
        d = time.perf_counter()
        for r in range(R):
            for _src, gid, t_pre in delivered[r]:
                for syn, post in local_syn[gid][r]:
                    w = weights[syn]
                    t_post = last_spike[post]
                    prev_pre = syn_last_pre[syn]
                    if t_post >= 0 and prev_pre >= 0 and t_post > prev_pre:
                        w = stdp_update(w, t_post - prev_pre, stdp, table, h)
                    if 0 <= t_post < t_pre:
                        w = stdp_update(w, t_post - t_pre, stdp, table, h)
                    weights[syn] = w
                    syn_last_pre[syn] = t_pre
        for spikes in per_rank:
            for _src, gid, t in spikes:
                if t > last_spike[gid]:
                    last_spike[gid] = t
        e = time.perf_counter()
        for spikes in per_rank:
            sent += len(spikes)
            for s in spikes:
                digest.update(f"{s[0]},{s[1]},{s[2]};".encode())
        t_update += b - a
        t_collocate += c - b
        t_communicate += d - c
        t_deliver += e - d

    model_time = max(cfg.steps, 1) * cycle_steps * h / 1000.0
    timers = PhaseTimers(t_construction, t_update, t_collocate, t_communicate, t_deliver, model_time)
    result = DemoResult(timers, state, np.array(weights), digest.hexdigest(), sent)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.timer_path = out / "timers.txt"
        result.timer_path.write_text(timers.to_text(), encoding="utf-8")
        result.stats_path = out / "exchange_stats.txt"
        result.stats_path.write_text(stats_text(result), encoding="utf-8")
    return result


def _bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="python -m benchforge.workload", description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--nodes", type=int, default=1)
    ap.add_argument("--ranks-per-node", type=int, default=2)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--spike-rate", type=float, default=4.0)
    ap.add_argument("--neurons-per-rank", type=int, default=50)
    ap.add_argument("--targets", type=int, default=10)
    ap.add_argument("--capacity", type=int, default=8)
    ap.add_argument("--min-capacity", type=int, default=4)
    ap.add_argument("--growth", type=float, default=1.5)
    ap.add_argument("--shrink", type=float, default=0.25)
    ap.add_argument("--window", type=int, default=10)
    ap.add_argument("--resolution", type=float, default=0.1, help="ms")
    ap.add_argument("--tau-plus", type=float, default=20.0)
    ap.add_argument("--tau-minus", type=float, default=20.0)
    ap.add_argument("--lam", type=float, default=0.01)
    ap.add_argument("--alpha", type=float, default=1.0)
    ap.add_argument("--w-max", type=float, default=1.0)
    ap.add_argument("--use-table", type=_bool, default=True)
    args = ap.parse_args(argv)
    try:
        cfg = ExchangeConfig(
            ranks=args.nodes * args.ranks_per_node,
            initial_section_capacity=args.capacity,
            growth_factor=args.growth,
            shrink_threshold=args.shrink,
            min_capacity=args.min_capacity,
            steps=args.steps,
            seed=args.seed,
            spike_rate=args.spike_rate,
            window=args.window,
        )
        stdp = StdpParams(args.lam, args.alpha, args.w_max, args.tau_plus, args.tau_minus)
    except ValueError as exc:
        print(f"workload: {exc}", file=sys.stderr)
        return 1
    result = run_demo(
        cfg,
        stdp,
        args.use_table,
        args.out,
        neurons_per_rank=args.neurons_per_rank,
        targets_per_neuron=args.targets,
        h=args.resolution,
    )
    print(f"timers {result.timer_path}")
    print(f"stats {result.stats_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
