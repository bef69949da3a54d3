"""Independent reference implementations used as test oracles.

None of these import the code paths they check.
"""

from __future__ import annotations

import math
import random
from typing import Any

DELETE = "__delete__"


# --- config ------------------------------------------------------------------


def flat(tree: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        if isinstance(v, dict):
            out.update(flat(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def fold_chain(layers: list[tuple[str, dict]]) -> tuple[dict, dict]:
    """Shallow key-path overrides applied base first; returns (entries, provenance)."""
    entries: dict[str, Any] = {}
    prov: dict[str, str] = {}
    for name, tree in layers:
        for path, value in flat(tree).items():
            doomed = [k for k in entries if k == path or k.startswith(path + ".")]
            for k in doomed:
                del entries[k]
                del prov[k]
            if value == DELETE:
                continue
            entries[path] = value
            prov[path] = name
    return entries, prov


def recursive_merge(base: dict, child: dict) -> dict:
    """Naive recursive merge: maps merge, anything else replaces, DELETE removes."""
    out = dict(base)
    for k, v in child.items():
        if v == DELETE:
            out.pop(k, None)
        elif isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = recursive_merge(out[k], v)
        elif isinstance(v, dict):
            out[k] = recursive_merge({}, v)
        else:
            out[k] = v
    return out


def merge_chain(trees: list[dict]) -> dict[str, Any]:
    merged: dict = {}
    for tree in trees:
        merged = recursive_merge(merged, tree)
    return flat(merged)


def random_universe(rng: random.Random, max_depth: int = 5, max_leaves: int = 50) -> dict[str, str]:
    """Leaf key paths mapped to a value kind; no path is a prefix of another."""
    leaves: dict[str, str] = {}
    kinds = ("int", "float", "str", "bool", "list")

    def grow(prefix: str, depth: int) -> None:
        for i in range(rng.randint(1, 4)):
            if len(leaves) >= max_leaves:
                return
            key = f"{prefix}k{i}"
            if depth < max_depth and rng.random() < 0.4:
                grow(key + ".", depth + 1)
            else:
                leaves[key] = rng.choice(kinds)

    while not leaves:
        grow("", 1)
    return leaves


def random_value(rng: random.Random, kind: str) -> Any:
    if kind == "int":
        return rng.randint(-5, 50)
    if kind == "float":
        return rng.choice([0.5, 1.25, 3.0, -2.5, 1e-3])
    if kind == "str":
        return rng.choice(["a", "b", "mpi", "x y"])
    if kind == "bool":
        return rng.random() < 0.5
    return [rng.randint(0, 9) for _ in range(rng.randint(0, 3))]


def nest(flat_map: dict[str, Any]) -> dict:
    out: dict = {}
    for path, value in flat_map.items():
        node = out
        parts = path.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def random_layer(rng: random.Random, universe: dict[str, str], allow_delete: bool = True) -> dict:
    chosen = {}
    for path, kind in universe.items():
        if rng.random() < 0.35:
            if allow_delete and rng.random() < 0.08:
                # delete either the leaf or one of its ancestor maps
                parts = path.split(".")
                cut = rng.randint(1, len(parts))
                target = ".".join(parts[:cut])
                if not any(p == target or p.startswith(target + ".") or target.startswith(p + ".") for p in chosen):
                    chosen[target] = DELETE
            else:
                if not any(p != path and (path.startswith(p + ".") or p.startswith(path + ".")) for p in chosen):
                    chosen[path] = random_value(rng, kind)
    return nest(chosen)


# --- parameter space ---------------------------------------------------------


def nested_loops(axes: dict[str, list]) -> list[dict]:
    keys = sorted(axes)
    out = [{}]
    for key in keys:
        out = [dict(prev, **{key: v}) for prev in out for v in axes[key]]
    return out


# --- statistics --------------------------------------------------------------


def two_pass_mean_stderr(values: list[float]) -> tuple[float, float]:
    n = len(values)
    total = 0.0
    for v in values:
        total += v
    mean = total / n
    if n == 1:
        return mean, 0.0
    ss = 0.0
    for v in values:
        ss += (v - mean) * (v - mean)
    return mean, math.sqrt(ss / (n - 1) / n)


# --- archive query -----------------------------------------------------------


def linear_scan(records: list[dict], predicates: list[tuple[str, str, Any]]) -> list[str]:
    """Records are plain dicts ``{"id": ..., "view": {...}}``."""

    def num(x):
        return isinstance(x, (int, float)) and not isinstance(x, bool)

    def eq(a, b):
        if num(a) and num(b):
            return a == b
        return type(a) is type(b) and a == b

    def holds(view, key, op, value):
        if key not in view:
            return False
        a = view[key]
        if op == "=":
            return eq(a, value)
        if op == "!=":
            return not eq(a, value)
        if op == "contains":
            if isinstance(a, str):
                return isinstance(value, str) and value in a
            if isinstance(a, list):
                return any(eq(x, value) for x in a)
            return False
        if not ((num(a) and num(value)) or (isinstance(a, str) and isinstance(value, str))):
            return False
        return {"<": a < value, "<=": a <= value, ">": a > value, ">=": a >= value}[op]

    hits = [r["id"] for r in records if all(holds(r["view"], k, o, v) for k, o, v in predicates)]
    return sorted(hits)


# --- exchange ----------------------------------------------------------------


def exchange_step(capacity: int, window: list[int], counts: list[int], g: float, s: float, min_cap: int, wlen: int):
    """Hand step-through of the resize rules; returns (rounds, capacity, grew, shrank, window)."""
    from fractions import Fraction

    gf = Fraction(repr(g))
    peak = max(counts) if counts else 0
    rounds, grew, shrank = 1, False, False
    if peak > capacity:
        capacity = math.ceil(gf * peak)
        rounds, grew = 2, True
    window = (window + [peak])[-wlen:]
    wmax = max(window)
    if wmax < s * capacity:
        target = max(math.ceil(gf * wmax), min_cap)
        if target < capacity:
            capacity, shrank = target, True
    return rounds, capacity, grew, shrank, window
