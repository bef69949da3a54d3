"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS: dict[int, tuple[bool, str]] = {}


def line(number: int, ok: bool, text: str) -> str:
    return f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {text}"
