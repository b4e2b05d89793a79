"""Multiply-accumulate counters for instrumented runs.

Contractions (matmul, einsum, conv) report their MAC count here. Counting is
off unless a :class:`MacCounter` is active; the innermost ``category`` label
decides which bucket receives the count.
"""
from __future__ import annotations

import contextlib
from collections import defaultdict

_active: list["MacCounter"] = []
_labels: list[str] = []


class MacCounter:
    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, key: str) -> int:
        return self.counts.get(key, 0)

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False


@contextlib.contextmanager
def category(label: str):
    _labels.append(label)
    try:
        yield
    finally:
        _labels.pop()


def add_macs(n: int):
    if not _active:
        return
    label = _labels[-1] if _labels else "other"
    for c in _active:
        c.counts[label] += int(n)
