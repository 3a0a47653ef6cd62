"""Message and byte counts per protocol run, taken from the capture log."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..secure_channel import Variant
from ..secure_device import ComplianceMode
from .network import message_counts


@dataclass
class RunMetrics:
    variant: Variant
    mode: ComplianceMode
    # protocol -> one (messages, bytes) pair per run, in run order
    runs: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    sync_n: list[int] = field(default_factory=list)

    def messages(self, protocol: str) -> list[int]:
        return [m for m, _ in self.runs.get(protocol, [])]

    def payload_bytes(self, protocol: str) -> list[int]:
        return [b for _, b in self.runs.get(protocol, [])]


def collect_metrics(world) -> RunMetrics:
    captures = world.net.capture_log
    protocols = sorted({c.protocol for c in captures})
    runs = {}
    for p in protocols:
        counts = message_counts(captures, p)
        runs[p] = [counts[r] for r in sorted(counts)]
    return RunMetrics(world.variant, world.mode, runs)
