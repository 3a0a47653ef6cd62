"""Deterministic in-process network with a scripted adversary.

Every ``transmit`` is one logical step.  Messages are numbered per protocol
run (``begin`` starts a run) so faults can target "message 5 of the second
payment" independent of what happened before.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable

from ..errors import TransportFailure
from ..terminals import Actor

DEFAULT_TIMEOUT = 8


class FaultKind(Enum):
    DROP = "drop"
    DELAY = "delay"
    TAMPER = "tamper"
    REPLAY = "replay"
    INJECT = "inject"


@dataclass
class FaultAction:
    kind: FaultKind
    step: int
    protocol: str | None = None
    occurrence: int | None = None
    delay: int = 0
    offset: int = 0
    mask: int = 0x01
    capture_index: int = 0
    actor: str | None = None
    fired: bool = False

    def matches(self, protocol: str, run: int, index: int) -> bool:
        if self.fired or index != self.step:
            return False
        if self.protocol is not None and self.protocol != protocol:
            return False
        return self.occurrence is None or self.occurrence == run

    @classmethod
    def drop(cls, protocol: str | None, step: int, occurrence: int | None = None) -> "FaultAction":
        return cls(FaultKind.DROP, step, protocol, occurrence)


class Fate(Enum):
    DELIVERED = "delivered"
    DROPPED = "dropped"
    TAMPERED = "tampered"
    DELAYED = "delayed"
    LATE = "late"
    REPLAYED = "replayed"
    ADVERSARY = "adversary"


@dataclass(frozen=True)
class Capture:
    seq: int
    step: int
    protocol: str
    run: int
    index: int
    src: str
    dst: str
    frame: bytes
    fate: Fate
    delivered: bytes | None = None

    def trace_line(self) -> str:
        shown = self.frame[:24].hex() + ("…" if len(self.frame) > 24 else "")
        return (f"{self.seq:06d} t={self.step:<6d} {self.protocol}#{self.run}[{self.index}] "
                f"{self.src} -> {self.dst} {self.fate.value:<9s} {len(self.frame):4d}B {shown}")


def _deliver(target, src: str, frame: bytes) -> bytes | None:
    # Actors that only ever initiate (the FI) have no inbound endpoint.
    handler = getattr(target, "process", None)
    return None if handler is None else handler(src, frame)


CaptureObserver = Callable[[Capture], None]


class SimNetwork:
    """Synchronous transport; also the adversary's vantage point."""

    def __init__(self, faults: Iterable[FaultAction] = (), timeout: int = DEFAULT_TIMEOUT):
        self.actors: dict[str, Actor] = {}
        self.faults: list[FaultAction] = list(faults)
        self.timeout = timeout
        self.clock = 0
        self.capture_log: list[Capture] = []
        self.observers: list[CaptureObserver] = []
        self.adversaries: dict[str, Callable[["SimNetwork", str], None]] = {}
        self.protocol = "idle"
        self._runs: Counter = Counter()
        self._index = 0
        self._late: list[tuple[int, str, str, bytes, str, int, int]] = []
        self._flushing = False

    def register(self, actor: Actor) -> None:
        self.actors[actor.name] = actor

    def schedule(self, *faults: FaultAction) -> None:
        self.faults.extend(faults)

    def begin(self, protocol: str) -> int:
        """Start a new numbered run of ``protocol``; returns its occurrence number."""
        self.protocol = protocol
        self._runs[protocol] += 1
        self._index = 0
        return self._runs[protocol]

    @property
    def run(self) -> int:
        return self._runs[self.protocol]

    def _record(self, src, dst, frame, fate, delivered=None, protocol=None, run=None, index=None) -> Capture:
        cap = Capture(len(self.capture_log), self.clock, protocol or self.protocol,
                      self.run if run is None else run, self._index if index is None else index,
                      src, dst, frame, fate, delivered)
        self.capture_log.append(cap)
        for obs in self.observers:
            obs(cap)
        return cap

    def _fault_for(self, index: int) -> FaultAction | None:
        for f in self.faults:
            if f.matches(self.protocol, self.run, index):
                f.fired = True
                return f
        return None

    def transmit(self, src: str, dst: str, frame: bytes) -> bytes:
        self.flush_late()
        self.clock += 1
        index = self._index
        fault = self._fault_for(index)
        try:
            if fault is None:
                self._record(src, dst, frame, Fate.DELIVERED, frame)
                return frame
            if fault.kind is FaultKind.DROP:
                self._record(src, dst, frame, Fate.DROPPED)
                raise TransportFailure(f"{self.protocol} message {index} dropped")
            if fault.kind is FaultKind.DELAY:
                if fault.delay < self.timeout:
                    self.clock += fault.delay
                    self._record(src, dst, frame, Fate.DELIVERED, frame)
                    return frame
                self._record(src, dst, frame, Fate.DELAYED)
                self._late.append((self.clock + fault.delay, src, dst, frame, self.protocol, self.run, index))
                raise TransportFailure(f"{self.protocol} message {index} timed out")
            if fault.kind is FaultKind.TAMPER:
                altered = bytearray(frame)
                if altered:
                    altered[fault.offset % len(altered)] ^= fault.mask or 0x01
                self._record(src, dst, frame, Fate.TAMPERED, bytes(altered))
                return bytes(altered)
            if fault.kind is FaultKind.REPLAY:
                self._replay(fault.capture_index, dst)
            elif fault.kind is FaultKind.INJECT:
                attack = self.adversaries.get(fault.actor or "")
                if attack is not None:
                    attack(self, dst)
            self._record(src, dst, frame, Fate.DELIVERED, frame)
            return frame
        finally:
            self._index = index + 1

    def _replay(self, capture_index: int, dst: str) -> None:
        """Push an old captured frame into ``dst`` as if its original sender sent it again."""
        if not self.capture_log:
            return
        old = self.capture_log[capture_index % len(self.capture_log)]
        target = self.actors.get(dst)
        if target is None:
            return
        self._record(old.src, dst, old.frame, Fate.REPLAYED, old.frame)
        reply = _deliver(target, old.src, old.frame)
        if reply is not None:
            self._record(dst, old.src, reply, Fate.ADVERSARY)

    def flush_late(self, force: bool = False) -> None:
        """Deliver delayed frames whose time has come; their answers reach nobody."""
        if self._flushing or not self._late:
            return
        self._flushing = True
        try:
            while True:
                due = [m for m in self._late if force or m[0] <= self.clock]
                if not due:
                    break
                for item in due:
                    self._late.remove(item)
                    _, src, dst, frame, protocol, run, index = item
                    target = self.actors.get(dst)
                    self._record(src, dst, frame, Fate.LATE, frame, protocol, run, index)
                    reply = _deliver(target, src, frame)
                    if reply is not None:
                        self._record(dst, src, reply, Fate.ADVERSARY, None, protocol, run, index)
        finally:
            self._flushing = False

    def pending_late(self) -> int:
        return len(self._late)

    def inject(self, src: str, dst: str, frame: bytes) -> bytes | None:
        """Adversary sends ``frame`` to ``dst`` impersonating the channel ``src``."""
        target = self.actors[dst]
        self._record(src, dst, frame, Fate.REPLAYED, frame)
        reply = _deliver(target, src, frame)
        if reply is not None:
            self._record(dst, src, reply, Fate.ADVERSARY)
        return reply

    # -- export -----------------------------------------------------------------

    def export_binary(self) -> bytes:
        """Length-prefixed capture records: seq, step, index, fate, src, dst, frame."""
        out = bytearray()
        for c in self.capture_log:
            head = struct.pack(">IIIB", c.seq, c.step, c.index, list(Fate).index(c.fate))
            names = [c.protocol.encode(), c.src.encode(), c.dst.encode(), c.frame]
            body = head + b"".join(struct.pack(">I", len(x)) + x for x in names)
            out += struct.pack(">I", len(body)) + body
        return bytes(out)

    def export_trace(self) -> str:
        return "\n".join(c.trace_line() for c in self.capture_log)


def message_counts(captures: Iterable[Capture], protocol: str) -> dict[int, tuple[int, int]]:
    """Per run of ``protocol``: (messages transmitted, bytes transmitted)."""
    out: dict[int, list[int]] = {}
    for c in captures:
        if c.protocol != protocol or c.fate in (Fate.LATE, Fate.REPLAYED, Fate.ADVERSARY):
            continue
        acc = out.setdefault(c.run, [0, 0])
        acc[0] += 1
        acc[1] += len(c.frame)
    return {run: (m, b) for run, (m, b) in out.items()}
