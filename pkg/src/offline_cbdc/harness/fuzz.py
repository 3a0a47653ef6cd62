"""Randomised fault campaigns over generated scenario scripts.

Every case is a plain scenario script, so a counterexample is replayed with
``run_scenario(case.script, case.seed, variant=..., mode=...)``.  Each case
carries one targeted Drop chosen round-robin from the message indices a
fault-free dry run exposes, plus a few random extra faults.
"""

from __future__ import annotations

import random
import time
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

from ..secure_channel import Variant
from ..secure_device import ComplianceMode
from .scenario import ScenarioRunner
from .world import KeyRing

FUZZ_VARIANTS = (Variant.V1_EPHEMERAL, Variant.V2_NONCE_STATIC)
FUZZ_MODES = tuple(ComplianceMode)
COVERED_PROTOCOLS = ("payment", "retransmission", "sync", "withdraw", "deposit", "sale")
RECOVERY_ROUNDS = 4

_HEADER = """\
user alice online 1000 age 30
user bob online 1000 age 30
pos shop
"""


def _prefix(rng: random.Random, protocol: str, retransmit_drop: int = -1) -> list[str]:
    """Shortest script whose first run of ``protocol`` has the dry-run shape."""
    funding = f"withdraw bob {rng.randint(400, 600)}"
    pay = f"pay bob alice {rng.randint(1, 200)}"
    if protocol == "withdraw":
        return [funding]
    if protocol == "payment":
        return [funding, pay]
    if protocol == "retransmission":
        return [funding, f"fault drop payment {retransmit_drop}", pay, "recover"]
    if protocol == "sale":
        return [funding, f"sale shop bob {rng.randint(1, 100)}"]
    if protocol == "sync":
        return [funding, "sync bob"]
    if protocol == "deposit":
        return [funding, f"deposit bob {rng.randint(1, 50)}"]
    raise ValueError(f"no prefix for {protocol!r}")


def _suffix_op(rng: random.Random) -> str:
    a, b = rng.sample(["alice", "bob"], 2)
    kind = rng.choice(["pay", "pay", "pay", "sale", "sync", "withdraw", "deposit", "recover", "cond"])
    if kind == "pay":
        return f"pay {a} {b} {rng.randint(1, 400)}"
    if kind == "cond":
        return f"pay {a} {b} {rng.randint(1, 100)} if age {rng.choice([18, 30, 65])}"
    if kind == "sale":
        return f"sale shop {a} {rng.randint(1, 200)}"
    if kind == "sync":
        return f"sync {a}"
    if kind == "withdraw":
        return f"withdraw {a} {rng.randint(1, 300)}"
    if kind == "deposit":
        return f"deposit {a} {rng.randint(1, 300)}"
    return "recover"


@dataclass(frozen=True)
class FuzzCase:
    seed: int
    variant: Variant
    mode: ComplianceMode
    target: tuple[str, int]
    script: str


@dataclass
class FuzzFailure:
    case: FuzzCase
    problems: list[str]


@dataclass
class FuzzReport:
    iterations: int
    seed: int
    elapsed: float = 0.0
    recovered: int = 0
    unrecoverable: int = 0
    failures: list[FuzzFailure] = field(default_factory=list)
    # (variant, mode, protocol, index) -> Drops that actually fired there
    coverage: Counter = field(default_factory=Counter)
    universe: set = field(default_factory=set)

    @property
    def missing_coverage(self) -> set:
        return {k for k in self.universe if not self.coverage[k]}

    @property
    def first_counterexample(self) -> FuzzFailure | None:
        return self.failures[0] if self.failures else None

    @property
    def ok(self) -> bool:
        return not self.failures and not self.unrecoverable

    def summary(self) -> str:
        lines = [f"iterations {self.iterations} seed {self.seed} elapsed {self.elapsed:.1f}s",
                 f"recovered {self.recovered} unrecoverable {self.unrecoverable} failures {len(self.failures)}",
                 f"drop coverage {len(self.universe) - len(self.missing_coverage)}/{len(self.universe)}"]
        first = self.first_counterexample
        if first is not None:
            c = first.case
            lines.append(f"first counterexample: seed {c.seed} variant {c.variant.name} mode {c.mode.name}")
            lines.extend("  " + p for p in first.problems[:5])
            lines.append(c.script)
        return "\n".join(lines)


def _run(script: str, seed: int, variant: Variant, mode: ComplianceMode, keyring: KeyRing):
    runner = ScenarioRunner(seed, variant=variant, mode=mode, keyring=keyring)
    return runner, runner.run(script)


@lru_cache(maxsize=None)
def _shared_keyring(seed: int) -> KeyRing:
    return KeyRing(seed)


@lru_cache(maxsize=None)
def protocol_universe(variant: Variant, mode: ComplianceMode, keyring_seed: int = 0) -> dict[str, tuple[int, int]]:
    """Message count of each protocol's first run after its fault-free prefix.

    Returns protocol -> (messages, payment drop index that produced it); the
    second element matters only for retransmission, whose shape depends on
    where the interrupted payment broke.
    """
    keyring = _shared_keyring(keyring_seed)
    counts = {}
    for p in COVERED_PROTOCOLS:
        if p == "retransmission":
            continue
        script = _HEADER + "\n".join(_prefix(random.Random(0), p)) + "\n"
        _, result = _run(script, 0, variant, mode, keyring)
        counts[p] = (result.metrics.runs[p][0][0], -1)
    best = (0, -1)
    for drop in range(counts["payment"][0]):
        script = _HEADER + "\n".join(_prefix(random.Random(0), "retransmission", drop)) + "\n"
        _, r = _run(script, 0, variant, mode, keyring)
        runs = r.metrics.runs.get("retransmission")
        if runs and runs[0][0] > best[0]:
            best = (runs[0][0], drop)
    counts["retransmission"] = best
    return counts


def targets_for(variant: Variant, mode: ComplianceMode) -> list[tuple[str, int]]:
    universe = protocol_universe(variant, mode)
    return [(p, i) for p in COVERED_PROTOCOLS for i in range(universe[p][0])]


def generate_case(seed: int, variant: Variant, mode: ComplianceMode, target: tuple[str, int]) -> FuzzCase:
    rng = random.Random(f"fuzz-case/{seed}")
    universe = protocol_universe(variant, mode)
    protocol, index = target
    lines = _HEADER.splitlines()
    lines.append(f"fault drop {protocol} {index}")
    lines.extend(_prefix(rng, protocol, universe["retransmission"][1]))
    for _ in range(rng.randint(1, 4)):
        if rng.random() < 0.5:
            p = rng.choice(("payment", "sale", "sync", "withdraw", "deposit"))
            i = rng.randrange(universe[p][0])
            lines.append(_random_fault(rng, p, i))
        op = _suffix_op(rng)
        lines.append(op)
    for _ in range(RECOVERY_ROUNDS):
        lines.append("recover")
    return FuzzCase(seed, variant, mode, target, "\n".join(lines) + "\n")


def _random_fault(rng: random.Random, protocol: str, index: int) -> str:
    kind = rng.choice(("drop", "delay", "delay", "tamper", "replay"))
    if kind == "delay":
        return f"fault delay {protocol} {index} {rng.randint(1, 16)}"
    if kind == "tamper":
        return f"fault tamper {protocol} {index} {rng.randrange(200)} {rng.randint(1, 255)}"
    if kind == "replay":
        return f"fault replay {protocol} {index} {rng.randrange(400)}"
    return f"fault drop {protocol} {index}"


def check_case(case: FuzzCase, keyring: KeyRing) -> tuple[list[str], bool, list[tuple[str, int]]]:
    """Run one case; returns (problems, quiesced, drops that fired)."""
    runner, result = _run(case.script, case.seed, case.variant, case.mode, keyring)
    world = result.world
    problems = [f"line {line}: {v}" for line, v in result.violations]
    quiesced = not runner.outstanding and not world.fi.in_doubt and world.net.pending_late() == 0
    if quiesced and result.audit.in_flight != 0:
        problems.append(f"quiescent but in_flight = {result.audit.in_flight}")
    fired = [(f.protocol, f.step) for f in world.net.faults if f.fired and f.kind.value == "drop"]
    return problems, quiesced, fired


def fuzz(iterations: int, seed: int = 0, *, keyring: KeyRing | None = None) -> FuzzReport:
    keyring = keyring or _shared_keyring(seed)
    combos = [(v, m) for v in FUZZ_VARIANTS for m in FUZZ_MODES]
    targets = {c: targets_for(*c) for c in combos}
    report = FuzzReport(iterations, seed)
    report.universe = {(v, m, p, i) for (v, m), ts in targets.items() for p, i in ts}
    start = time.perf_counter()
    for it in range(iterations):
        variant, mode = combos[it % len(combos)]
        ts = targets[(variant, mode)]
        target = ts[(it // len(combos)) % len(ts)]
        case = generate_case(seed * 1_000_003 + it, variant, mode, target)
        problems, quiesced, fired = check_case(case, keyring)
        for p, i in fired:
            report.coverage[(variant, mode, p, i)] += 1
        if problems:
            report.failures.append(FuzzFailure(case, problems))
        if quiesced:
            report.recovered += 1
        else:
            report.unrecoverable += 1
            if not problems:
                report.failures.append(FuzzFailure(case, ["did not quiesce after recovery"]))
    report.elapsed = time.perf_counter() - start
    return report
