"""Active adversaries: key extraction, replay and privilege escalation."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .. import encoding as tlv
from ..errors import CbdcError, PermissionDenied
from ..pki import Operation
from ..secure_channel import FrameType, SessionContext
from ..secure_device import (
    CMD,
    T_AMOUNT,
    ComplianceMode,
    Limits,
    ReceiveMessage,
    SecureDevice,
    decode_command,
)
from ..terminals import Finding, PaymentStatus, initiate_payment
from .network import Capture, FaultAction, Fate
from .world import KeyRing, World


class ForgingDevice(SecureDevice):
    """A device whose keys were extracted and whose applet was replaced.

    It holds a genuine certificate, ignores its own balance and limits, and
    answers ``<Transfer>`` with ``<Receive>`` without debiting anything.
    """

    def _spend_checks(self, amount: int) -> None:
        return None

    def handle_transfer(self, ctx: SessionContext, amount: int, tx_id: bytes) -> ReceiveMessage:
        return ReceiveMessage(amount, tx_id)


# -- forgery bound -------------------------------------------------------------


@dataclass
class ForgeryReport:
    cap: int
    attempts: int
    settled: int
    credited: int
    receiver_sync_consistent: bool
    rejections: list[str] = field(default_factory=list)

    @property
    def bounded(self) -> bool:
        return self.credited <= self.cap


def compromised_device_scenario(seed: int = 0, *, cap: int = 1_000, amount: int = 300, attempts: int = 10,
                                keyring: KeyRing | None = None) -> ForgeryReport:
    """A forger pays one honest receiver repeatedly within a single sync period."""
    world = World(seed, keyring=keyring)
    forger = world.add_user("mallory", device_cls=ForgingDevice,
                            limits=Limits(max_balance=10**12, per_tx_max=10**12, cumulative_max=10**12))
    world.untrusted.add(forger.device.name)
    victim = world.add_user("victim", limits=Limits(max_balance=cap, per_tx_max=cap, cumulative_max=cap))
    start = victim.device.balance
    settled, rejections = 0, []
    for _ in range(attempts):
        world.net.begin("payment")
        out = initiate_payment(world.net, victim.wallet, forger.wallet, amount)
        if out.status is PaymentStatus.SETTLED:
            settled += 1
        else:
            rejections.append(out.reason)
    credited = victim.device.balance - start
    world.net.begin("sync")
    report = world.fi.synchronize(victim.device, victim.pin)
    return ForgeryReport(cap, attempts, settled, credited, report.consistent, rejections)


# -- destroyed money --------------------------------------------------------------


def sealed_device_frames(captures: list[Capture], src: str, dst: str) -> list[Capture]:
    return [c for c in captures if c.src == src and c.dst == dst and c.frame[:1] == bytes([FrameType.SEALED])]


def receive_index(world: World, payer: str, payee: str) -> int:
    """Message index of the sender device's ``<Receive>`` in the last payment run."""
    run = world.net.run
    sender, receiver = world.users[payer].device.name, world.users[payee].device.name
    frames = [c for c in sealed_device_frames(world.net.capture_log, sender, receiver)
              if c.protocol == "payment" and c.run == run]
    return frames[0].index


@dataclass
class DestructionReport:
    amount: int
    sender_debited: bool
    receiver_credited: bool
    in_flight: int
    findings: list[Finding]
    detected_at_sender_sync: bool


def destroyed_money_scenario(seed: int = 0, *, amount: int = 150, variant=None,
                             keyring: KeyRing | None = None) -> DestructionReport:
    """Receiver never completes a payment whose ``<Receive>`` was dropped.

    The receiver still synchronizes (its pending entry is visible to the FI);
    the shortfall surfaces when the sender's debit reaches the FI at the
    sender's next synchronization.
    """
    kw = {} if variant is None else {"variant": variant}
    probe = World(seed, mode=ComplianceMode.TRANSACTION_TRACKING, keyring=keyring, **kw)
    world = World(seed, mode=ComplianceMode.TRANSACTION_TRACKING, keyring=probe.keyring, **kw)
    for w in (probe, world):
        w.add_user("alice", online=1_000)
        w.add_user("bob", online=1_000)
        w.net.begin("withdraw")
        w.fi.withdraw("bob", w.users["bob"].device, 400, w.users["bob"].pin)
    probe.net.begin("payment")
    initiate_payment(probe.net, probe.users["alice"].wallet, probe.users["bob"].wallet, amount)
    index = receive_index(probe, "bob", "alice")

    alice, bob = world.users["alice"], world.users["bob"]
    world.net.schedule(FaultAction.drop("payment", index, occurrence=world.net._runs["payment"] + 1))
    world.net.begin("payment")
    out = initiate_payment(world.net, alice.wallet, bob.wallet, amount)
    debited = bob.device.balance == 400 - amount
    world.net.begin("sync")
    world.fi.synchronize(alice.device, alice.pin)
    before = len(world.fi.findings)
    world.net.begin("sync")
    world.fi.synchronize(bob.device, bob.pin)
    new = world.fi.findings[before:]
    return DestructionReport(amount, debited, alice.device.balance == amount, world.audit().in_flight,
                             list(world.fi.findings),
                             any(f.tx_id == out.tx_id and f.amount == amount for f in new))


# -- replay ------------------------------------------------------------------------


@dataclass
class ReplayReport:
    attempts: int = 0
    rejected: int = 0
    by_strategy: dict[str, int] = field(default_factory=dict)
    double_credits: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.attempts == self.rejected and not self.double_credits and not self.violations


def _fingerprint(world: World) -> tuple:
    return tuple((d.balance, d.state.log, d.state.cumulative_spent) for d in world.devices.values())


def _value_opcode(world: World, cap: Capture) -> int | None:
    """Operation carried by a device-to-device command, read through the key escrow."""
    plain = world.tap._open(cap)
    if not plain or plain[0] != CMD:
        return None
    try:
        op, _ = decode_command(plain)
    except CbdcError:
        return None
    return op if op in (Operation.TRANSFER, Operation.RECEIVE) else None


class LiveReplayer:
    """Observer that re-sends each value-exchange command inside its own live session."""

    def __init__(self, world: World, report: ReplayReport):
        self.world = world
        self.report = report
        self.armed: Capture | None = None
        self.busy = False
        self.seen: list[Capture] = []

    def __call__(self, cap: Capture) -> None:
        if self.busy or cap.fate is not Fate.DELIVERED:
            return
        armed, self.armed = self.armed, None
        if armed is not None:
            self.busy = True
            try:
                _attempt(self.world, self.report, "in-session", [armed])
            finally:
                self.busy = False
        if cap.src in self.world.devices and cap.dst in self.world.devices \
                and _value_opcode(self.world, cap) is not None:
            self.armed = cap
            self.seen.append(cap)


def _attempt(world: World, report: ReplayReport, strategy: str, frames: list[Capture],
             target: str | None = None) -> None:
    before = _fingerprint(world)
    for cap in frames:
        dst = target or cap.dst
        try:
            world.net.inject(cap.src, dst, cap.frame)
        except CbdcError:
            pass
    report.attempts += 1
    report.by_strategy[strategy] = report.by_strategy.get(strategy, 0) + 1
    if _fingerprint(world) == before:
        report.rejected += 1
    else:
        report.violations.append(f"{strategy} replay changed device state")


def replay_campaign(trials: int = 1_000, seed: int = 0, *, payments: int = 30,
                    keyring: KeyRing | None = None) -> ReplayReport:
    """Replay captured ``<Transfer>``/``<Receive>`` commands every way the network allows.

    Strategies: inside the live session right after delivery; into the same
    channel after the session was replaced; as part of a replayed full
    device-to-device conversation; and towards a device that never saw it.
    """
    rng = random.Random(f"replay/{seed}")
    world = World(seed, keyring=keyring)
    names = ["alice", "bob", "carol"]
    for n in names:
        world.add_user(n, online=5_000)
        world.net.begin("withdraw")
        world.fi.withdraw(n, world.users[n].device, 1_000, world.users[n].pin)
    report = ReplayReport()
    live = LiveReplayer(world, report)
    world.net.observers.append(live)
    for _ in range(payments):
        payer, payee = rng.sample(names, 2)
        world.net.begin("payment")
        initiate_payment(world.net, world.users[payee].wallet, world.users[payer].wallet, rng.randint(1, 50))
    world.net.observers.remove(live)

    captured = live.seen
    while report.attempts < trials:
        cap = rng.choice(captured)
        strategy = rng.choice(("same-channel", "full-session", "other-device"))
        if strategy == "same-channel":
            _attempt(world, report, strategy, [cap])
        elif strategy == "other-device":
            others = [d for d in world.devices if d not in (cap.src, cap.dst)]
            _attempt(world, report, strategy, [cap], target=rng.choice(others))
        else:
            convo = [c for c in world.net.capture_log[:cap.seq + 1]
                     if c.protocol == cap.protocol and c.run == cap.run and c.src == cap.src
                     and c.dst == cap.dst and c.fate is Fate.DELIVERED]
            _attempt(world, report, strategy, convo)
    report.double_credits = sum(1 for n in world.tap.credit_count.values() if n > 1)
    report.violations.extend(world.audit().violations)
    return report


# -- privilege escalation ------------------------------------------------------------


@dataclass
class EscalationReport:
    attempts: int
    rejected: int


def escalation_trials(trials: int = 100, seed: int = 0, keyring: KeyRing | None = None) -> EscalationReport:
    """A wallet (user-terminal certificate) tries to mint offline money via ``<Withdraw>``."""
    world = World(seed, keyring=keyring)
    user = world.add_user("eve", online=1_000)
    rejected = 0
    rng = random.Random(f"escalate/{seed}")
    for _ in range(trials):
        start = user.device.balance
        world.net.begin("escalation")
        user.wallet.drop_sessions()
        try:
            user.wallet.device_command(Operation.WITHDRAW, [(T_AMOUNT, tlv.u64(rng.randint(1, 500)))])
        except PermissionDenied:
            rejected += user.device.balance == start
        except CbdcError:
            pass
    return EscalationReport(trials, rejected)


__all__ = [
    "DestructionReport", "EscalationReport", "ForgeryReport", "ForgingDevice", "LiveReplayer", "ReplayReport",
    "compromised_device_scenario", "destroyed_money_scenario", "escalation_trials", "receive_index",
    "replay_campaign", "sealed_device_frames",
]
