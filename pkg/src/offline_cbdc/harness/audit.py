"""Money-supply auditing from captured traffic.

The tap is handed each device's session keys as sessions come up (a key
escrow that exists only in the simulator) and decrypts what devices put on
the wire.  Debits, credits and bank operations are inferred from those
emissions alone, so a device whose internal bookkeeping drifts from what it
actually said shows up as a mismatch instead of being trusted.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .. import crypto_core as cc
from .. import encoding as tlv
from ..errors import DecodeError, SW_OK
from ..pki import Operation
from ..secure_channel import FrameType, SessionContext
from ..secure_device import (
    CMD,
    RSP,
    T_ACK_OP,
    T_AMOUNT,
    T_OP_ID,
    T_TX_ID,
    Direction,
    SecureDevice,
    decode_command,
    decode_response,
)
from .network import Capture, Fate

_SEARCH_BACK = 4


@dataclass
class SessionTap:
    devices: set[str] = field(default_factory=set)
    sessions: dict[tuple[str, str], SessionContext] = field(default_factory=dict, repr=False)
    debits: dict[bytes, tuple[str, int]] = field(default_factory=dict)
    credits: dict[bytes, tuple[str, int]] = field(default_factory=dict)
    credit_count: Counter = field(default_factory=Counter)
    receive_emissions: Counter = field(default_factory=Counter)
    bank_applied: dict[bytes, tuple[str, str, int]] = field(default_factory=dict)

    def observe_session(self, device: str, channel: str, ctx: SessionContext) -> None:
        self.devices.add(device)
        self.sessions[(device, channel)] = ctx

    def _open(self, cap: Capture) -> bytes | None:
        ctx = self.sessions.get((cap.src, cap.dst))
        if ctx is None or not cap.frame or cap.frame[0] != FrameType.SEALED:
            return None
        sealed = cap.frame[1:]
        for counter in range(ctx.send_counter, max(0, ctx.send_counter - _SEARCH_BACK), -1):
            plain = cc.open_at(ctx.keys, counter, sealed, ctx.out_direction)
            if plain is not None:
                return plain
        return None

    def observe_capture(self, cap: Capture) -> None:
        if cap.src not in self.devices or cap.fate in (Fate.REPLAYED, Fate.LATE):
            return
        plain = self._open(cap)
        if not plain:
            return
        try:
            if plain[0] == CMD:
                op, f = decode_command(plain)
                if op == Operation.RECEIVE:
                    tx_id, amount = f[T_TX_ID], tlv.read_u64(f[T_AMOUNT])
                    self.receive_emissions[tx_id] += 1
                    self.debits.setdefault(tx_id, (cap.src, amount))
            elif plain[0] == RSP:
                sw, f = decode_response(plain)
                if sw != SW_OK or T_ACK_OP not in f:
                    return
                op = f[T_ACK_OP][0]
                amount = tlv.read_u64(f[T_AMOUNT])
                if op == Operation.RECEIVE:
                    tx_id = f[T_TX_ID]
                    self.credit_count[tx_id] += 1
                    self.credits.setdefault(tx_id, (cap.src, amount))
                elif op in (Operation.WITHDRAW, Operation.DEPOSIT) and T_OP_ID in f:
                    kind = "withdraw" if op == Operation.WITHDRAW else "deposit"
                    self.bank_applied.setdefault(f[T_OP_ID], (cap.src, kind, amount))
        except (DecodeError, KeyError, IndexError):
            return

    # -- derived quantities ---------------------------------------------------

    def in_flight_payments(self) -> int:
        debited = sum(a for _, a in self.debits.values())
        credited = sum(a for _, a in self.credits.values())
        return debited - credited

    def net_flow(self, device: str) -> int:
        """Value a device has gained or lost according to what it transmitted."""
        total = 0
        for src, amount in self.debits.values():
            if src == device:
                total -= amount
        for dst, amount in self.credits.values():
            if dst == device:
                total += amount
        for dev, kind, amount in self.bank_applied.values():
            if dev == device:
                total += amount if kind == "withdraw" else -amount
        return total


@dataclass
class ConservationAudit:
    total_online: int
    total_offline: int
    in_flight: int
    grand_total: int
    violations: list[str] = field(default_factory=list)

    @property
    def accounted(self) -> int:
        return self.total_online + self.total_offline + self.in_flight

    @property
    def balanced(self) -> bool:
        return self.accounted == self.grand_total

    @property
    def ok(self) -> bool:
        return not self.violations


def device_invariants(dev: SecureDevice) -> list[str]:
    s = dev.state
    out = []
    if not 0 <= s.balance <= s.limits.max_balance:
        out.append(f"{dev.name}: balance {s.balance} outside [0, {s.limits.max_balance}]")
    if s.cumulative_spent > s.limits.cumulative_max:
        out.append(f"{dev.name}: cumulative {s.cumulative_spent} > {s.limits.cumulative_max}")
    pending = [i for i, e in enumerate(s.log) if e.pending]
    if len(pending) > 1 or (pending and pending[0] != len(s.log) - 1):
        out.append(f"{dev.name}: pending entries at {pending}")
    for e in s.log:
        if not e.pending and e.direction is Direction.OUTGOING and e.amount > s.limits.per_tx_max:
            out.append(f"{dev.name}: outgoing {e.amount} above per-transaction limit")
    return out


def audit(*, online: int, devices: list[SecureDevice], tap: SessionTap, minted: int,
          in_doubt: list, initial_offline: dict[str, int], trusted: set[str] | None = None) -> ConservationAudit:
    """Check conservation and per-device consistency.

    ``in_doubt`` lists the FI's unresolved withdraw/deposit operations;
    ``trusted`` restricts the per-device consistency checks (a forging
    device is expected to fail them).
    """
    trusted = set(d.name for d in devices) if trusted is None else trusted
    in_flight = tap.in_flight_payments()
    for op in in_doubt:
        applied = op.op_id in tap.bank_applied
        if op.kind == "withdraw" and not applied:
            in_flight += op.amount
        elif op.kind == "deposit" and applied:
            in_flight += op.amount
    offline = sum(d.balance for d in devices)
    result = ConservationAudit(online, offline, in_flight, minted)
    v = result.violations
    if not result.balanced:
        v.append(f"conservation: online {online} + offline {offline} + in-flight {in_flight} != {minted}")
    for tx_id, n in tap.credit_count.items():
        if n > 1:
            v.append(f"tx {tx_id.hex()[:8]} credited {n} times")
        debit = tap.debits.get(tx_id)
        if debit is None or debit[1] != tap.credits[tx_id][1]:
            v.append(f"tx {tx_id.hex()[:8]} credited without a matching debit")
    outgoing: Counter = Counter()
    for d in devices:
        for e in d.state.log:
            if not e.pending and e.direction is Direction.OUTGOING:
                outgoing[e.tx_id] += 1
    for tx_id, n in outgoing.items():
        if n > 1:
            v.append(f"tx {tx_id.hex()[:8]} completed outgoing on {n} devices")
    for d in devices:
        if d.name not in trusted:
            continue
        v.extend(device_invariants(d))
        expected = initial_offline.get(d.name, 0) + tap.net_flow(d.name)
        if d.balance != expected:
            v.append(f"{d.name}: balance {d.balance} but traffic implies {expected}")
    return result
