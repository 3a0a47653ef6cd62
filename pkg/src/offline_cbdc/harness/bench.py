"""Message and byte counts for the basic operations as the log grows.

Wall-clock latency on real secure elements is hardware-bound, so these
benchmarks report what is portable: how many messages each operation
exchanges and how many bytes they carry, for log sizes ``n``.
"""

from __future__ import annotations

import csv
import io
import random
from dataclasses import asdict, dataclass, fields

from .. import crypto_core as cc
from ..pki import CertificateAuthority, Role
from ..secure_channel import Variant, initiate, listen, run_handshake
from ..secure_device import ComplianceMode
from ..terminals import PaymentStatus, initiate_payment
from .network import message_counts
from .world import EPOCH, KeyRing, World

DEFAULT_SIZES = (0, 1, 4, 10)
BENCH_VARIANTS = (Variant.V1_EPHEMERAL, Variant.V2_NONCE_STATIC)
BENCH_MODES = tuple(ComplianceMode)
PAYMENT_AMOUNT = 10


@dataclass(frozen=True)
class BenchRow:
    variant: str
    mode: str
    n: int
    payment_msgs: int
    payment_bytes: int
    sync_msgs: int
    sync_bytes: int
    sync_payload: int
    withdraw_msgs: int
    withdraw_bytes: int
    deposit_msgs: int
    deposit_bytes: int


def _last_run(world: World, protocol: str) -> tuple[int, int]:
    counts = message_counts(world.net.capture_log, protocol)
    return counts[max(counts)]


def _pay(world: World, payer: str, payee: str, fresh: bool = False) -> None:
    a, b = world.users[payer], world.users[payee]
    if fresh:
        a.wallet.drop_sessions()
        b.wallet.drop_sessions()
    world.net.begin("payment")
    out = initiate_payment(world.net, b.wallet, a.wallet, PAYMENT_AMOUNT)
    if out.status is not PaymentStatus.SETTLED:
        raise RuntimeError(f"benchmark payment failed: {out.reason}")


def measure(variant: Variant, mode: ComplianceMode, n: int, *, keyring: KeyRing | None = None) -> BenchRow:
    """One benchmark row: every operation measured with ``n`` entries in the payer's log."""
    world = World(0, variant=variant, mode=mode, keyring=keyring)
    world.add_user("alice", online=5_000)
    world.add_user("bob", online=5_000)
    bob = world.users["bob"]
    world.net.begin("withdraw")
    world.fi.withdraw("bob", bob.device, 2_000, bob.pin)

    for _ in range(n):
        _pay(world, "bob", "alice")
    world.net.begin("sync")
    report = world.fi.synchronize(bob.device, bob.pin)
    if mode is not ComplianceMode.COMPLIANCE_FREE and report.n != n:
        raise RuntimeError(f"expected {n} entries at sync, device reported {report.n}")
    sync_msgs, sync_bytes = _last_run(world, "sync")

    for _ in range(n):
        _pay(world, "bob", "alice")
    _pay(world, "bob", "alice", fresh=True)
    pay_msgs, pay_bytes = _last_run(world, "payment")

    world.net.begin("withdraw")
    world.fi.withdraw("bob", bob.device, 100, bob.pin)
    wd = _last_run(world, "withdraw")
    world.net.begin("deposit")
    world.fi.deposit("bob", bob.device, 100, bob.pin)
    dp = _last_run(world, "deposit")
    return BenchRow(variant.name, mode.name, n, pay_msgs, pay_bytes, sync_msgs, sync_bytes, report.payload_bytes,
                    wd[0], wd[1], dp[0], dp[1])


def bench(sizes=DEFAULT_SIZES, variants=BENCH_VARIANTS, modes=BENCH_MODES, seed: int = 0) -> list[BenchRow]:
    keyring = KeyRing(seed)
    return [measure(v, m, n, keyring=keyring) for v in variants for m in modes for n in sizes]


def handshake_asym_ops(variant: Variant, seed: int = 0) -> tuple[int, int]:
    """Asymmetric operations (DH, sign, verify, keygen) per side for one handshake."""
    rng = random.Random(f"asym/{seed}")
    ca = CertificateAuthority.generate(rng)
    parties = []
    for role in (Role.USER_TERMINAL, Role.SECURE_DEVICE):
        keys = cc.generate_keypair(rng)
        parties.append((keys, ca.issue(keys.public, role, EPOCH + 86_400, now=EPOCH)))
    (ik, ic), (rk, rc) = parties
    init, hello = initiate(ic, ik, variant, ca_public=ca.public_key, rng=rng, now=EPOCH)
    resp = listen(rc, rk, variant, ca_public=ca.public_key, rng=rng, now=EPOCH)
    run_handshake(init, hello, resp)
    return init.asym_ops, resp.asym_ops


COLUMNS = [f.name for f in fields(BenchRow)]


def to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(asdict(r))
    return buf.getvalue()


def to_table(rows: list[BenchRow]) -> str:
    cells = [COLUMNS] + [[str(v) for v in asdict(r).values()] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def asym_table(seed: int = 0) -> str:
    lines = ["variant          initiator  responder  total"]
    for v in BENCH_VARIANTS:
        i, r = handshake_asym_ops(v, seed)
        lines.append(f"{v.name:<16s} {i:>9d}  {r:>9d}  {i + r:>5d}")
    return "\n".join(lines)
