"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (also repeated in the
terminal summary) and then asserts.
"""

import random
from dataclasses import replace

import pytest
from conftest import ACCEPTANCE_LINES
from helpers import CONDITION_CASES, condition_case, limits_disagreements, limits_samples
from oracles import fold_history

from offline_cbdc import crypto_core as cc
from offline_cbdc import encoding as tlv
from offline_cbdc import zk_attest as zk
from offline_cbdc.errors import CbdcError, PermissionDenied
from offline_cbdc.harness import adversary
from offline_cbdc.harness.bench import bench
from offline_cbdc.harness.fuzz import fuzz
from offline_cbdc.harness.network import FaultAction
from offline_cbdc.harness.world import EPOCH, World
from offline_cbdc.pki import Operation, Role
from offline_cbdc.secure_channel import KDF_LABEL, Variant, initiate, listen, run_handshake
from offline_cbdc.secure_device import (
    T_AMOUNT,
    T_OP_ID,
    T_PHASE,
    T_PIN,
    T_SIDE,
    T_TX_ID,
    Command,
    ComplianceMode,
    Direction,
    Limits,
    LogEntry,
    Side,
    SyncPhase,
    TxStatus,
)
from offline_cbdc.terminals import DeviceLink, SyncOutcome, drive_retransmission, handshake, initiate_payment

V1, V2 = Variant.V1_EPHEMERAL, Variant.V2_NONCE_STATIC
TRACKING = (ComplianceMode.BALANCE_TRACKING, ComplianceMode.TRANSACTION_TRACKING)
PAYMENT_LENGTH = 39

# the permission table, rows by operation, columns (FI terminal, user terminal, secure device)
EXPECTED_PERMISSIONS = {
    Operation.WITHDRAW: (True, False, False),
    Operation.REQUEST: (False, True, False),
    Operation.ACCEPT: (False, True, False),
    Operation.TRANSFER: (False, False, True),
    Operation.RECEIVE: (False, False, True),
    Operation.RETRANSMIT: (False, False, True),
    Operation.SYNCHRONIZE: (True, False, False),
    Operation.DEPOSIT: (True, False, False),
}
ROLES = (Role.FI_TERMINAL, Role.USER_TERMINAL, Role.SECURE_DEVICE)


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {number}: {title} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# -- 1 -------------------------------------------------------------------------


@pytest.mark.slow
def test_01_conservation_fuzz():
    result = fuzz(10_000, 0)
    covered = len(result.universe) - len(result.missing_coverage)
    ok = result.ok and not result.missing_coverage and result.elapsed < 120.0 \
        and result.recovered == result.iterations
    report(1, "conservation under 10,000 fuzzed runs", ok,
           f"failures {len(result.failures)}, recovered {result.recovered}/{result.iterations}, "
           f"drop coverage {covered}/{len(result.universe)}, {result.elapsed:.1f}s")


# -- 2 -------------------------------------------------------------------------


@pytest.mark.slow
def test_02_replay_rejected(keyring):
    r = adversary.replay_campaign(1_000, 0, keyring=keyring)
    ok = r.attempts >= 1_000 and r.rejected == r.attempts and r.double_credits == 0 and not r.violations
    report(2, "captured Transfer/Receive replays rejected", ok,
           f"{r.rejected}/{r.attempts} rejected, double credits {r.double_credits}")


# -- 3 -------------------------------------------------------------------------


def _drop_and_recover(keyring, variant, index):
    """Returns a problem description, or None if the payment settled exactly once."""
    world = World(0, variant=variant, keyring=keyring)
    alice = world.add_user("alice")
    bob = world.add_user("bob", offline=1_000)
    fault = FaultAction.drop("payment", index, occurrence=1)
    world.net.schedule(fault)
    world.net.begin("payment")
    out = initiate_payment(world.net, alice.wallet, bob.wallet, 200)
    for _ in range(4):
        if out.settled:
            break
        world.net.begin("payment")
        out = drive_retransmission(world.net, alice.wallet, bob.wallet, out)
    credits = [e for e in alice.device.state.log if e.direction is Direction.INCOMING and not e.pending]
    debits = [e for e in bob.device.state.log if e.direction is Direction.OUTGOING and not e.pending]
    audit = world.audit()
    checks = {
        "fault fired": fault.fired,
        "settled": out.settled,
        "balances": (alice.device.balance, bob.device.balance) == (200, 800),
        "one credit": [e.amount for e in credits] == [200],
        "one debit": [e.amount for e in debits] == [200],
        "same tx": credits and debits and credits[0].tx_id == debits[0].tx_id,
        "audit": audit.ok and audit.balanced and audit.in_flight == 0,
    }
    bad = [k for k, v in checks.items() if not v]
    return f"{variant.name}@{index}: {', '.join(bad)}" if bad else None


def test_03_atomicity_exhaustive_drops(keyring):
    problems, cases = [], 0
    for variant in (V1, V2):
        for index in range(PAYMENT_LENGTH):
            cases += 1
            p = _drop_and_recover(keyring, variant, index)
            if p:
                problems.append(p)
    report(3, "payment drop at every index recovers exactly once", not problems,
           f"{cases - len(problems)}/{cases} cases" + (f"; {problems[:3]}" if problems else ""))


# -- 4 -------------------------------------------------------------------------


def _probe(world, target, role, op) -> bool:
    """True unless the device refuses ``op`` on a real session from ``role``."""
    name = f"probe-{role.name.lower()}"
    keys, cert = world.keyring.identity(name, role)
    ctx = handshake(world.net, name, target, cert, keys, world.variant, ca_public=world.ca_public,
                    rng=random.Random(name), now=world.now(), accept_roles=frozenset({Role.SECURE_DEVICE}))
    link = DeviceLink(world.net, name, target, ctx)
    try:
        link.command(Command.VERIFY_PIN, [(T_PIN, b"1234")])
    except CbdcError:
        pass
    fields = [(T_AMOUNT, tlv.u64(1)), (T_TX_ID, bytes(16)), (T_SIDE, bytes([Side.SENDER])),
              (T_PHASE, bytes([SyncPhase.QUERY])), (T_OP_ID, bytes(16))]
    try:
        link.command(op, fields)
    except PermissionDenied:
        return False
    except CbdcError:
        return True
    return True


def test_04_permission_table(keyring):
    world = World(0, keyring=keyring)
    target = world.add_user("target", offline=100).device
    matches = 0
    for op, row in EXPECTED_PERMISSIONS.items():
        for role, allowed in zip(ROLES, row):
            matches += _probe(world, target, role, op) is allowed
    report(4, "operation x role probes match the permission table", matches == 24, f"{matches}/24")


# -- 5 -------------------------------------------------------------------------


@pytest.mark.slow
def test_05_limits_oracle(keyring):
    n = 100_000
    bad = limits_disagreements(keyring, limits_samples(n, seed=2024))
    report(5, "limit checks agree with the predicate oracle", bad == 0, f"{bad} disagreements over {n} samples")


# -- 6 -------------------------------------------------------------------------


def _corrupt(device, kind, rng):
    s = device.state
    done = [i for i, e in enumerate(s.log) if not e.pending]
    if kind != "balance" and not done:
        kind = "balance"
    if kind == "balance":
        delta = rng.choice([-1, 1]) * rng.randint(1, 50)
        if s.balance + delta < 0:
            delta = -delta
        device.state = replace(s, balance=s.balance + delta)
    elif kind == "amount":
        i = rng.choice(done)
        log = list(s.log)
        log[i] = replace(log[i], amount=log[i].amount + rng.randint(1, 50))
        device.state = replace(s, log=tuple(log))
    elif kind == "drop-entry":
        i = rng.choice(done)
        device.state = replace(s, log=s.log[:i] + s.log[i + 1:])
    else:
        fake = LogEntry(cc.random_bytes(rng, 16), rng.randint(1, 50), Direction.INCOMING, TxStatus.COMPLETED,
                        bytes(65))
        device.state = replace(s, log=s.log + (fake,))
    return kind


@pytest.mark.slow
def test_06_sync_replay(keyring):
    rng = random.Random("sync-histories")
    big = Limits(10**9, 10**9, 10**9)
    worlds = {m: World(6, keyring=keyring, mode=m, limits=big) for m in TRACKING}
    pools = {m: w.add_user("pool", offline=10**7) for m, w in worlds.items()}
    consistent = clean = detected = corrupted = 0
    for trial in range(1_000):
        mode = TRACKING[trial % 2]
        world, pool = worlds[mode], pools[mode]
        start = rng.randint(0, 500)
        user = world.add_user(f"h{trial}", offline=start)
        history = []
        for _ in range(rng.randint(0, 8)):
            balance = user.device.balance
            if balance and rng.random() < 0.5:
                amount = rng.randint(1, balance)
                world.net.begin("payment")
                assert initiate_payment(world.net, pool.wallet, user.wallet, amount).settled
                history.append(("out", amount))
            else:
                amount = rng.randint(1, 300)
                world.net.begin("payment")
                assert initiate_payment(world.net, user.wallet, pool.wallet, amount).settled
                history.append(("in", amount))
        if len(pool.device.state.log) > 40:
            world.fi.synchronize(pool.device)
        if trial % 4 >= 2:
            corrupted += 1
            _corrupt(user.device, rng.choice(["balance", "amount", "drop-entry", "extra-entry"]), rng)
            rep = world.fi.synchronize(user.device)
            detected += (rep.outcome is SyncOutcome.MISMATCH and world.fi.entry(user.device.public_key).blocked
                         and user.device.state.blocked)
        else:
            clean += 1
            rep = world.fi.synchronize(user.device)
            expected = fold_history(start, history)
            consistent += (rep.consistent and rep.replayed_balance == expected == user.device.balance
                           and world.fi.entry(user.device.public_key).last_synced_balance == expected)
    ok = consistent == clean and detected == corrupted
    report(6, "FI replay reproduces device balances; corruption blocks the card", ok,
           f"consistent {consistent}/{clean}, corruption detected {detected}/{corrupted}")


# -- 7, 8 ------------------------------------------------------------------------


BAL, TX = (m.name for m in TRACKING)
TRACKED = (BAL, TX)


@pytest.fixture(scope="module")
def bench_rows():
    return bench((0, 1, 4, 10), seed=0)


def test_07_payment_cost_constant(bench_rows):
    groups: dict = {}
    for r in bench_rows:
        groups.setdefault((r.variant, r.mode), set()).add((r.payment_msgs, r.payment_bytes))
    flat = [k for k, v in groups.items() if len(v) == 1]
    detail = ", ".join(f"{v}/{m}: {next(iter(groups[(v, m)]))}" for v, m in sorted(groups)
                       if m == "TRANSACTION_TRACKING")
    report(7, "payment messages and bytes independent of n", len(flat) == len(groups),
           f"{len(flat)}/{len(groups)} groups constant; {detail}")


def test_08_sync_growth(bench_rows):
    by = {(r.variant, r.mode, r.n): r.sync_payload for r in bench_rows}
    sizes, variants = (0, 1, 4, 10), sorted({r.variant for r in bench_rows})
    increasing = all(by[(v, m, a)] < by[(v, m, b)] for v in variants for m in TRACKED
                     for a, b in zip(sizes, sizes[1:]))
    tx_heavier = all(by[(v, TX, n)] >= by[(v, BAL, n)] for v in variants for n in sizes)
    series = {m: [by[(variants[0], m, n)] for n in sizes] for m in TRACKED}
    report(8, "sync payload grows with n, transaction tracking heaviest", increasing and tx_heavier,
           f"balance {series[BAL]}, tx {series[TX]} bytes at n={list(sizes)}")


# -- 9 -------------------------------------------------------------------------


def _pair(keyring, variant, resp_variants, seed):
    a_keys, a_cert = keyring.identity("hs-a.se", Role.SECURE_DEVICE)
    b_keys, b_cert = keyring.identity("hs-b.se", Role.SECURE_DEVICE)
    ca = keyring.ca.public_key
    init, hello = initiate(a_cert, a_keys, variant, ca_public=ca, rng=random.Random(seed), now=EPOCH)
    resp = listen(b_cert, b_keys, resp_variants, ca_public=ca, rng=random.Random(-seed - 1), now=EPOCH)
    return init, hello, resp, a_keys, b_keys


def test_09_handshake_variants(keyring):
    v1_keys = set()
    for seed in range(100):
        init, hello, resp, *_ = _pair(keyring, V1, {V1}, seed)
        a, b = run_handshake(init, hello, resp)
        assert a.keys == b.keys
        v1_keys.add(a.keys)
    recomputed = 0
    for seed in range(100):
        init, hello, resp, a_keys, b_keys = _pair(keyring, V2, {V2}, seed)
        a, _ = run_handshake(init, hello, resp)
        context = KDF_LABEL + bytes([V2]) + a_keys.public + b_keys.public + init.nonce
        recomputed += cc.kdf(cc.SharedSecret(cc.dh(a_keys, b_keys.public)), context) == a.keys
    cross_failed = 0
    for seed in range(100):
        for ours, theirs in ((V1, V2), (V2, V1)):
            init, hello, resp, *_ = _pair(keyring, ours, {theirs}, seed)
            try:
                run_handshake(init, hello, resp)
            except CbdcError:
                cross_failed += 1
    ok = len(v1_keys) == 100 and recomputed == 100 and cross_failed == 200
    report(9, "handshake variant properties", ok,
           f"V1 distinct {len(v1_keys)}/100, V2 recomputed {recomputed}/100, cross-variant failed {cross_failed}/200")


# -- 10 ------------------------------------------------------------------------


def test_10_condition_matrix():
    rng = random.Random("matrix")
    ca, rogue = cc.generate_keypair(rng), cc.generate_keypair(rng)
    per_case = 150
    cells = {}
    for case in CONDITION_CASES:
        right = 0
        for _ in range(per_case):
            proof, public, expected, _ = condition_case(case, rng, ca, rogue)
            right += zk.verify_condition(proof, public) is expected
        cells[case] = right == per_case
    trials = per_case * len(CONDITION_CASES)
    passed = sum(cells.values())
    report(10, "condition-proof matrix", passed == 7, f"{passed}/7 cells over {trials} randomized trials")


# -- 11 ------------------------------------------------------------------------


def test_11_compromised_device_bounds():
    forged = adversary.compromised_device_scenario(0)
    destroyed = adversary.destroyed_money_scenario(0)
    ok = forged.bounded and forged.credited <= forged.cap and destroyed.detected_at_sender_sync
    report(11, "forged receives capped, destroyed value detected", ok,
           f"credited {forged.credited} <= cap {forged.cap}; destruction of {destroyed.amount} detected "
           f"{destroyed.detected_at_sender_sync}")
