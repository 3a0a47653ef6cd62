"""Shared builders for unit tests that drive a device without a network."""

import random
from dataclasses import replace

from oracles import receive_verdict, spend_verdict

from offline_cbdc import crypto_core as cc
from offline_cbdc.errors import CbdcError
from offline_cbdc.harness.world import EPOCH, KeyRing
from offline_cbdc.pki import Role
from offline_cbdc.secure_channel import SessionContext, Variant
from offline_cbdc.secure_device import ComplianceMode, Limits, SecureDevice


def fake_ctx(role: Role | None, peer_pk: bytes = b"\x04" + bytes(64), *, user: bool = True,
             anonymous: bool = False) -> SessionContext:
    """A session context as the device sees it after a handshake with ``role``."""
    keys = cc.SessionKeys(bytes(32), bytes([1]) * 32, bytes([2]) * 32)
    return SessionContext(keys, role, peer_pk, False, Variant.V1_EPHEMERAL,
                          user_verified=user, anonymous_self=anonymous)


def make_device(keyring: KeyRing, name: str = "unit.se", *, balance: int = 0,
                limits: Limits = Limits(1_000, 800, 1_000),
                mode: ComplianceMode = ComplianceMode.BALANCE_TRACKING, seed: int | None = None,
                **kw) -> SecureDevice:
    keys, cert = keyring.identity(name, Role.SECURE_DEVICE)
    return SecureDevice(name, keys, cert, keyring.ca.public_key, limits=limits,
                        rng=random.Random(name if seed is None else seed), clock=lambda: EPOCH, mode=mode, balance=balance, **kw)


# -- condition-proof matrix ----------------------------------------------------

CONDITION_CASES = ("satisfied", "bad-ca-signature", "expired", "foreign-credential", "bad-binding",
                   "below-threshold", "binding-mutation")


def condition_case(case: str, rng: random.Random, ca: cc.KeyPair, rogue_ca: cc.KeyPair):
    """Build (proof, public inputs, expected verdict, failing line) for one matrix cell.

    Witness values are randomised; each non-satisfied case breaks exactly one
    assertion of the condition check.
    """
    from offline_cbdc import zk_attest as zk

    now = EPOCH + rng.randint(0, 10**6)
    threshold = rng.randint(0, 100)
    value = threshold + rng.randint(0, 50)
    holder = cc.generate_keypair(rng)
    tx_id = cc.random_bytes(rng, 16)
    expiry = now + rng.randint(1, 10**6)
    issuer = rogue_ca if case == "bad-ca-signature" else ca
    if case == "expired":
        expiry = now - rng.randint(0, 10**6)
    if case == "below-threshold":
        value = threshold - rng.randint(1, 50)
    subject = cc.generate_keypair(rng).public if case == "foreign-credential" else holder.public
    vc = zk.issue_credential(issuer, subject, {"age": value, "tier": rng.randint(0, 9)}, expiry)
    public = zk.ConditionPublicInputs(threshold, "age", ca.public, tx_id, now)
    signed_for = cc.random_bytes(rng, 16) if case == "bad-binding" else tx_id
    sig = cc.sign(holder, zk.binding_message(zk.ConditionPublicInputs(threshold, "age", ca.public, signed_for, now)))
    proof = zk.assemble(vc, holder.public, sig)
    if case == "binding-mutation":
        public = zk.ConditionPublicInputs(threshold, "age", ca.public, cc.random_bytes(rng, 16), now)
    line = {"bad-ca-signature": 1, "expired": 2, "foreign-credential": 3, "bad-binding": 4,
            "below-threshold": 5, "binding-mutation": 4}.get(case)
    return proof, public, case == "satisfied", line


# -- limits grid ------------------------------------------------------------

_GRID_USER = fake_ctx(Role.USER_TERMINAL)
_GRID_TX = b"\x11" * 16


def limits_samples(n: int, seed: int):
    """(balance, max_balance, per_tx_max, cumulative_max, spent, amount) over a small grid."""
    rng = random.Random(seed)
    for _ in range(n):
        max_balance = rng.randint(0, 60)
        yield (rng.randint(0, max_balance), max_balance, rng.randint(0, 60), rng.randint(0, 60),
               rng.randint(0, 60), rng.randint(-2, 70))


def limits_disagreements(keyring, samples) -> int:
    """Run each sample through the device and count verdicts that differ from the oracle."""
    src = make_device(keyring, "grid-src.se", balance=0, limits=Limits(0, 0, 0))
    dst = make_device(keyring, "grid-dst.se", balance=0, limits=Limits(0, 0, 0))
    base_src, base_dst = src.state, dst.state
    bad = 0
    for balance, cap, per_tx, cumulative, spent, amount in samples:
        limits = Limits(cap, per_tx, cumulative)
        src.state = replace(base_src, balance=balance, limits=limits, cumulative_spent=min(spent, cumulative))
        dst.state = replace(base_dst, balance=balance, limits=limits)
        for dev, call, expected in (
            (src, lambda: src.check_and_accept(_GRID_USER, amount, _GRID_TX),
             spend_verdict(balance, per_tx, cumulative, min(spent, cumulative), amount)),
            (dst, lambda: dst.create_request(_GRID_USER, amount), receive_verdict(balance, cap, amount)),
        ):
            before = dev.state
            try:
                call()
                got = "ok"
            except CbdcError as exc:
                got = type(exc).__name__
                if dev.state != before:
                    bad += 1
            bad += got != expected
    return bad
