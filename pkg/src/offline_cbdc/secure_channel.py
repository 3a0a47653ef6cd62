"""Mutual authentication handshake and the sealed channel it produces.

Four frames, initiator first::

    HELLO   variant, initiator certificate, certificate request
    CERT    responder certificate            (anonymous mode: responder epk)
    KEYX    initiator epk (V1)  or  nonce (V2 / anonymous)
    FINISH  responder epk (V1 only), receipt

The receipt is an HMAC under the receipt key over the hash of every byte
exchanged so far, so tampering with any handshake frame surfaces as
``BadReceipt`` on the initiator.  In V1 the shared secret is
``DH(static) | DH(ephemeral)``; in V2 it is ``DH(static)`` only and the
initiator's nonce enters the KDF context.  The anonymous mode is used for
cash withdrawals: the device answers with a throwaway key instead of its
certificate and the secret is ``DH(device ephemeral, FI static)``.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass, field
from enum import Enum, IntEnum

from . import crypto_core as cc
from . import encoding as tlv
from .errors import (
    BadReceipt,
    CbdcError,
    CertificateRejected,
    DecodeError,
    HandshakeAborted,
    OutOfOrderMessage,
)
from .pki import ALL_ROLES, ParticipationCertificate, Role, verify_certificate


class Variant(IntEnum):
    V1_EPHEMERAL = 1
    V2_NONCE_STATIC = 2
    ANONYMOUS = 3


class FrameType(IntEnum):
    HELLO = 0x01
    CERT = 0x02
    KEYX = 0x03
    FINISH = 0x04
    SEALED = 0x10
    ERROR = 0x1F


class Phase(Enum):
    IDLE = "idle"
    SENT_CERT_REQUEST = "sent-cert-request"
    CERTS_EXCHANGED = "certs-exchanged"
    SENT_EPHEMERAL = "sent-ephemeral"
    SENT_NONCE = "sent-nonce"
    ESTABLISHED = "established"
    FAILED = "failed"


TAG_VARIANT = 0x20
TAG_CERT = 0x21
TAG_CERT_REQUEST = 0x22
TAG_EPK = 0x23
TAG_NONCE = 0x24
TAG_RECEIPT = 0x25
TAG_STATUS = 0x26

RECEIPT_SIZE = 16
KDF_LABEL = b"offline-cbdc/session/v1"


def frame(kind: FrameType, fields: list[tuple[int, bytes]]) -> bytes:
    return bytes([kind]) + tlv.encode(fields)


def error_frame(status_word: int) -> bytes:
    return frame(FrameType.ERROR, [(TAG_STATUS, status_word.to_bytes(2, "big"))])


def frame_type(data: bytes) -> FrameType | None:
    if not data:
        return None
    try:
        return FrameType(data[0])
    except ValueError:
        return None


def error_status(data: bytes) -> int:
    """Status word carried by an ERROR frame."""
    fields = tlv.decode_map(data[1:], required=(TAG_STATUS,))
    return int.from_bytes(tlv.fixed(fields[TAG_STATUS], 2, "status"), "big")


@dataclass
class SessionContext:
    keys: cc.SessionKeys
    peer_role: Role | None
    peer_pk: bytes
    initiator: bool
    variant: Variant
    send_counter: int = 0
    recv_counter: int = 0
    # endpoint-local annotations, never transmitted
    user_verified: bool = False
    anonymous_self: bool = False

    @property
    def out_direction(self) -> int:
        return cc.DIRECTION_INITIATOR if self.initiator else cc.DIRECTION_RESPONDER

    @property
    def in_direction(self) -> int:
        return cc.DIRECTION_RESPONDER if self.initiator else cc.DIRECTION_INITIATOR


def send(ctx: SessionContext, payload: bytes) -> bytes:
    counter = ctx.send_counter + 1
    sealed = cc.seal(ctx.keys, counter, payload, ctx.out_direction)
    ctx.send_counter = counter
    return bytes([FrameType.SEALED]) + sealed


def receive(ctx: SessionContext, data: bytes) -> bytes:
    """Open a sealed frame; counters only advance on success."""
    if frame_type(data) is not FrameType.SEALED:
        raise DecodeError("not a sealed frame")
    payload = cc.unseal(ctx.keys, ctx.recv_counter + 1, data[1:], ctx.in_direction)
    ctx.recv_counter += 1
    return payload


@dataclass
class HandshakeState:
    initiator: bool
    variants: frozenset[Variant]
    keys: cc.KeyPair | None
    cert: ParticipationCertificate | None
    ca_public: bytes
    rng: random.Random = field(repr=False)
    now: int
    accept_roles: frozenset[Role] = ALL_ROLES
    phase: Phase = Phase.IDLE
    variant: Variant | None = None
    peer_role: Role | None = None
    peer_pk: bytes | None = None
    ephemeral: cc.KeyPair | None = None
    nonce: bytes | None = None
    session: SessionContext | None = None
    # point decodes excluded; counts signature checks, key generations and DH
    asym_ops: int = 0
    _transcript: list[bytes] = field(default_factory=list, repr=False)

    @property
    def established(self) -> bool:
        return self.phase is Phase.ESTABLISHED

    def _fail(self, exc: CbdcError) -> CbdcError:
        self.phase = Phase.FAILED
        return exc


def initiate(cert: ParticipationCertificate, keys: cc.KeyPair, variant: Variant, *,
             ca_public: bytes, rng: random.Random, now: int,
             accept_roles: frozenset[Role] = ALL_ROLES) -> tuple[HandshakeState, bytes]:
    state = HandshakeState(True, frozenset({variant}), keys, cert, ca_public, rng, now,
                           frozenset(accept_roles), variant=variant)
    request = min(accept_roles) if len(accept_roles) == 1 else 0
    hello = frame(FrameType.HELLO, [
        (TAG_VARIANT, bytes([variant])),
        (TAG_CERT, cert.encode()),
        (TAG_CERT_REQUEST, bytes([request])),
    ])
    state._transcript.append(hello)
    state.phase = Phase.SENT_CERT_REQUEST
    return state, hello


def listen(cert: ParticipationCertificate, keys: cc.KeyPair, variants, *, ca_public: bytes,
           rng: random.Random, now: int,
           accept_roles: frozenset[Role] = ALL_ROLES) -> HandshakeState:
    """Responder-side state waiting for a HELLO."""
    if isinstance(variants, Variant):
        variants = {variants}
    return HandshakeState(False, frozenset(variants), keys, cert, ca_public, rng, now,
                          frozenset(accept_roles))


def respond(state: HandshakeState, incoming: bytes) -> tuple[HandshakeState, bytes | None, SessionContext | None]:
    """Advance ``state`` with one incoming frame.

    Returns the frame to send back (if any) and, once keys are in place,
    the established ``SessionContext``.  Any failure leaves the state in
    ``Phase.FAILED`` and raises.
    """
    if state.phase in (Phase.ESTABLISHED, Phase.FAILED):
        raise state._fail(OutOfOrderMessage(f"handshake already {state.phase.value}"))
    kind = frame_type(incoming)
    if kind is FrameType.ERROR:
        try:
            sw = error_status(incoming)
        except DecodeError:
            sw = 0x6F00
        raise state._fail(HandshakeAborted(f"peer aborted with status {sw:#06x}"))
    try:
        fields = tlv.decode_map(incoming[1:])
    except DecodeError as exc:
        raise state._fail(exc) from None
    try:
        if state.initiator:
            return _initiator_step(state, kind, fields, incoming)
        return _responder_step(state, kind, fields, incoming)
    except CbdcError as exc:
        raise state._fail(exc) from None


def _expect(state: HandshakeState, kind: FrameType | None, wanted: FrameType) -> None:
    if kind is not wanted:
        raise OutOfOrderMessage(f"expected {wanted.name} in phase {state.phase.value}, got {kind}")


def _check_peer_cert(state: HandshakeState, raw: bytes) -> ParticipationCertificate:
    try:
        cert = ParticipationCertificate.decode(raw)
        state.asym_ops += 1
        role = verify_certificate(state.ca_public, cert, state.now)
    except CbdcError as exc:
        raise CertificateRejected(str(exc)) from None
    if role not in state.accept_roles:
        raise CertificateRejected(f"peer role {role.name} not acceptable here")
    return cert


def _point(raw: bytes) -> bytes:
    cc.load_point(raw)
    return raw


def _context(variant: Variant, initiator_pk: bytes, responder_pk: bytes, nonce: bytes | None) -> bytes:
    return KDF_LABEL + bytes([variant]) + initiator_pk + responder_pk + (nonce or b"")


def _receipt(keys: cc.SessionKeys, transcript: list[bytes]) -> bytes:
    digest = hashlib.sha256(b"".join(transcript)).digest()
    return hmac.digest(keys.receipt, digest, "sha256")[:RECEIPT_SIZE]


def _initiator_step(state, kind, fields, incoming):
    if state.phase is Phase.SENT_CERT_REQUEST:
        _expect(state, kind, FrameType.CERT)
        state._transcript.append(incoming)
        if state.variant is Variant.ANONYMOUS:
            if TAG_EPK not in fields:
                raise HandshakeAborted("anonymous responder must present an ephemeral key")
            state.peer_pk = _point(fields[TAG_EPK])
            state.peer_role = None
        else:
            if TAG_CERT not in fields:
                raise CertificateRejected("responder sent no certificate")
            cert = _check_peer_cert(state, fields[TAG_CERT])
            state.peer_pk, state.peer_role = cert.subject_public_key, cert.role
        if state.variant is Variant.V1_EPHEMERAL:
            state.ephemeral = cc.generate_keypair(state.rng, ephemeral=True)
            state.asym_ops += 1
            out = frame(FrameType.KEYX, [(TAG_EPK, state.ephemeral.public)])
            state.phase = Phase.SENT_EPHEMERAL
        else:
            state.nonce = cc.generate_nonce(state.rng)
            out = frame(FrameType.KEYX, [(TAG_NONCE, state.nonce)])
            state.phase = Phase.SENT_NONCE
        state._transcript.append(out)
        return state, out, None

    if state.phase in (Phase.SENT_EPHEMERAL, Phase.SENT_NONCE):
        _expect(state, kind, FrameType.FINISH)
        if TAG_RECEIPT not in fields:
            raise BadReceipt("FINISH carries no receipt")
        z_e = b""
        if state.variant is Variant.V1_EPHEMERAL:
            if TAG_EPK not in fields:
                raise HandshakeAborted("variant mismatch: responder sent no ephemeral key")
            peer_epk = _point(fields[TAG_EPK])
            z_e = cc.dh(state.ephemeral, peer_epk)
            state.asym_ops += 1
        elif TAG_EPK in fields:
            raise HandshakeAborted("variant mismatch: unexpected ephemeral key")
        z_s = cc.dh(state.keys, state.peer_pk)
        state.asym_ops += 1
        keys = cc.kdf(cc.SharedSecret(z_s, z_e),
                      _context(state.variant, state.keys.public, state.peer_pk, state.nonce))
        unsigned = frame(FrameType.FINISH, [(t, v) for t, v in tlv.decode(incoming[1:]) if t != TAG_RECEIPT])
        expected = _receipt(keys, state._transcript + [unsigned])
        if not hmac.compare_digest(expected, fields[TAG_RECEIPT]):
            raise BadReceipt("receipt does not match derived keys")
        state.session = SessionContext(keys, state.peer_role, state.peer_pk, True, state.variant)
        state.phase = Phase.ESTABLISHED
        return state, None, state.session

    raise OutOfOrderMessage(f"initiator cannot accept {kind} in phase {state.phase.value}")


def _responder_step(state, kind, fields, incoming):
    if state.phase is Phase.IDLE:
        _expect(state, kind, FrameType.HELLO)
        if TAG_VARIANT not in fields or TAG_CERT not in fields:
            raise DecodeError("HELLO missing variant or certificate")
        try:
            variant = Variant(tlv.read_u8(fields[TAG_VARIANT]))
        except ValueError:
            raise HandshakeAborted("unknown handshake variant") from None
        if variant not in state.variants:
            raise HandshakeAborted(f"variant mismatch: peer wants {variant.name}")
        state.variant = variant
        accept = state.accept_roles
        if variant is Variant.ANONYMOUS:
            accept = accept & {Role.FI_TERMINAL}
        state.accept_roles = accept
        cert = _check_peer_cert(state, fields[TAG_CERT])
        state.peer_pk, state.peer_role = cert.subject_public_key, cert.role
        state._transcript.append(incoming)
        if variant is Variant.ANONYMOUS:
            state.ephemeral = cc.generate_keypair(state.rng, ephemeral=True)
            state.asym_ops += 1
            out = frame(FrameType.CERT, [(TAG_EPK, state.ephemeral.public)])
        else:
            out = frame(FrameType.CERT, [(TAG_CERT, state.cert.encode())])
        state._transcript.append(out)
        state.phase = Phase.CERTS_EXCHANGED
        return state, out, None

    if state.phase is Phase.CERTS_EXCHANGED:
        _expect(state, kind, FrameType.KEYX)
        state._transcript.append(incoming)
        z_e = b""
        finish_fields = []
        if state.variant is Variant.V1_EPHEMERAL:
            if TAG_EPK not in fields:
                raise HandshakeAborted("variant mismatch: expected ephemeral key")
            peer_epk = _point(fields[TAG_EPK])
            ephemeral = cc.generate_keypair(state.rng, ephemeral=True)
            state.ephemeral = ephemeral
            z_e = cc.dh(ephemeral, peer_epk)
            state.asym_ops += 2
            finish_fields.append((TAG_EPK, ephemeral.public))
        else:
            if TAG_NONCE not in fields:
                raise HandshakeAborted("variant mismatch: expected nonce")
            state.nonce = tlv.fixed(fields[TAG_NONCE], cc.NONCE_SIZE, "nonce")
        own = state.ephemeral if state.variant is Variant.ANONYMOUS else state.keys
        z_s = cc.dh(own, state.peer_pk)
        state.asym_ops += 1
        keys = cc.kdf(cc.SharedSecret(z_s, z_e),
                      _context(state.variant, state.peer_pk, own.public, state.nonce))
        unsigned = frame(FrameType.FINISH, finish_fields)
        receipt = _receipt(keys, state._transcript + [unsigned])
        out = frame(FrameType.FINISH, finish_fields + [(TAG_RECEIPT, receipt)])
        state.session = SessionContext(keys, state.peer_role, state.peer_pk, False, state.variant,
                                       anonymous_self=state.variant is Variant.ANONYMOUS)
        state.phase = Phase.ESTABLISHED
        return state, out, state.session

    raise OutOfOrderMessage(f"responder cannot accept {kind} in phase {state.phase.value}")


def run_handshake(initiator: HandshakeState, hello: bytes, responder: HandshakeState,
                  tamper=None) -> tuple[SessionContext, SessionContext]:
    """Drive a handshake in-process. ``tamper(index, frame)`` may rewrite frames."""
    frames = 0
    msg = hello
    sender_is_initiator = True
    while True:
        if tamper is not None:
            msg = tamper(frames, msg)
        frames += 1
        target = responder if sender_is_initiator else initiator
        _, msg, _ = respond(target, msg)
        sender_is_initiator = not sender_is_initiator
        if msg is None:
            break
    if not (initiator.established and responder.established):
        raise HandshakeAborted("handshake did not complete")
    return initiator.session, responder.session


__all__ = [
    "FrameType", "HandshakeState", "Phase", "SessionContext", "Variant",
    "error_frame", "error_status", "frame", "frame_type", "initiate", "listen", "receive",
    "respond", "run_handshake", "send",
]
