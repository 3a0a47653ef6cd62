"""Credential-condition proofs behind a pluggable backend interface.

A statement ties a CA-issued credential to a fresh binding value (a payment's
transaction id, or the ephemeral key of an anonymous withdrawal session):

1. the credential signature verifies under the CA key
2. the credential has not expired
3. the credential names the holder's key
4. the holder signed the binding value
5. the chosen attribute is at least the threshold (condition proofs only)

The bundled ``transparent-v1`` backend ships the witness in the clear; it
exercises the plumbing and the rejection logic but hides nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol

from . import crypto_core as cc
from . import encoding as tlv
from .errors import DecodeError

TRANSPARENT = "transparent-v1"

_CONDITION_LABEL = b"offline-cbdc/condition/v1"
_WITHDRAWAL_LABEL = b"offline-cbdc/withdrawal/v1"

# credential TLV tags
_T_SUBJECT = 0x01
_T_EXPIRY = 0x02
_T_ATTRIBUTE = 0x03
_T_SIGNATURE = 0x04
_T_ATTR_NAME = 0x10
_T_ATTR_VALUE = 0x11


class ConditionUnsatisfied(Exception):
    """Raised by a prover whose witness fails one of the statement's assertions."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"assertion {line} failed: {reason}")
        self.line = line
        self.reason = reason


class UnknownBackend(Exception):
    pass


@dataclass(frozen=True)
class VerifiableCredential:
    attributes: Mapping[str, int]
    subject_pk: bytes
    expiry: int
    ca_signature: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "attributes", dict(sorted(self.attributes.items())))

    def __hash__(self):
        return hash((tuple(self.attributes.items()), self.subject_pk, self.expiry, self.ca_signature))

    def canonical(self) -> bytes:
        fields = [(_T_SUBJECT, self.subject_pk), (_T_EXPIRY, tlv.u64(self.expiry))]
        for name, value in self.attributes.items():
            fields.append((_T_ATTRIBUTE, tlv.encode([(_T_ATTR_NAME, name.encode()),
                                                     (_T_ATTR_VALUE, tlv.i64(value))])))
        return tlv.encode(fields)

    def encode(self) -> bytes:
        return self.canonical() + tlv.tlv(_T_SIGNATURE, self.ca_signature)

    @classmethod
    def decode(cls, data: bytes) -> "VerifiableCredential":
        f = tlv.decode_map(data, required=(_T_SUBJECT, _T_EXPIRY, _T_SIGNATURE), repeated=(_T_ATTRIBUTE,))
        attributes = {}
        for raw in f[_T_ATTRIBUTE]:
            a = tlv.decode_map(raw, required=(_T_ATTR_NAME, _T_ATTR_VALUE))
            value = tlv.fixed(a[_T_ATTR_VALUE], 8, "attribute value")
            attributes[a[_T_ATTR_NAME].decode(errors="replace")] = int.from_bytes(value, "big", signed=True)
        return cls(attributes, f[_T_SUBJECT], tlv.read_u64(f[_T_EXPIRY]), f[_T_SIGNATURE])


def issue_credential(ca: cc.KeyPair, subject_pk: bytes, attributes: Mapping[str, int],
                     expiry: int) -> VerifiableCredential:
    unsigned = VerifiableCredential(attributes, subject_pk, expiry)
    return VerifiableCredential(attributes, subject_pk, expiry, cc.sign(ca, unsigned.canonical()))


@dataclass(frozen=True)
class ConditionPublicInputs:
    threshold: int | None
    attribute: str | None
    ca_pk: bytes
    binding: bytes
    now: int

    def __post_init__(self):
        if not self.binding:
            raise ValueError("binding value must be non-empty")

    @property
    def has_condition(self) -> bool:
        return self.attribute is not None


@dataclass(frozen=True)
class ConditionProof:
    backend_id: str
    payload: bytes = field(repr=False)

    def encode(self) -> bytes:
        return tlv.encode([(0x01, self.backend_id.encode()), (0x02, self.payload)])

    @classmethod
    def decode(cls, data: bytes) -> "ConditionProof":
        f = tlv.decode_map(data, required=(0x01, 0x02))
        return cls(f[0x01].decode(errors="replace"), f[0x02])


def binding_message(public: ConditionPublicInputs) -> bytes:
    label = _CONDITION_LABEL if public.has_condition else _WITHDRAWAL_LABEL
    return label + public.binding


def first_failed_assertion(vc: VerifiableCredential, holder_pk: bytes, binding_sig: bytes,
                           public: ConditionPublicInputs) -> tuple[int, str] | None:
    if not cc.verify(public.ca_pk, vc.canonical(), vc.ca_signature):
        return 1, "credential signature invalid"
    if not vc.expiry > public.now:
        return 2, "credential expired"
    if vc.subject_pk != holder_pk:
        return 3, "credential issued to another key"
    if not cc.verify(holder_pk, binding_message(public), binding_sig):
        return 4, "binding signature invalid"
    if public.has_condition:
        value = vc.attributes.get(public.attribute)
        if value is None or value < public.threshold:
            return 5, f"attribute {public.attribute!r} below threshold"
    return None


class ProofBackend(Protocol):
    backend_id: str

    def prove(self, vc: VerifiableCredential, holder: cc.KeyPair, public: ConditionPublicInputs) -> bytes: ...

    def verify(self, payload: bytes, public: ConditionPublicInputs) -> bool: ...


class TransparentBackend:
    """Reveals the credential, holder key and binding signature to the verifier."""

    backend_id = TRANSPARENT

    def prove(self, vc, holder, public):
        sig = cc.sign(holder, binding_message(public))
        failed = first_failed_assertion(vc, holder.public, sig, public)
        if failed is not None:
            raise ConditionUnsatisfied(*failed)
        return self.assemble(vc, holder.public, sig)

    @staticmethod
    def assemble(vc: VerifiableCredential, holder_pk: bytes, sig: bytes) -> bytes:
        return tlv.encode([(0x01, vc.encode()), (0x02, holder_pk), (0x03, sig)])

    def verify(self, payload, public):
        try:
            f = tlv.decode_map(payload, required=(0x01, 0x02, 0x03))
            vc = VerifiableCredential.decode(f[0x01])
        except (DecodeError, UnicodeDecodeError):
            return False
        return first_failed_assertion(vc, f[0x02], f[0x03], public) is None


_BACKENDS: dict[str, ProofBackend] = {TRANSPARENT: TransparentBackend()}


def register_backend(backend: ProofBackend) -> None:
    _BACKENDS[backend.backend_id] = backend


def _backend(backend_id: str) -> ProofBackend:
    try:
        return _BACKENDS[backend_id]
    except KeyError:
        raise UnknownBackend(backend_id) from None


def prove_condition(vc: VerifiableCredential, holder_keys: cc.KeyPair, public: ConditionPublicInputs,
                    backend: str = TRANSPARENT) -> ConditionProof:
    return ConditionProof(backend, _backend(backend).prove(vc, holder_keys, public))


def verify_condition(proof: ConditionProof, public: ConditionPublicInputs) -> bool:
    return _backend(proof.backend_id).verify(proof.payload, public)


def assemble(vc: VerifiableCredential, holder_pk: bytes, binding_sig: bytes) -> ConditionProof:
    """Build a transparent proof without checking it (for exercising verifiers)."""
    return ConditionProof(TRANSPARENT, TransparentBackend.assemble(vc, holder_pk, binding_sig))


def withdrawal_inputs(ca_pk: bytes, epk: bytes, now: int) -> ConditionPublicInputs:
    return ConditionPublicInputs(None, None, ca_pk, epk, now)


def prove_withdrawal(vc: VerifiableCredential, holder_keys: cc.KeyPair, epk: bytes, now: int, *,
                     ca_pk: bytes, backend: str = TRANSPARENT) -> ConditionProof:
    return prove_condition(vc, holder_keys, withdrawal_inputs(ca_pk, epk, now), backend)


def verify_withdrawal(proof: ConditionProof, ca_pk: bytes, epk: bytes, now: int) -> bool:
    return verify_condition(proof, withdrawal_inputs(ca_pk, epk, now))
