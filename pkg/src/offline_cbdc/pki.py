"""Certificate authority, participation certificates and the role permission table."""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from types import MappingProxyType

from . import crypto_core as cc
from . import encoding as tlv
from .errors import (
    BadSignature,
    DecodeError,
    DuplicateEnrollment,
    Expired,
    ExpiryInPast,
)


class Role(IntEnum):
    SECURE_DEVICE = 1
    USER_TERMINAL = 2
    FI_TERMINAL = 3


class Operation(IntEnum):
    """The eight secure-device operations; values double as command opcodes."""

    WITHDRAW = 0x01
    REQUEST = 0x02
    ACCEPT = 0x03
    TRANSFER = 0x04
    RECEIVE = 0x05
    RETRANSMIT = 0x06
    SYNCHRONIZE = 0x07
    DEPOSIT = 0x08


PERMISSIONS = MappingProxyType({
    Role.FI_TERMINAL: frozenset({Operation.WITHDRAW, Operation.SYNCHRONIZE, Operation.DEPOSIT}),
    Role.USER_TERMINAL: frozenset({Operation.REQUEST, Operation.ACCEPT}),
    Role.SECURE_DEVICE: frozenset({Operation.TRANSFER, Operation.RECEIVE, Operation.RETRANSMIT}),
})

ALL_ROLES = frozenset(Role)


def permitted(role: Role | None, op: Operation) -> bool:
    if role is None:
        return False
    return op in PERMISSIONS[role]


def permission_matrix() -> dict[tuple[Role, Operation], bool]:
    return {(role, op): permitted(role, op) for role in Role for op in Operation}


# certificate TLV tags
TAG_PUBLIC_KEY = 0x01
TAG_ROLE = 0x02
TAG_SERIAL = 0x03
TAG_EXPIRY = 0x04
TAG_SIGNATURE = 0x05
_CERT_TAGS = (TAG_PUBLIC_KEY, TAG_ROLE, TAG_SERIAL, TAG_EXPIRY, TAG_SIGNATURE)


@dataclass(frozen=True)
class ParticipationCertificate:
    subject_public_key: bytes
    role: Role
    serial: int
    expiry: int
    ca_signature: bytes = b""

    def signed_payload(self) -> bytes:
        return tlv.encode([
            (TAG_PUBLIC_KEY, self.subject_public_key),
            (TAG_ROLE, bytes([self.role])),
            (TAG_SERIAL, tlv.u64(self.serial)),
            (TAG_EXPIRY, tlv.u64(self.expiry)),
        ])

    def encode(self) -> bytes:
        return self.signed_payload() + tlv.tlv(TAG_SIGNATURE, self.ca_signature)

    @classmethod
    def decode(cls, data: bytes) -> "ParticipationCertificate":
        fields = tlv.decode(data)
        if tuple(tag for tag, _ in fields) != _CERT_TAGS:
            raise DecodeError("certificate fields missing or out of order")
        values = [value for _, value in fields]
        pk = tlv.fixed(values[0], cc.POINT_SIZE, "certificate public key")
        role_byte = tlv.read_u8(values[1])
        try:
            role = Role(role_byte)
        except ValueError:
            raise DecodeError(f"unknown role {role_byte}") from None
        return cls(
            subject_public_key=pk,
            role=role,
            serial=tlv.read_u64(values[2]),
            expiry=tlv.read_u64(values[3]),
            ca_signature=tlv.fixed(values[4], cc.SIGNATURE_SIZE, "certificate signature"),
        )


def issue_certificate(ca: cc.KeyPair, subject_pk: bytes, role: Role, expiry: int, serial: int,
                      now: int) -> ParticipationCertificate:
    if expiry <= now:
        raise ExpiryInPast(f"expiry {expiry} is not after issuance time {now}")
    cc.load_point(subject_pk)
    unsigned = ParticipationCertificate(subject_pk, Role(role), serial, expiry)
    return ParticipationCertificate(subject_pk, Role(role), serial, expiry,
                                    cc.sign(ca, unsigned.signed_payload()))


# Certificates are re-verified on every handshake; the signature check is a
# pure function of these bytes so its outcome is memoised. Expiry is not.
@lru_cache(maxsize=8192)
def _signature_valid(ca_pk: bytes, payload: bytes, signature: bytes) -> bool:
    return cc.verify(ca_pk, payload, signature)


def verify_certificate(ca_pk: bytes, cert: ParticipationCertificate, now: int) -> Role:
    if not _signature_valid(ca_pk, cert.signed_payload(), cert.ca_signature):
        raise BadSignature(f"certificate {cert.serial} not signed by this CA")
    if now >= cert.expiry:
        raise Expired(f"certificate {cert.serial} expired at {cert.expiry}")
    return cert.role


class CertificateAuthority:
    """The single system CA. Hands out serials and signs participation certificates."""

    def __init__(self, keys: cc.KeyPair, first_serial: int = 1):
        self.keys = keys
        self._next_serial = first_serial

    @classmethod
    def generate(cls, rng: random.Random) -> "CertificateAuthority":
        return cls(cc.generate_keypair(rng))

    @property
    def public_key(self) -> bytes:
        return self.keys.public

    def issue(self, subject_pk: bytes, role: Role, expiry: int, now: int) -> ParticipationCertificate:
        cert = issue_certificate(self.keys, subject_pk, role, expiry, self._next_serial, now)
        self._next_serial += 1
        return cert


@dataclass(frozen=True)
class RegistryEntry:
    government_id: str
    public_key: bytes


class Registry:
    """KYC registry mapping device keys to identities.

    Entries are stored sealed under a registry key held apart from the
    registry itself; :meth:`disclose` needs that key.
    """

    def __init__(self, key: bytes):
        if len(key) != cc.KEY_SIZE * 2:
            raise ValueError("registry key must be 64 bytes (enc | mac)")
        self._keys = cc.SessionKeys(key[:cc.KEY_SIZE], key[cc.KEY_SIZE:], b"")
        self._sealed: dict[bytes, tuple[int, bytes]] = {}

    def __len__(self) -> int:
        return len(self._sealed)

    def __contains__(self, public_key: bytes) -> bool:
        return public_key in self._sealed

    def enroll(self, government_id: str, public_key: bytes) -> None:
        if public_key in self._sealed:
            raise DuplicateEnrollment("public key already enrolled")
        index = len(self._sealed) + 1
        record = tlv.encode([(0x01, government_id.encode()), (0x02, public_key)])
        self._sealed[public_key] = (index, cc.seal(self._keys, index, record))

    def disclose(self, public_key: bytes, key: bytes) -> RegistryEntry:
        index, sealed = self._sealed[public_key]
        keys = cc.SessionKeys(key[:cc.KEY_SIZE], key[cc.KEY_SIZE:], b"")
        fields = tlv.decode_map(cc.unseal(keys, index, sealed), required=(0x01, 0x02))
        return RegistryEntry(fields[0x01].decode(), fields[0x02])
