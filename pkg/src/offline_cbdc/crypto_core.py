"""Curve, hash and symmetric primitives used by every protocol layer.

Everything runs on secp256r1 with SHA-256.  Session traffic is AES-256-CTR
followed by a truncated HMAC-SHA256 tag (encrypt-then-MAC); the tag covers
``direction | counter | ciphertext`` and the counter itself never goes on
the wire.  All randomness is drawn from a caller-supplied ``random.Random``
so that simulations replay bit-for-bit.
"""

from __future__ import annotations

import hmac
import random
import struct
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.x963kdf import X963KDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import AuthFailure, CounterMismatch, EmptySecret, InvalidPoint

CURVE = ec.SECP256R1()
CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
POINT_SIZE = 65
SCALAR_SIZE = 32
SIGNATURE_SIZE = 64
KEY_SIZE = 32
NONCE_SIZE = 16
TAG_SIZE = 16
# how far either side of the expected counter unseal() looks when telling a
# replayed/reordered frame apart from a forged one
COUNTER_WINDOW = 32

DIRECTION_INITIATOR = 0x01
DIRECTION_RESPONDER = 0x02

_ECDSA = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)


def random_bytes(rng: random.Random, n: int) -> bytes:
    return rng.getrandbits(8 * n).to_bytes(n, "big")


def generate_nonce(rng: random.Random) -> bytes:
    return random_bytes(rng, NONCE_SIZE)


@dataclass(frozen=True)
class KeyPair:
    secret: bytes = field(repr=False)
    public: bytes
    ephemeral: bool = False

    @classmethod
    def from_secret(cls, secret: bytes, ephemeral: bool = False) -> "KeyPair":
        scalar = int.from_bytes(secret, "big")
        if len(secret) != SCALAR_SIZE or not 0 < scalar < CURVE_ORDER:
            raise ValueError("secret scalar out of range")
        key = ec.derive_private_key(scalar, CURVE)
        public = key.public_key().public_bytes(Encoding.X962, PublicFormat.UncompressedPoint)
        pair = cls(secret, public, ephemeral)
        pair.__dict__["private_key"] = key
        return pair

    @cached_property
    def private_key(self) -> ec.EllipticCurvePrivateKey:
        return ec.derive_private_key(int.from_bytes(self.secret, "big"), CURVE)


def generate_keypair(rng: random.Random, ephemeral: bool = False) -> KeyPair:
    scalar = rng.randrange(1, CURVE_ORDER)
    return KeyPair.from_secret(scalar.to_bytes(SCALAR_SIZE, "big"), ephemeral=ephemeral)


@lru_cache(maxsize=4096)
def load_point(public: bytes) -> ec.EllipticCurvePublicKey:
    """Parse an uncompressed point, rejecting the identity and off-curve input."""
    if len(public) != POINT_SIZE or public[0] != 0x04:
        raise InvalidPoint("expected 65-byte uncompressed point")
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(CURVE, public)
    except ValueError as exc:
        raise InvalidPoint(str(exc)) from None


def _private(secret: bytes | KeyPair) -> ec.EllipticCurvePrivateKey:
    if isinstance(secret, KeyPair):
        return secret.private_key
    return KeyPair.from_secret(secret).private_key


def dh(secret: bytes | KeyPair, public: bytes) -> bytes:
    """ECDH x-coordinate of ``secret * public``."""
    return _private(secret).exchange(ec.ECDH(), load_point(public))


@dataclass(frozen=True)
class SharedSecret:
    z_static: bytes
    z_ephemeral: bytes = b""

    @property
    def combined(self) -> bytes:
        return self.z_static + self.z_ephemeral


@dataclass(frozen=True)
class SessionKeys:
    enc: bytes = field(repr=False)
    mac: bytes = field(repr=False)
    receipt: bytes = field(repr=False)


def kdf(shared: SharedSecret, context: bytes) -> SessionKeys:
    """X9.63 counter-mode expansion over SHA-256, split into three 256-bit keys."""
    z = shared.combined
    if not z:
        raise EmptySecret("shared secret is empty")
    okm = X963KDF(algorithm=hashes.SHA256(), length=3 * KEY_SIZE, sharedinfo=context).derive(z)
    return SessionKeys(okm[:KEY_SIZE], okm[KEY_SIZE:2 * KEY_SIZE], okm[2 * KEY_SIZE:])


def sign(secret: bytes | KeyPair, message: bytes) -> bytes:
    """Deterministic ECDSA-SHA256 signature in raw ``r | s`` form."""
    der = _private(secret).sign(message, _ECDSA)
    r, s = decode_dss_signature(der)
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    if len(signature) != SIGNATURE_SIZE:
        return False
    r = int.from_bytes(signature[:32], "big")
    s = int.from_bytes(signature[32:], "big")
    if not (0 < r < CURVE_ORDER and 0 < s < CURVE_ORDER):
        return False
    try:
        load_point(public).verify(encode_dss_signature(r, s), message, _ECDSA)
    except (InvalidPoint, InvalidSignature):
        return False
    return True


_MASK128 = (1 << 128) - 1


def _mac_input(direction: int, counter: int, ciphertext: bytes) -> bytes:
    return bytes([direction]) + struct.pack("<Q", counter) + ciphertext


def _tag(keys: SessionKeys, direction: int, counter: int, ciphertext: bytes) -> bytes:
    return hmac.digest(keys.mac, _mac_input(direction, counter, ciphertext), "sha256")[:TAG_SIZE]


@lru_cache(maxsize=1024)
def _block_cipher(key: bytes):
    return Cipher(algorithms.AES(key), modes.ECB()).encryptor()


def _ctr(keys: SessionKeys, direction: int, counter: int, data: bytes) -> bytes:
    # AES-CTR with a 128-bit big-endian counter block starting at
    # direction | counter-LE | zeros; the keystream comes from a cached ECB
    # encryptor because building a fresh CTR context dominates small frames.
    if not data:
        return b""
    start = int.from_bytes(bytes([direction]) + struct.pack("<Q", counter) + bytes(7), "big")
    blocks = (len(data) + 15) // 16
    stream = _block_cipher(keys.enc).update(
        b"".join(((start + i) & _MASK128).to_bytes(16, "big") for i in range(blocks)))
    n = len(data)
    return (int.from_bytes(data, "big") ^ int.from_bytes(stream[:n], "big")).to_bytes(n, "big")


def seal(keys: SessionKeys, counter: int, plaintext: bytes, direction: int = DIRECTION_INITIATOR) -> bytes:
    if not 0 <= counter < 2**64:
        raise ValueError("counter out of range")
    ciphertext = _ctr(keys, direction, counter, plaintext)
    return ciphertext + _tag(keys, direction, counter, ciphertext)


def open_at(keys: SessionKeys, counter: int, sealed: bytes, direction: int = DIRECTION_INITIATOR) -> bytes | None:
    """Open ``sealed`` at exactly ``counter``; ``None`` if it does not authenticate."""
    if len(sealed) < TAG_SIZE:
        return None
    ciphertext, tag = sealed[:-TAG_SIZE], sealed[-TAG_SIZE:]
    if not hmac.compare_digest(tag, _tag(keys, direction, counter, ciphertext)):
        return None
    return _ctr(keys, direction, counter, ciphertext)


def unseal(keys: SessionKeys, counter: int, sealed: bytes, direction: int = DIRECTION_INITIATOR) -> bytes:
    """Inverse of :func:`seal`.

    Raises ``CounterMismatch`` when the frame authenticates under a nearby
    counter value (replay or reordering) and ``AuthFailure`` otherwise.
    """
    if len(sealed) < TAG_SIZE:
        raise AuthFailure("sealed frame shorter than its tag")
    ciphertext, tag = sealed[:-TAG_SIZE], sealed[-TAG_SIZE:]
    if hmac.compare_digest(tag, _tag(keys, direction, counter, ciphertext)):
        return _ctr(keys, direction, counter, ciphertext)
    lo = max(0, counter - COUNTER_WINDOW)
    for other in range(lo, counter + COUNTER_WINDOW + 1):
        if other != counter and hmac.compare_digest(tag, _tag(keys, direction, other, ciphertext)):
            raise CounterMismatch(f"frame sealed at counter {other}, expected {counter}")
    raise AuthFailure("MAC mismatch")
