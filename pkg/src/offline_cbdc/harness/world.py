"""Assemble a CA, an FI, users with devices and wallets, and the network."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .. import crypto_core as cc
from ..pki import CertificateAuthority, ParticipationCertificate, Registry, Role
from ..secure_channel import Variant
from ..secure_device import ComplianceMode, Limits, SecureDevice
from ..terminals import FinancialInstitution, Journal, PaymentOutcome, PointOfSale, Wallet
from ..zk_attest import VerifiableCredential, issue_credential
from .audit import ConservationAudit, SessionTap, audit
from .network import DEFAULT_TIMEOUT, FaultAction, SimNetwork

EPOCH = 1_700_000_000
CERT_LIFETIME = 10 * 365 * 86_400
DEFAULT_LIMITS = Limits(max_balance=10_000, per_tx_max=5_000, cumulative_max=20_000)


class KeyRing:
    """Deterministic key material and certificates, shareable between worlds.

    Certificate signature checks are memoised by content, so reusing one ring
    across many short simulations keeps handshakes cheap.
    """

    def __init__(self, seed: int):
        self.rng = random.Random(f"keyring/{seed}")
        self.ca = CertificateAuthority.generate(self.rng)
        self._issued: dict[tuple[str, Role], tuple[cc.KeyPair, ParticipationCertificate]] = {}
        self._credentials: dict[tuple, tuple[cc.KeyPair, VerifiableCredential]] = {}

    def identity(self, name: str, role: Role) -> tuple[cc.KeyPair, ParticipationCertificate]:
        key = (name, role)
        if key not in self._issued:
            keys = cc.generate_keypair(self.rng)
            cert = self.ca.issue(keys.public, role, EPOCH + CERT_LIFETIME, now=EPOCH)
            self._issued[key] = (keys, cert)
        return self._issued[key]

    def credential(self, name: str, attributes: dict[str, int] | None = None) -> tuple[cc.KeyPair, VerifiableCredential]:
        attributes = attributes or {"age": 30}
        key = (name, tuple(sorted(attributes.items())))
        if key not in self._credentials:
            keys = cc.generate_keypair(self.rng)
            vc = issue_credential(self.ca.keys, keys.public, attributes, EPOCH + CERT_LIFETIME)
            self._credentials[key] = (keys, vc)
        return self._credentials[key]


@dataclass
class User:
    name: str
    device: SecureDevice
    wallet: Wallet
    pin: str
    outstanding: list[PaymentOutcome] = field(default_factory=list)


class World:
    def __init__(self, seed: int = 0, *, variant: Variant = Variant.V1_EPHEMERAL,
                 mode: ComplianceMode = ComplianceMode.BALANCE_TRACKING, limits: Limits = DEFAULT_LIMITS,
                 keyring: KeyRing | None = None, faults: list[FaultAction] = (),
                 timeout: int = DEFAULT_TIMEOUT, journal: Journal | None = None):
        self.seed = seed
        self.rng = random.Random(f"world/{seed}")
        self.variant = variant
        self.mode = mode
        self.limits = limits
        self.keyring = keyring or KeyRing(seed)
        self.net = SimNetwork(faults, timeout)
        self.tap = SessionTap()
        self.net.observers.append(self.tap.observe_capture)
        self.users: dict[str, User] = {}
        self.pos: dict[str, PointOfSale] = {}
        self.devices: dict[str, SecureDevice] = {}
        self.initial_offline: dict[str, int] = {}
        self.untrusted: set[str] = set()
        self.registry = Registry(cc.random_bytes(self.rng, 64))
        keys, cert = self.keyring.identity("fi", Role.FI_TERMINAL)
        self.fi = FinancialInstitution("fi", keys=keys, cert=cert, ca_public=self.ca_public, net=self.net,
                                       rng=self._rng("fi"), clock=self.now, variant=variant, journal=journal)
        self.net.register(self.fi)

    @property
    def ca_public(self) -> bytes:
        return self.keyring.ca.public_key

    def now(self) -> int:
        return EPOCH + self.net.clock

    def _rng(self, label: str) -> random.Random:
        return random.Random(f"{self.seed}/{label}")

    def make_device(self, name: str, *, balance: int = 0, limits: Limits | None = None,
                    mode: ComplianceMode | None = None, pin: str = "1234", cls=SecureDevice, **kw) -> SecureDevice:
        keys, cert = self.keyring.identity(name, Role.SECURE_DEVICE)
        dev = cls(name, keys, cert, self.ca_public, limits=limits or self.limits, rng=self._rng(name),
                  clock=self.now, mode=self.mode if mode is None else mode, pin=pin, variant=self.variant,
                  balance=balance, session_observer=self.tap.observe_session, **kw)
        self.devices[name] = dev
        self.initial_offline[name] = balance
        self.net.register(dev)
        return dev

    def add_user(self, name: str, *, online: int = 0, offline: int = 0, limits: Limits | None = None,
                 mode: ComplianceMode | None = None, pin: str = "1234", credential: dict[str, int] | None = None,
                 device_cls=SecureDevice) -> User:
        dev = self.make_device(f"{name}.se", balance=offline, limits=limits, mode=mode, pin=pin, cls=device_cls)
        keys, cert = self.keyring.identity(f"{name}.wallet", Role.USER_TERMINAL)
        vc_keys, vc = self.keyring.credential(name, credential) if credential is not None else (None, None)
        wallet = Wallet(f"{name}.wallet", keys=keys, cert=cert, ca_public=self.ca_public, device=dev, net=self.net,
                        rng=self._rng(f"{name}.wallet"), clock=self.now, pin=pin, variant=self.variant,
                        credential=vc, credential_keys=vc_keys)
        self.net.register(wallet)
        self.registry.enroll(f"id-{name}", dev.public_key)
        self.fi.open_account(name)
        if online:
            self.fi.mint(name, online)
        if offline:
            self.fi.minted += offline
        self.fi.enroll(dev.public_key, name, dev.state.mode, offline)
        user = User(name, dev, wallet, pin)
        self.users[name] = user
        return user

    def add_pos(self, name: str, *, offline: int = 0, limits: Limits | None = None, pin: str = "1234") -> PointOfSale:
        dev = self.make_device(f"{name}.se", balance=offline, limits=limits, pin=pin)
        keys, cert = self.keyring.identity(f"{name}.pos", Role.USER_TERMINAL)
        pos = PointOfSale(f"{name}.pos", keys=keys, cert=cert, ca_public=self.ca_public, device=dev, net=self.net,
                          rng=self._rng(f"{name}.pos"), clock=self.now, pin=pin, variant=self.variant)
        self.net.register(pos.till)
        self.fi.open_account(name)
        if offline:
            self.fi.minted += offline
        self.fi.enroll(dev.public_key, name, dev.state.mode, offline)
        self.pos[name] = pos
        return pos

    def register_reader(self, pos: PointOfSale, card: SecureDevice, pin: str) -> Wallet:
        reader = pos.reader(card, pin)
        self.net.register(reader)
        return reader

    def user(self, name: str) -> User:
        return self.users[name]

    @property
    def total_online(self) -> int:
        return sum(a.balance for a in self.fi.accounts.values())

    def audit(self) -> ConservationAudit:
        trusted = set(self.devices) - self.untrusted
        return audit(online=self.total_online, devices=list(self.devices.values()), tap=self.tap,
                     minted=self.fi.minted, in_doubt=list(self.fi.in_doubt.values()),
                     initial_offline=self.initial_offline, trusted=trusted)
