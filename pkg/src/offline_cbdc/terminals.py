"""User wallets, point-of-sale terminals and the financial institution.

Terminals never hold value.  A wallet forwards commands to its own secure
device and relays device-to-device frames; the FI terminal moves money
between online accounts and devices and keeps the offline ledger.

All traffic goes through a ``Transport``.  ``transmit`` returns the frame as
delivered (possibly altered) or raises ``TransportFailure`` when it is lost.
"""

from __future__ import annotations

import json
import os
import random
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Iterator, Protocol

from . import crypto_core as cc
from . import encoding as tlv
from .errors import (
    CbdcError,
    ConditionProofRejected,
    DecodeError,
    DeviceBlocked,
    InsufficientOnlineBalance,
    NotCompleted,
    NotEnrolled,
    RejectedByUser,
    SW_OK,
    SyncRequired,
    TransportFailure,
    UnknownAccount,
    status_name,
)
from .pki import Operation, ParticipationCertificate, Role
from .secure_channel import (
    FrameType,
    SessionContext,
    Variant,
    error_frame,
    error_status,
    frame_type,
    initiate,
    listen,
    receive,
    respond,
    send,
)
from .secure_device import (
    T_AMOUNT,
    T_BALANCE,
    T_CHANNEL,
    T_EPOCH,
    T_FRAME,
    T_LIMITS,
    T_OP_ID,
    T_PEER_STATUS,
    T_PHASE,
    T_PIN,
    T_PURPOSE,
    T_SIDE,
    T_TX_ID,
    Command,
    ComplianceMode,
    DeviceStatus,
    Direction,
    Limits,
    LogEntry,
    PaymentRequest,
    Purpose,
    SecureDevice,
    Side,
    SyncPayload,
    SyncPhase,
    decode_response,
    encode_command,
    raise_for_status,
)
from .zk_attest import (
    ConditionProof,
    ConditionPublicInputs,
    ConditionUnsatisfied,
    UnknownBackend,
    VerifiableCredential,
    prove_condition,
    prove_withdrawal,
    verify_condition,
    verify_withdrawal,
)


class Transport(Protocol):
    def transmit(self, src: str, dst: str, frame: bytes) -> bytes: ...


class DirectTransport:
    """Lossless in-process delivery."""

    def transmit(self, src: str, dst: str, frame: bytes) -> bytes:
        return frame


class Actor(Protocol):
    name: str

    def process(self, channel: str, frame: bytes) -> bytes | None: ...


def exchange(net: Transport, src: str, peer: Actor, frame: bytes) -> bytes | None:
    """Send ``frame`` to ``peer`` and carry its answer (if any) back to ``src``."""
    delivered = net.transmit(src, peer.name, frame)
    reply = peer.process(src, delivered)
    if reply is None:
        return None
    return net.transmit(peer.name, src, reply)


def handshake(net: Transport, src: str, peer: Actor, cert: ParticipationCertificate, keys: cc.KeyPair,
              variant: Variant, *, ca_public: bytes, rng: random.Random, now: int,
              accept_roles: frozenset[Role]) -> SessionContext:
    state, msg = initiate(cert, keys, variant, ca_public=ca_public, rng=rng, now=now,
                          accept_roles=accept_roles)
    try:
        while True:
            reply = exchange(net, src, peer, msg)
            if reply is None:
                raise TransportFailure("peer went silent during handshake")
            _, msg, ctx = respond(state, reply)
            if ctx is not None:
                return ctx
    except TransportFailure:
        raise
    except CbdcError as exc:
        raise TransportFailure(f"handshake failed: {exc}") from exc


class DeviceLink:
    """A terminal's established session with one secure device."""

    def __init__(self, net: Transport, owner: str, device: SecureDevice, ctx: SessionContext):
        self.net = net
        self.owner = owner
        self.device = device
        self.ctx: SessionContext | None = ctx

    @property
    def alive(self) -> bool:
        return self.ctx is not None

    def command(self, opcode: int, fields: list[tuple[int, bytes]] = ()) -> dict:
        """Run one command.  Authenticated device rejections raise their own error;
        anything that leaves the outcome unknown raises ``TransportFailure``."""
        if self.ctx is None:
            raise TransportFailure("session closed")
        ctx = self.ctx
        try:
            reply = exchange(self.net, self.owner, self.device, send(ctx, encode_command(opcode, list(fields))))
            if reply is None:
                raise TransportFailure("device did not answer")
            if frame_type(reply) is FrameType.ERROR:
                raise TransportFailure(f"channel error {status_name(error_status(reply))}")
            sw, out = decode_response(receive(ctx, reply))
        except TransportFailure:
            self.ctx = None
            raise
        except CbdcError as exc:
            self.ctx = None
            raise TransportFailure(f"unreadable response: {exc}") from exc
        raise_for_status(sw, out)
        return out


class Stage(Enum):
    INITIATION = "initiation"
    VALUE_EXCHANGE = "value-exchange"


class PaymentStatus(Enum):
    SETTLED = "settled"
    REJECTED = "rejected"
    INTERRUPTED = "interrupted"


@dataclass
class PaymentOutcome:
    status: PaymentStatus
    amount: int
    tx_id: bytes | None = None
    stage: Stage = Stage.INITIATION
    reason: str = ""
    path: str = "direct"
    receiver_balance: int | None = None
    sender_balance: int | None = None

    @property
    def settled(self) -> bool:
        return self.status is PaymentStatus.SETTLED


@dataclass(frozen=True)
class Condition:
    attribute: str
    threshold: int


# wallet-to-wallet messages (sealed)
W_REQUEST = 0x01
W_ACCEPT = 0x02
W_REJECT = 0x03

T_COND_ATTR = 0x50
T_COND_THRESHOLD = 0x51
T_PROOF = 0x52

Approval = Callable[[int, bytes, "Condition | None"], bool]


class Wallet:
    """User terminal: talks to its own device and to other wallets."""

    def __init__(self, name: str, *, keys: cc.KeyPair, cert: ParticipationCertificate, ca_public: bytes,
                 device: SecureDevice, net: Transport, rng: random.Random, clock: Callable[[], int],
                 pin: str = "1234", variant: Variant = Variant.V1_EPHEMERAL,
                 credential: VerifiableCredential | None = None, credential_keys: cc.KeyPair | None = None,
                 approval: Approval | None = None):
        self.name = name
        self.keys = keys
        self.cert = cert
        self.ca_public = ca_public
        self.device = device
        self.net = net
        self.rng = rng
        self.clock = clock
        self.pin = pin
        self.variant = variant
        self.credential = credential
        self.credential_keys = credential_keys
        self.approval = approval
        self.device_link: DeviceLink | None = None
        self._peer_out: dict[str, SessionContext] = {}
        self._peer_in: dict[str, object] = {}

    # -- own device -----------------------------------------------------------

    def ensure_device(self) -> DeviceLink:
        if self.device_link is None or not self.device_link.alive:
            ctx = handshake(self.net, self.name, self.device, self.cert, self.keys, self.variant,
                            ca_public=self.ca_public, rng=self.rng, now=self.clock(),
                            accept_roles=frozenset({Role.SECURE_DEVICE}))
            link = DeviceLink(self.net, self.name, self.device, ctx)
            link.command(Command.VERIFY_PIN, [(T_PIN, self.pin.encode())])
            self.device_link = link
        return self.device_link

    def device_command(self, opcode: int, fields: list[tuple[int, bytes]] = ()) -> dict:
        return self.ensure_device().command(opcode, fields)

    def status(self) -> DeviceStatus:
        return DeviceStatus.from_fields(self.device_command(Command.GET_STATUS))

    def request(self, amount: int) -> PaymentRequest:
        f = self.device_command(Operation.REQUEST, [(T_AMOUNT, tlv.u64(amount))])
        return PaymentRequest(tlv.read_u64(f[T_AMOUNT]), f[T_TX_ID])

    def accept(self, amount: int, tx_id: bytes, side: Side) -> None:
        self.device_command(Operation.ACCEPT, [(T_AMOUNT, tlv.u64(amount)), (T_TX_ID, tx_id),
                                               (T_SIDE, bytes([side]))])

    def open_peer(self, peer_device: str, purpose: Purpose, amount: int, tx_id: bytes) -> bytes:
        f = self.device_command(Command.OPEN_PEER, [
            (T_PURPOSE, bytes([purpose])), (T_CHANNEL, peer_device.encode()),
            (T_AMOUNT, tlv.u64(amount)), (T_TX_ID, tx_id)])
        return f[T_FRAME]

    # -- wallet-to-wallet -------------------------------------------------------

    def peer_call(self, other: "Wallet", kind: int, fields: list[tuple[int, bytes]]) -> tuple[int, dict]:
        ctx = self._peer_out.get(other.name)
        if ctx is None:
            ctx = handshake(self.net, self.name, other, self.cert, self.keys, self.variant,
                            ca_public=self.ca_public, rng=self.rng, now=self.clock(),
                            accept_roles=frozenset({Role.USER_TERMINAL}))
            self._peer_out[other.name] = ctx
        try:
            reply = exchange(self.net, self.name, other, send(ctx, bytes([kind]) + tlv.encode(fields)))
            if reply is None or frame_type(reply) is not FrameType.SEALED:
                raise TransportFailure("wallet link broken")
            payload = receive(ctx, reply)
            return payload[0], tlv.decode_map(payload[1:])
        except CbdcError as exc:
            self._peer_out.pop(other.name, None)
            if isinstance(exc, TransportFailure):
                raise
            raise TransportFailure(f"wallet link broken: {exc}") from exc

    def process(self, channel: str, data: bytes) -> bytes | None:
        kind = frame_type(data)
        try:
            if kind is FrameType.HELLO:
                self._peer_in[channel] = listen(self.cert, self.keys, {self.variant}, ca_public=self.ca_public,
                                                rng=self.rng, now=self.clock(),
                                                accept_roles=frozenset({Role.USER_TERMINAL}))
            entry = self._peer_in.get(channel)
            if kind in (FrameType.HELLO, FrameType.KEYX):
                if entry is None or isinstance(entry, SessionContext):
                    return error_frame(DecodeError.status_word)
                _, out, ctx = respond(entry, data)
                if ctx is not None:
                    self._peer_in[channel] = ctx
                return out
            if kind is FrameType.SEALED and isinstance(entry, SessionContext):
                payload = receive(entry, data)
                return send(entry, self.handle_message(payload[0], tlv.decode_map(payload[1:])))
        except CbdcError as exc:
            self._peer_in.pop(channel, None)
            return error_frame(exc.status_word)
        return error_frame(DecodeError.status_word)

    def handle_message(self, kind: int, f: dict) -> bytes:
        if kind != W_REQUEST:
            return bytes([W_REJECT]) + tlv.encode([(T_PEER_STATUS, DecodeError.status_word.to_bytes(2, "big"))])
        amount, tx_id = tlv.read_u64(f[T_AMOUNT]), f[T_TX_ID]
        condition = None
        if T_COND_ATTR in f:
            condition = Condition(f[T_COND_ATTR].decode(), int.from_bytes(f[T_COND_THRESHOLD], "big", signed=True))
        status, fields = self.answer_request(amount, tx_id, condition)
        kind = W_ACCEPT if status == SW_OK else W_REJECT
        return bytes([kind]) + tlv.encode(fields + [(T_PEER_STATUS, status.to_bytes(2, "big"))])

    def answer_request(self, amount: int, tx_id: bytes, condition: Condition | None) -> tuple[int, list]:
        """Sender side of payment initiation: user approval, proof, device checks."""
        if self.approval is not None and not self.approval(amount, tx_id, condition):
            return RejectedByUser.status_word, []
        fields = [(T_AMOUNT, tlv.u64(amount)), (T_TX_ID, tx_id)]
        if condition is not None:
            proof = self.condition_proof(condition, tx_id)
            if proof is None:
                return ConditionProofRejected.status_word, []
            fields.append((T_PROOF, proof.encode()))
        try:
            self.accept(amount, tx_id, Side.SENDER)
        except CbdcError as exc:
            return exc.status_word, []
        return SW_OK, fields

    def condition_proof(self, condition: Condition, tx_id: bytes) -> ConditionProof | None:
        if self.credential is None or self.credential_keys is None:
            return None
        public = ConditionPublicInputs(condition.threshold, condition.attribute, self.ca_public, tx_id, self.clock())
        try:
            return prove_condition(self.credential, self.credential_keys, public)
        except ConditionUnsatisfied:
            return None

    def withdrawal_proof(self, epk: bytes, now: int) -> ConditionProof:
        if self.credential is None or self.credential_keys is None:
            raise ConditionProofRejected("wallet holds no credential")
        try:
            return prove_withdrawal(self.credential, self.credential_keys, epk, now, ca_pk=self.ca_public)
        except ConditionUnsatisfied as exc:
            raise ConditionProofRejected(str(exc)) from None

    def drop_sessions(self) -> None:
        self.device_link = None
        self._peer_out.clear()
        self._peer_in.clear()


def relay(net: Transport, initiator: SecureDevice, responder: SecureDevice, first: bytes) -> None:
    """Carry device-to-device frames until one side has nothing more to say."""
    msg, src, dst = first, initiator, responder
    while msg is not None:
        delivered = net.transmit(src.name, dst.name, msg)
        msg = dst.process(src.name, delivered)
        src, dst = dst, src


def _balances(outcome: PaymentOutcome, receiver: Wallet, sender: Wallet) -> PaymentOutcome:
    try:
        outcome.receiver_balance = receiver.status().balance
        outcome.sender_balance = sender.status().balance
    except CbdcError:
        pass
    return outcome


def _settled_on(status: DeviceStatus, tx_id: bytes) -> bool:
    e = status.last_entry
    return e is not None and e.tx_id == tx_id and not e.pending and e.direction is Direction.INCOMING


def initiate_payment(net: Transport, receiver: Wallet, sender: Wallet, amount: int,
                     approval: Approval | None = None, condition: Condition | None = None,
                     colocated: bool = False) -> PaymentOutcome:
    """Run request, approval, accept and value exchange between two wallets' devices."""
    outcome = PaymentOutcome(PaymentStatus.INTERRUPTED, amount)
    saved = sender.approval
    if approval is not None:
        sender.approval = approval
    try:
        req = receiver.request(amount)
        outcome.tx_id = req.tx_id
        fields = [(T_AMOUNT, tlv.u64(amount)), (T_TX_ID, req.tx_id)]
        if condition is not None:
            fields += [(T_COND_ATTR, condition.attribute.encode()),
                       (T_COND_THRESHOLD, condition.threshold.to_bytes(8, "big", signed=True))]
        if colocated:
            sw, out = sender.answer_request(amount, req.tx_id, condition)
            answer = dict(out)
        else:
            kind, answer = receiver.peer_call(sender, W_REQUEST, fields)
            sw = int.from_bytes(answer.get(T_PEER_STATUS, b"\x6f\x00"), "big")
        if sw == TransportFailure.status_word:
            raise TransportFailure("sender wallet lost its device")
        if sw != SW_OK:
            outcome.status, outcome.reason = PaymentStatus.REJECTED, status_name(sw)
            return _balances(outcome, receiver, sender)
        if condition is not None:
            ok = False
            if T_PROOF in answer:
                try:
                    proof = ConditionProof.decode(answer[T_PROOF])
                    public = ConditionPublicInputs(condition.threshold, condition.attribute,
                                                   receiver.ca_public, req.tx_id, receiver.clock())
                    ok = verify_condition(proof, public)
                except (CbdcError, UnknownBackend):
                    ok = False
            if not ok:
                outcome.status, outcome.reason = PaymentStatus.REJECTED, ConditionProofRejected.__name__
                return _balances(outcome, receiver, sender)
        receiver.accept(amount, req.tx_id, Side.RECEIVER)
        hello = receiver.open_peer(sender.device.name, Purpose.PAY, amount, req.tx_id)
        outcome.stage = Stage.VALUE_EXCHANGE
        relay(net, receiver.device, sender.device, hello)
        status = receiver.status()
        if _settled_on(status, req.tx_id):
            outcome.status = PaymentStatus.SETTLED
        else:
            outcome.reason = status_name(status.last_peer_status)
    except TransportFailure as exc:
        outcome.status, outcome.reason = PaymentStatus.INTERRUPTED, str(exc)
        receiver.drop_sessions()
        sender.drop_sessions()
        return outcome
    except CbdcError as exc:
        if outcome.stage is Stage.INITIATION:
            outcome.status = PaymentStatus.REJECTED
        outcome.reason = type(exc).__name__
    finally:
        sender.approval = saved
    return _balances(outcome, receiver, sender)


def drive_retransmission(net: Transport, receiver: Wallet, sender: Wallet, interrupted: PaymentOutcome,
                         approval: Approval | None = None, condition: Condition | None = None,
                         colocated: bool = False) -> PaymentOutcome:
    """Recover an interrupted payment: settle it, retransmit it, or restart it."""
    amount, tx_id = interrupted.amount, interrupted.tx_id

    def restart() -> PaymentOutcome:
        out = initiate_payment(net, receiver, sender, amount, approval, condition, colocated)
        out.path = "restart"
        return out

    try:
        status = receiver.status()
    except TransportFailure as exc:
        return PaymentOutcome(PaymentStatus.INTERRUPTED, amount, tx_id, interrupted.stage, str(exc), "retransmit")
    if tx_id is not None and _settled_on(status, tx_id):
        out = PaymentOutcome(PaymentStatus.SETTLED, amount, tx_id, interrupted.stage, path="already-settled")
        return _balances(out, receiver, sender)
    last = status.last_entry
    still_pending = (tx_id is not None and last is not None and last.tx_id == tx_id and last.pending
                     and status.current_tx_id == tx_id)
    if interrupted.stage is Stage.INITIATION or not still_pending:
        return restart()
    out = PaymentOutcome(PaymentStatus.INTERRUPTED, amount, tx_id, Stage.VALUE_EXCHANGE, path="retransmit")
    try:
        hello = receiver.open_peer(sender.device.name, Purpose.RETRANSMIT, amount, tx_id)
        relay(net, receiver.device, sender.device, hello)
        status = receiver.status()
    except TransportFailure as exc:
        out.reason = str(exc)
        receiver.drop_sessions()
        sender.drop_sessions()
        return out
    except CbdcError as exc:
        out.reason = type(exc).__name__
        return out
    if _settled_on(status, tx_id):
        out.status = PaymentStatus.SETTLED
        return _balances(out, receiver, sender)
    if status.last_peer_status == NotCompleted.status_word:
        return restart()
    out.reason = status_name(status.last_peer_status)
    return out


class PointOfSale:
    """Merchant terminal co-locating the merchant's device and both wallet roles."""

    def __init__(self, name: str, *, keys: cc.KeyPair, cert: ParticipationCertificate, ca_public: bytes,
                 device: SecureDevice, net: Transport, rng: random.Random, clock: Callable[[], int],
                 pin: str = "1234", variant: Variant = Variant.V1_EPHEMERAL):
        self.name = name
        self.device = device
        self._common = dict(keys=keys, cert=cert, ca_public=ca_public, net=net, rng=rng, clock=clock,
                            variant=variant)
        self.till = Wallet(name, device=device, pin=pin, **self._common)
        self._readers: dict[str, Wallet] = {}

    def reader(self, card: SecureDevice, card_pin: str) -> Wallet:
        """Terminal-side view of a customer's card, reached over the POS reader."""
        w = self._readers.get(card.name)
        if w is None or w.pin != card_pin:
            w = Wallet(f"{self.name}:reader", device=card, pin=card_pin, **self._common)
            self._readers[card.name] = w
        return w


def run_pos_payment(net: Transport, pos: PointOfSale, card: SecureDevice, amount: int, card_pin: str = "1234",
                    approval: Approval | None = None, sender_wallet: Wallet | None = None) -> PaymentOutcome:
    """Sale at a POS.  The customer may bring a wallet app or just the card."""
    if sender_wallet is not None:
        return initiate_payment(net, pos.till, sender_wallet, amount, approval)
    return initiate_payment(net, pos.till, pos.reader(card, card_pin), amount, approval, colocated=True)


def retransmit_pos_payment(net: Transport, pos: PointOfSale, card: SecureDevice, interrupted: PaymentOutcome,
                           card_pin: str = "1234") -> PaymentOutcome:
    return drive_retransmission(net, pos.till, pos.reader(card, card_pin), interrupted, colocated=True)


# -- financial institution ---------------------------------------------------


@dataclass
class OnlineAccount:
    owner_id: str
    balance: int = 0


@dataclass
class OfflineLedgerEntry:
    device_pk: bytes
    owner_id: str
    mode: ComplianceMode
    last_synced_balance: int = 0
    blocked: bool = False
    epoch: int = 0
    # (epoch, balance) of a confirmation whose acknowledgement never arrived
    pending_confirm: tuple[int, int] | None = None


class SyncOutcome(Enum):
    CONSISTENT = "consistent"
    MISMATCH = "mismatch"


@dataclass
class SyncReport:
    device_pk: bytes = field(repr=False)
    reported_balance: int
    replayed_balance: int
    n: int
    outcome: SyncOutcome
    mode: ComplianceMode
    payload_bytes: int = 0
    review: bool = False

    @property
    def consistent(self) -> bool:
        return self.outcome is SyncOutcome.CONSISTENT


@dataclass(frozen=True)
class Finding:
    kind: str  # "unsettled-transfer" or "missing-credit"
    tx_id: bytes
    sender_pk: bytes
    receiver_pk: bytes | None
    amount: int


@dataclass
class InDoubtOp:
    op_id: bytes
    kind: str  # "withdraw" or "deposit"
    account: str
    device_pk: bytes | None
    amount: int


def replay_balance(last_synced: int, payload: SyncPayload) -> tuple[int, int]:
    """Replay a sync payload onto the last recorded balance; returns (balance, n)."""
    if payload.mode is ComplianceMode.COMPLIANCE_FREE:
        return payload.balance, 0
    if payload.mode is ComplianceMode.BALANCE_TRACKING:
        return last_synced + sum(payload.amounts or ()), len(payload.amounts or ())
    done = [e for e in payload.entries or () if not e.pending]
    return last_synced + sum(e.signed_amount for e in done), len(done)


class Journal:
    """Append-only file of length-prefixed JSON records."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = path
        self._memory: list[bytes] = []

    def append(self, record: dict) -> None:
        body = json.dumps(record, sort_keys=True).encode()
        blob = struct.pack(">I", len(body)) + body
        if self.path is None:
            self._memory.append(blob)
            return
        with open(self.path, "ab") as fh:
            fh.write(blob)
            fh.flush()

    def raw(self) -> bytes:
        if self.path is None:
            return b"".join(self._memory)
        if not os.path.exists(self.path):
            return b""
        with open(self.path, "rb") as fh:
            return fh.read()

    def records(self) -> Iterator[dict]:
        data = self.raw()
        pos = 0
        while pos + 4 <= len(data):
            (size,) = struct.unpack_from(">I", data, pos)
            if pos + 4 + size > len(data):
                return  # torn tail from a crash mid-append
            yield json.loads(data[pos + 4:pos + 4 + size])
            pos += 4 + size


class FinancialInstitution:
    """FI back office plus its terminal."""

    RETRIES = 2

    def __init__(self, name: str, *, keys: cc.KeyPair, cert: ParticipationCertificate, ca_public: bytes,
                 net: Transport, rng: random.Random, clock: Callable[[], int],
                 variant: Variant = Variant.V1_EPHEMERAL, default_limits: Limits | None = None,
                 journal: Journal | None = None):
        self.name = name
        self.keys = keys
        self.cert = cert
        self.ca_public = ca_public
        self.net = net
        self.rng = rng
        self.clock = clock
        self.variant = variant
        self.default_limits = default_limits
        self.limit_updates: dict[bytes, Limits] = {}
        self.journal = journal or Journal()
        self.accounts: dict[str, OnlineAccount] = {}
        self.ledger: dict[bytes, OfflineLedgerEntry] = {}
        self.in_doubt: dict[bytes, InDoubtOp] = {}
        self.findings: list[Finding] = []
        self.minted = 0
        # reconciliation indexes for transaction tracking
        self._credited: dict[bytes, bytes] = {}
        self._expected: dict[bytes, tuple[bytes, bytes, int]] = {}
        self._pending_in: dict[bytes, set[bytes]] = {}

    # -- journaled mutations ----------------------------------------------------

    def _put_account(self, acct: OnlineAccount) -> None:
        self.accounts[acct.owner_id] = acct
        self.journal.append({"t": "account", "owner": acct.owner_id, "balance": acct.balance})

    def _put_ledger(self, entry: OfflineLedgerEntry) -> None:
        self.ledger[entry.device_pk] = entry
        rec = asdict(entry)
        rec["device_pk"] = entry.device_pk.hex()
        rec["mode"] = int(entry.mode)
        self.journal.append({"t": "ledger", **rec})

    def _put_op(self, op: InDoubtOp, done: bool = False) -> None:
        if done:
            self.in_doubt.pop(op.op_id, None)
        else:
            self.in_doubt[op.op_id] = op
        self.journal.append({"t": "op", "op_id": op.op_id.hex(), "done": done, "kind": op.kind,
                             "account": op.account, "amount": op.amount,
                             "device_pk": op.device_pk.hex() if op.device_pk else None})

    def _note(self, finding: Finding) -> None:
        if finding in self.findings:
            return
        self.findings.append(finding)
        self.journal.append({"t": "finding", "kind": finding.kind, "tx_id": finding.tx_id.hex(),
                             "sender": finding.sender_pk.hex(),
                             "receiver": finding.receiver_pk.hex() if finding.receiver_pk else None,
                             "amount": finding.amount})

    def recover_from_journal(self) -> None:
        """Rebuild accounts, ledger, in-doubt operations and findings from the journal."""
        self.accounts, self.ledger, self.in_doubt, self.findings = {}, {}, {}, []
        for rec in self.journal.records():
            kind = rec.pop("t")
            if kind == "account":
                self.accounts[rec["owner"]] = OnlineAccount(rec["owner"], rec["balance"])
            elif kind == "ledger":
                pk = bytes.fromhex(rec["device_pk"])
                pc = rec["pending_confirm"]
                self.ledger[pk] = OfflineLedgerEntry(pk, rec["owner_id"], ComplianceMode(rec["mode"]),
                                                     rec["last_synced_balance"], rec["blocked"], rec["epoch"],
                                                     tuple(pc) if pc else None)
            elif kind == "op":
                op_id = bytes.fromhex(rec["op_id"])
                if rec["done"]:
                    self.in_doubt.pop(op_id, None)
                else:
                    dev = bytes.fromhex(rec["device_pk"]) if rec["device_pk"] else None
                    self.in_doubt[op_id] = InDoubtOp(op_id, rec["kind"], rec["account"], dev, rec["amount"])
            elif kind == "finding":
                self.findings.append(Finding(rec["kind"], bytes.fromhex(rec["tx_id"]), bytes.fromhex(rec["sender"]),
                                             bytes.fromhex(rec["receiver"]) if rec["receiver"] else None,
                                             rec["amount"]))
            elif kind == "mint":
                self.minted += rec["amount"]

    # -- service API ------------------------------------------------------------

    def open_account(self, owner_id: str, balance: int = 0) -> OnlineAccount:
        acct = OnlineAccount(owner_id, 0)
        self._put_account(acct)
        if balance:
            self.mint(owner_id, balance)
        return acct

    def mint(self, owner_id: str, amount: int) -> None:
        acct = self.account(owner_id)
        self.minted += amount
        self.journal.append({"t": "mint", "owner": owner_id, "amount": amount})
        self._put_account(OnlineAccount(owner_id, acct.balance + amount))

    def account(self, owner_id: str) -> OnlineAccount:
        try:
            return self.accounts[owner_id]
        except KeyError:
            raise UnknownAccount(owner_id) from None

    def enroll(self, device_pk: bytes, owner_id: str, mode: ComplianceMode, balance: int = 0) -> OfflineLedgerEntry:
        entry = OfflineLedgerEntry(device_pk, owner_id, mode, balance)
        self._put_ledger(entry)
        return entry

    def entry(self, device_pk: bytes) -> OfflineLedgerEntry:
        try:
            return self.ledger[device_pk]
        except KeyError:
            raise NotEnrolled(device_pk.hex()[:16]) from None

    def set_limits(self, device_pk: bytes, limits: Limits) -> None:
        """Risk parameters handed to the device at its next successful sync."""
        self.limit_updates[device_pk] = limits

    def connect(self, device: SecureDevice, pin: str = "1234", resolve: bool = True) -> "BankSession":
        ctx = handshake(self.net, self.name, device, self.cert, self.keys, self.variant,
                        ca_public=self.ca_public, rng=self.rng, now=self.clock(),
                        accept_roles=frozenset({Role.SECURE_DEVICE}))
        link = DeviceLink(self.net, self.name, device, ctx)
        link.command(Command.VERIFY_PIN, [(T_PIN, pin.encode())])
        session = BankSession(self, device, link, pin)
        if resolve:
            session.resolve_in_doubt()
        return session

    def synchronize(self, device: SecureDevice, pin: str = "1234") -> SyncReport:
        return self.connect(device, pin).synchronize()

    def withdraw(self, account: str, device: SecureDevice, amount: int, pin: str = "1234") -> int:
        session = self.connect(device, pin)
        if self.entry(device.public_key).mode is not ComplianceMode.COMPLIANCE_FREE:
            session.synchronize()
        return session.withdraw(account, amount)

    def deposit(self, account: str, device: SecureDevice, amount: int, pin: str = "1234") -> int:
        session = self.connect(device, pin)
        if self.entry(device.public_key).mode is not ComplianceMode.COMPLIANCE_FREE:
            session.synchronize()
        return session.deposit(account, amount)

    def block(self, device: SecureDevice, pin: str = "1234") -> None:
        self.connect(device, pin, resolve=False).block()

    def anonymous_withdraw(self, account: str, device: SecureDevice, amount: int, holder: Wallet,
                           pin: str = "1234") -> int:
        """Cash-in where the device shows only a throwaway key and the holder proves eligibility."""
        acct = self.account(account)
        if acct.balance < amount:
            raise InsufficientOnlineBalance(f"{acct.balance} < {amount}")
        op = InDoubtOp(cc.random_bytes(self.rng, 16), "withdraw", account, None, amount)
        debited = False
        for _ in range(self.RETRIES + 1):
            ctx = handshake(self.net, self.name, device, self.cert, self.keys, Variant.ANONYMOUS,
                            ca_public=self.ca_public, rng=self.rng, now=self.clock(),
                            accept_roles=frozenset({Role.SECURE_DEVICE}))
            epk = ctx.peer_pk
            now = self.clock()
            raw = self.net.transmit(holder.name, self.name, holder.withdrawal_proof(epk, now).encode())
            try:
                proof = ConditionProof.decode(raw)
            except DecodeError:
                raise ConditionProofRejected("malformed proof") from None
            if not verify_withdrawal(proof, self.ca_public, epk, now):
                raise ConditionProofRejected("withdrawal proof does not verify")
            link = DeviceLink(self.net, self.name, device, ctx)
            if not debited:
                self._put_account(OnlineAccount(account, acct.balance - amount))
                self._put_op(op)
                debited = True
            try:
                link.command(Command.VERIFY_PIN, [(T_PIN, pin.encode())])
                f = link.command(Operation.WITHDRAW, [(T_AMOUNT, tlv.u64(amount)), (T_OP_ID, op.op_id)])
            except TransportFailure:
                continue
            except CbdcError:
                self._put_op(op, done=True)
                self._put_account(OnlineAccount(account, self.account(account).balance + amount))
                raise
            self._put_op(op, done=True)
            return tlv.read_u64(f[T_BALANCE])
        raise TransportFailure("anonymous withdrawal left in doubt")

    # -- reconciliation -----------------------------------------------------------

    def _reconcile(self, device_pk: bytes, entries: tuple[LogEntry, ...]) -> None:
        for e in entries:
            if e.pending:
                continue
            if e.direction is Direction.INCOMING:
                self._credited[e.tx_id] = device_pk
                self._expected.pop(e.tx_id, None)
            elif e.tx_id not in self._credited:
                self._expected[e.tx_id] = (device_pk, e.counterparty_pk, e.amount)
        self._pending_in[device_pk] = {e.tx_id for e in entries
                                       if e.pending and e.direction is Direction.INCOMING}
        for tx_id, (sender, receiver, amount) in list(self._expected.items()):
            if receiver not in self._pending_in:
                continue  # receiver has not synchronized since
            if tx_id in self._pending_in[receiver]:
                self._note(Finding("unsettled-transfer", tx_id, sender, receiver, amount))
            elif receiver == device_pk:
                self._note(Finding("missing-credit", tx_id, sender, receiver, amount))


class BankSession:
    """One authenticated FI terminal visit with a device."""

    def __init__(self, fi: FinancialInstitution, device: SecureDevice, link: DeviceLink, pin: str):
        self.fi = fi
        self.device = device
        self.link = link
        self.pin = pin
        self.synced = False

    @property
    def device_pk(self) -> bytes:
        return self.device.public_key

    def _command(self, opcode: int, fields: list[tuple[int, bytes]]) -> dict:
        return self.link.command(opcode, fields)

    def _bank_command(self, op: InDoubtOp) -> dict:
        """Issue a withdraw/deposit, retrying the same op id over fresh sessions."""
        opcode = Operation.WITHDRAW if op.kind == "withdraw" else Operation.DEPOSIT
        fields = [(T_AMOUNT, tlv.u64(op.amount)), (T_OP_ID, op.op_id)]
        for attempt in range(self.fi.RETRIES + 1):
            try:
                if not self.link.alive:
                    self.link = self.fi.connect(self.device, self.pin, resolve=False).link
                return self._command(opcode, fields)
            except TransportFailure:
                if attempt == self.fi.RETRIES:
                    raise
        raise AssertionError("unreachable")

    def _settle(self, op: InDoubtOp, accepted: bool) -> None:
        fi = self.fi
        acct = fi.account(op.account)
        entry = fi.ledger.get(op.device_pk) if op.device_pk else None
        if op.kind == "withdraw":
            if accepted and entry is not None:
                fi._put_ledger(replace(entry, last_synced_balance=entry.last_synced_balance + op.amount))
            elif not accepted:
                fi._put_account(OnlineAccount(op.account, acct.balance + op.amount))
        elif accepted:
            fi._put_account(OnlineAccount(op.account, acct.balance + op.amount))
            if entry is not None:
                fi._put_ledger(replace(entry, last_synced_balance=entry.last_synced_balance - op.amount))
        fi._put_op(op, done=True)

    def resolve_in_doubt(self) -> None:
        for op in [o for o in self.fi.in_doubt.values() if o.device_pk == self.device_pk]:
            try:
                self._bank_command(op)
            except TransportFailure:
                raise
            except CbdcError:
                self._settle(op, accepted=False)
            else:
                self._settle(op, accepted=True)

    def synchronize(self) -> SyncReport:
        fi = self.fi
        entry = fi.entry(self.device_pk)
        if entry.blocked:
            raise DeviceBlocked("card is blocked in the offline ledger")
        f = self._command(Operation.SYNCHRONIZE, [(T_PHASE, bytes([SyncPhase.QUERY]))])
        payload = SyncPayload.from_fields(f)
        size = len(tlv.encode(payload.fields()))
        if entry.pending_confirm is not None:
            epoch, balance = entry.pending_confirm
            if payload.epoch == epoch + 1:
                entry = replace(entry, last_synced_balance=balance, epoch=epoch + 1, pending_confirm=None)
            else:
                entry = replace(entry, pending_confirm=None)
            fi._put_ledger(entry)
        replayed, n = replay_balance(entry.last_synced_balance, payload)
        review = any(e.pending and e.direction is Direction.OUTGOING for e in payload.entries or ())
        consistent = replayed == payload.balance and payload.epoch == entry.epoch
        report = SyncReport(self.device_pk, payload.balance, replayed, n,
                            SyncOutcome.CONSISTENT if consistent else SyncOutcome.MISMATCH,
                            payload.mode, size, review)
        if not consistent:
            fi._put_ledger(replace(entry, blocked=True))
            try:
                self._command(Operation.SYNCHRONIZE, [(T_PHASE, bytes([SyncPhase.BLOCK]))])
            except CbdcError:
                pass  # ledger flag already refuses further service
            return report
        if payload.entries is not None:
            fi._reconcile(self.device_pk, payload.entries)
        limits = fi.limit_updates.get(self.device_pk)
        fi._put_ledger(replace(entry, pending_confirm=(payload.epoch, payload.balance)))
        fields = [(T_PHASE, bytes([SyncPhase.CONFIRM])), (T_EPOCH, tlv.u64(payload.epoch))]
        if limits is not None:
            fields.append((T_LIMITS, limits.encode()))
        self._command(Operation.SYNCHRONIZE, fields)
        fi._put_ledger(replace(entry, last_synced_balance=payload.balance, epoch=payload.epoch + 1,
                                mode=payload.mode, pending_confirm=None))
        fi.limit_updates.pop(self.device_pk, None)
        self.synced = True
        return report

    def _preflight(self) -> OfflineLedgerEntry:
        entry = self.fi.entry(self.device_pk)
        if entry.blocked:
            raise DeviceBlocked("card is blocked in the offline ledger")
        if entry.mode is not ComplianceMode.COMPLIANCE_FREE and not self.synced:
            raise SyncRequired("synchronize before moving funds")
        return entry

    def withdraw(self, account: str, amount: int) -> int:
        fi = self.fi
        self._preflight()
        acct = fi.account(account)
        if acct.balance < amount:
            raise InsufficientOnlineBalance(f"{acct.balance} < {amount}")
        op = InDoubtOp(cc.random_bytes(fi.rng, 16), "withdraw", account, self.device_pk, amount)
        fi._put_account(OnlineAccount(account, acct.balance - amount))
        fi._put_op(op)
        try:
            f = self._bank_command(op)
        except TransportFailure:
            raise
        except CbdcError:
            self._settle(op, accepted=False)
            raise
        self._settle(op, accepted=True)
        return tlv.read_u64(f[T_BALANCE])

    def deposit(self, account: str, amount: int) -> int:
        fi = self.fi
        self._preflight()
        fi.account(account)
        op = InDoubtOp(cc.random_bytes(fi.rng, 16), "deposit", account, self.device_pk, amount)
        fi._put_op(op)
        try:
            f = self._bank_command(op)
        except TransportFailure:
            raise
        except CbdcError:
            self._settle(op, accepted=False)
            raise
        self._settle(op, accepted=True)
        return tlv.read_u64(f[T_BALANCE])

    def block(self) -> None:
        entry = self.fi.entry(self.device_pk)
        self.fi._put_ledger(replace(entry, blocked=True))
        self._command(Operation.SYNCHRONIZE, [(T_PHASE, bytes([SyncPhase.BLOCK]))])


__all__ = [
    "BankSession", "Condition", "DeviceLink", "DirectTransport", "FinancialInstitution", "Finding", "InDoubtOp",
    "Journal", "OfflineLedgerEntry", "OnlineAccount", "PaymentOutcome", "PaymentStatus", "PointOfSale", "Stage",
    "SyncOutcome", "SyncReport", "Transport", "Wallet", "drive_retransmission", "exchange", "handshake",
    "initiate_payment", "relay", "replay_balance", "retransmit_pos_payment", "run_pos_payment",
]
