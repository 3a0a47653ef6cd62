"""Secure element applet: balance, limits, transaction log and command handlers.

The applet is a passive command processor.  ``SecureDevice.process`` takes
one frame from some logical channel and returns at most one frame to send
back on that same channel.  Handshake frames build sessions; sealed frames
carry commands (``0xC0 | opcode | TLV``) or responses
(``0x90 | status word | TLV``).

Every balance-affecting handler computes a complete successor
``DeviceState`` and installs it with a single assignment, so the balance and
the log can never be observed out of step.
"""

from __future__ import annotations

import functools
import random
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Callable

from . import crypto_core as cc
from . import encoding as tlv
from .errors import (
    BalanceCapExceeded,
    CbdcError,
    CumulativeLimitExceeded,
    DecodeError,
    DeviceBlocked,
    InsufficientBalance,
    InvalidAmount,
    LogFull,
    NoMatchingPending,
    NotAuthenticated,
    NotCompleted,
    NotMostRecent,
    OutOfOrderMessage,
    PerTxLimitExceeded,
    PermissionDenied,
    PinBlocked,
    SessionRequired,
    StaleSyncEpoch,
    StaleTxId,
    SW_OK,
    UnknownCommand,
    WrongPin,
    error_for_status,
)
from .pki import Operation, ParticipationCertificate, Role, permitted
from .secure_channel import (
    FrameType,
    HandshakeState,
    SessionContext,
    Variant,
    error_frame,
    frame_type,
    initiate,
    listen,
    receive,
    respond,
    send,
)

TX_ID_SIZE = 16
OP_ID_SIZE = 16
LOG_CAPACITY = 64
PIN_TRIES = 3
BANK_OP_MEMORY = 16

CMD = 0xC0
RSP = 0x90


class Command(IntEnum):
    """Applet commands outside the eight value operations."""

    VERIFY_PIN = 0x20
    OPEN_PEER = 0x21
    GET_STATUS = 0x22


class Direction(IntEnum):
    INCOMING = 1
    OUTGOING = 2


class TxStatus(IntEnum):
    PENDING = 1
    COMPLETED = 2


class ComplianceMode(IntEnum):
    COMPLIANCE_FREE = 0
    BALANCE_TRACKING = 1
    TRANSACTION_TRACKING = 2


class Purpose(IntEnum):
    PAY = 1
    RETRANSMIT = 2


class Side(IntEnum):
    SENDER = 0
    RECEIVER = 1


class SyncPhase(IntEnum):
    QUERY = 0
    CONFIRM = 1
    BLOCK = 2


# command / response TLV tags
T_AMOUNT = 0x30
T_TX_ID = 0x31
T_BALANCE = 0x32
T_SIDE = 0x33
T_PURPOSE = 0x34
T_CHANNEL = 0x35
T_FRAME = 0x36
T_PIN = 0x37
T_MODE = 0x38
T_PHASE = 0x39
T_AMOUNTS = 0x3A
T_ENTRY = 0x3B
T_LIMITS = 0x3C
T_EPOCH = 0x3D
T_OP_ID = 0x3E
T_BLOCKED = 0x40
T_LAST_ENTRY = 0x41
T_PEER_STATUS = 0x42
T_ACK_OP = 0x43
T_RETRIES = 0x44
T_LOG_SIZE = 0x46
T_CURRENT_TX = 0x47


@dataclass(frozen=True)
class Limits:
    max_balance: int
    per_tx_max: int
    cumulative_max: int

    def __post_init__(self):
        if min(self.max_balance, self.per_tx_max, self.cumulative_max) < 0:
            raise ValueError("limits must be non-negative")

    def encode(self) -> bytes:
        return tlv.u64(self.max_balance) + tlv.u64(self.per_tx_max) + tlv.u64(self.cumulative_max)

    @classmethod
    def decode(cls, raw: bytes) -> "Limits":
        tlv.fixed(raw, 24, "limits")
        return cls(tlv.read_u64(raw[:8]), tlv.read_u64(raw[8:16]), tlv.read_u64(raw[16:]))


_NO_COUNTERPARTY = bytes(cc.POINT_SIZE)
ENTRY_SIZE = TX_ID_SIZE + 8 + 1 + 1 + cc.POINT_SIZE


@dataclass(frozen=True)
class LogEntry:
    tx_id: bytes
    amount: int
    direction: Direction
    status: TxStatus
    counterparty_pk: bytes | None = None

    @property
    def signed_amount(self) -> int:
        return self.amount if self.direction is Direction.INCOMING else -self.amount

    @property
    def pending(self) -> bool:
        return self.status is TxStatus.PENDING

    def completed(self, counterparty_pk: bytes) -> "LogEntry":
        return replace(self, status=TxStatus.COMPLETED, counterparty_pk=counterparty_pk)

    def encode(self) -> bytes:
        return (self.tx_id + tlv.u64(self.amount) + bytes([self.direction, self.status])
                + (self.counterparty_pk or _NO_COUNTERPARTY))

    @classmethod
    def decode(cls, raw: bytes) -> "LogEntry":
        tlv.fixed(raw, ENTRY_SIZE, "log entry")
        try:
            direction = Direction(raw[24])
            status = TxStatus(raw[25])
        except ValueError:
            raise DecodeError("bad log entry flags") from None
        cp = raw[26:]
        return cls(raw[:16], tlv.read_u64(raw[16:24]), direction, status,
                   None if cp == _NO_COUNTERPARTY else cp)


@dataclass(frozen=True)
class DeviceState:
    balance: int
    limits: Limits
    static_keys: cc.KeyPair = field(repr=False)
    certificate: ParticipationCertificate = field(repr=False)
    mode: ComplianceMode = ComplianceMode.BALANCE_TRACKING
    cumulative_spent: int = 0
    log: tuple[LogEntry, ...] = ()
    current_tx_id: bytes | None = None
    current_tx_confirmed: bool = False
    blocked: bool = False
    sync_epoch: int = 0
    # (op_id, status word, balance after) for recent withdraw/deposit commands
    bank_ops: tuple[tuple[bytes, int, int], ...] = ()

    @property
    def pending(self) -> LogEntry | None:
        if self.log and self.log[-1].pending:
            return self.log[-1]
        return None

    @property
    def completed_entries(self) -> tuple[LogEntry, ...]:
        return tuple(e for e in self.log if not e.pending)


@dataclass(frozen=True)
class PaymentRequest:
    amount: int
    tx_id: bytes


@dataclass(frozen=True)
class ReceiveMessage:
    amount: int
    tx_id: bytes


@dataclass(frozen=True)
class SyncPayload:
    mode: ComplianceMode
    epoch: int
    balance: int
    amounts: tuple[int, ...] | None = None
    entries: tuple[LogEntry, ...] | None = None

    @property
    def n(self) -> int:
        if self.amounts is not None:
            return len(self.amounts)
        if self.entries is not None:
            return sum(1 for e in self.entries if not e.pending)
        return 0

    def fields(self) -> list[tuple[int, bytes]]:
        out = [(T_MODE, bytes([self.mode])), (T_EPOCH, tlv.u64(self.epoch)),
               (T_BALANCE, tlv.u64(self.balance))]
        if self.amounts:
            out.append((T_AMOUNTS, b"".join(tlv.i64(a) for a in self.amounts)))
        if self.entries is not None:
            out.extend((T_ENTRY, e.encode()) for e in self.entries)
        return out

    @classmethod
    def from_fields(cls, fields: dict) -> "SyncPayload":
        mode = ComplianceMode(tlv.read_u8(fields[T_MODE]))
        amounts = entries = None
        if mode is ComplianceMode.BALANCE_TRACKING:
            raw = fields.get(T_AMOUNTS, b"")
            if len(raw) % 8:
                raise DecodeError("amount list not a multiple of 8 bytes")
            amounts = tuple(int.from_bytes(raw[i:i + 8], "big", signed=True) for i in range(0, len(raw), 8))
        elif mode is ComplianceMode.TRANSACTION_TRACKING:
            entries = tuple(LogEntry.decode(raw) for raw in fields.get(T_ENTRY, []))
        return cls(mode, tlv.read_u64(fields[T_EPOCH]), tlv.read_u64(fields[T_BALANCE]), amounts, entries)


@dataclass(frozen=True)
class DeviceStatus:
    balance: int
    blocked: bool
    log_size: int
    sync_epoch: int
    pin_retries: int
    last_peer_status: int
    current_tx_id: bytes | None
    last_entry: LogEntry | None

    def fields(self) -> list[tuple[int, bytes]]:
        out = [(T_BALANCE, tlv.u64(self.balance)), (T_BLOCKED, bytes([self.blocked])),
               (T_LOG_SIZE, tlv.u64(self.log_size)), (T_EPOCH, tlv.u64(self.sync_epoch)),
               (T_RETRIES, bytes([self.pin_retries])),
               (T_PEER_STATUS, self.last_peer_status.to_bytes(2, "big"))]
        if self.current_tx_id is not None:
            out.append((T_CURRENT_TX, self.current_tx_id))
        if self.last_entry is not None:
            out.append((T_LAST_ENTRY, self.last_entry.encode()))
        return out

    @classmethod
    def from_fields(cls, f: dict) -> "DeviceStatus":
        return cls(
            balance=tlv.read_u64(f[T_BALANCE]),
            blocked=bool(tlv.read_u8(f[T_BLOCKED])),
            log_size=tlv.read_u64(f[T_LOG_SIZE]),
            sync_epoch=tlv.read_u64(f[T_EPOCH]),
            pin_retries=tlv.read_u8(f[T_RETRIES]),
            last_peer_status=int.from_bytes(f[T_PEER_STATUS], "big"),
            current_tx_id=f.get(T_CURRENT_TX),
            last_entry=LogEntry.decode(f[T_LAST_ENTRY]) if T_LAST_ENTRY in f else None,
        )


# -- plaintext command / response codec ---------------------------------------

def encode_command(opcode: int, fields: list[tuple[int, bytes]] = ()) -> bytes:
    return bytes([CMD, opcode]) + tlv.encode(fields)


def decode_command(payload: bytes) -> tuple[int, dict]:
    if len(payload) < 2 or payload[0] != CMD:
        raise DecodeError("not a command")
    return payload[1], tlv.decode_map(payload[2:], repeated=(T_ENTRY,))


def encode_response(sw: int, fields: list[tuple[int, bytes]] = ()) -> bytes:
    return bytes([RSP]) + sw.to_bytes(2, "big") + tlv.encode(fields)


def decode_response(payload: bytes) -> tuple[int, dict]:
    if len(payload) < 3 or payload[0] != RSP:
        raise DecodeError("not a response")
    return int.from_bytes(payload[1:3], "big"), tlv.decode_map(payload[3:], repeated=(T_ENTRY,))


def is_response(payload: bytes) -> bool:
    return payload[:1] == bytes([RSP])


def raise_for_status(sw: int, fields: dict | None = None) -> None:
    if sw == SW_OK:
        return
    cls = error_for_status(sw)
    if cls is WrongPin:
        raise WrongPin(sw & 0x0F)
    raise cls(f"device returned status {sw:#06x}")


def _amount(fields: dict) -> int:
    if T_AMOUNT not in fields:
        raise DecodeError("missing amount")
    return tlv.read_u64(fields[T_AMOUNT])


def _tx_id(fields: dict) -> bytes:
    if T_TX_ID not in fields:
        raise DecodeError("missing transaction id")
    return tlv.fixed(fields[T_TX_ID], TX_ID_SIZE, "transaction id")


def _operation(op: Operation, needs_user: bool = False):
    """Gate a handler on the caller's certified role, the blocked flag and PIN state."""

    def wrap(fn):
        @functools.wraps(fn)
        def gated(self, ctx: SessionContext, *args, **kwargs):
            if not permitted(ctx.peer_role, op):
                raise PermissionDenied(f"{op.name} not permitted for {ctx.peer_role}")
            if self.state.blocked and op is not Operation.SYNCHRONIZE:
                raise DeviceBlocked("device is blocked")
            if needs_user and not ctx.user_verified:
                raise NotAuthenticated("user has not entered the PIN on this session")
            return fn(self, ctx, *args, **kwargs)

        gated.operation = op
        return gated

    return wrap


def _internal(*roles: Role, needs_user: bool = False):
    def wrap(fn):
        @functools.wraps(fn)
        def gated(self, ctx: SessionContext, *args, **kwargs):
            if ctx.peer_role not in roles:
                raise PermissionDenied(f"{fn.__name__} not permitted for {ctx.peer_role}")
            if needs_user and not ctx.user_verified:
                raise NotAuthenticated("user has not entered the PIN on this session")
            return fn(self, ctx, *args, **kwargs)

        return gated

    return wrap


SessionObserver = Callable[[str, str, SessionContext], None]


class SecureDevice:
    """One secure element running the payment applet."""

    def __init__(self, name: str, keys: cc.KeyPair, cert: ParticipationCertificate, ca_public: bytes, *,
                 limits: Limits, rng: random.Random, clock: Callable[[], int],
                 mode: ComplianceMode = ComplianceMode.BALANCE_TRACKING, pin: str = "1234",
                 variant: Variant = Variant.V1_EPHEMERAL, balance: int = 0,
                 log_capacity: int = LOG_CAPACITY, session_observer: SessionObserver | None = None):
        if not 0 <= balance <= limits.max_balance:
            raise ValueError("initial balance outside limits")
        self.name = name
        self.ca_public = ca_public
        self.variant = variant
        self.rng = rng
        self.clock = clock
        self.log_capacity = log_capacity
        self.session_observer = session_observer
        self.state = DeviceState(balance=balance, limits=limits, static_keys=keys, certificate=cert, mode=mode)
        self.pin_retries = PIN_TRIES
        self.last_peer_status = SW_OK
        self.asym_ops = 0
        self._pin = pin
        self._sessions: dict[str, SessionContext] = {}
        self._handshakes: dict[str, HandshakeState] = {}
        self._peer_purpose: dict[str, tuple[Purpose, int, bytes]] = {}

    # -- accessors -----------------------------------------------------------

    @property
    def public_key(self) -> bytes:
        return self.state.static_keys.public

    @property
    def balance(self) -> int:
        return self.state.balance

    def session(self, channel: str) -> SessionContext | None:
        return self._sessions.get(channel)

    def _commit(self, **changes) -> None:
        self.state = replace(self.state, **changes)

    # -- frame entry point -----------------------------------------------------

    def process(self, channel: str, data: bytes) -> bytes | None:
        kind = frame_type(data)
        if kind in (FrameType.HELLO, FrameType.CERT, FrameType.KEYX, FrameType.FINISH):
            return self._handshake_frame(channel, kind, data)
        if kind is FrameType.SEALED:
            return self._sealed_frame(channel, data)
        if kind is FrameType.ERROR:
            self._handshakes.pop(channel, None)
            return None
        return error_frame(DecodeError.status_word)

    def _handshake_frame(self, channel: str, kind: FrameType, data: bytes) -> bytes | None:
        if kind is FrameType.HELLO:
            self._handshakes.pop(channel, None)
            self._sessions.pop(channel, None)
            self._peer_purpose.pop(channel, None)
            self._handshakes[channel] = listen(
                self.state.certificate, self.state.static_keys, {self.variant, Variant.ANONYMOUS},
                ca_public=self.ca_public, rng=self.rng, now=self.clock())
        state = self._handshakes.get(channel)
        if state is None:
            return error_frame(OutOfOrderMessage.status_word)
        try:
            _, out, ctx = respond(state, data)
        except CbdcError as exc:
            self._handshakes.pop(channel, None)
            self.asym_ops += state.asym_ops
            return error_frame(exc.status_word)
        if ctx is None:
            return out
        del self._handshakes[channel]
        self.asym_ops += state.asym_ops
        self._sessions[channel] = ctx
        if self.session_observer is not None:
            self.session_observer(self.name, channel, ctx)
        if state.initiator:
            return self._open_value_exchange(channel, ctx)
        return out

    def _sealed_frame(self, channel: str, data: bytes) -> bytes | None:
        ctx = self._sessions.get(channel)
        if ctx is None:
            return error_frame(SessionRequired.status_word)
        try:
            payload = receive(ctx, data)
        except CbdcError as exc:
            return error_frame(exc.status_word)
        if is_response(payload):
            try:
                self.last_peer_status, _ = decode_response(payload)
            except DecodeError:
                self.last_peer_status = DecodeError.status_word
            return None
        try:
            opcode, fields = decode_command(payload)
            reply = self._dispatch(ctx, channel, opcode, fields)
        except CbdcError as exc:
            reply = encode_response(exc.status_word)
        return send(ctx, reply)

    def _dispatch(self, ctx: SessionContext, channel: str, opcode: int, f: dict) -> bytes:
        ok = lambda fields=(): encode_response(SW_OK, list(fields))  # noqa: E731
        if opcode == Operation.REQUEST:
            req = self.create_request(ctx, _amount(f))
            return ok([(T_AMOUNT, tlv.u64(req.amount)), (T_TX_ID, req.tx_id)])
        if opcode == Operation.ACCEPT:
            side = Side(tlv.read_u8(f.get(T_SIDE, b"\x00")))
            if side is Side.SENDER:
                req = self.check_and_accept(ctx, _amount(f), _tx_id(f))
                return ok([(T_AMOUNT, tlv.u64(req.amount)), (T_TX_ID, req.tx_id)])
            self.confirm_accept(ctx, _amount(f), _tx_id(f))
            return ok()
        if opcode == Operation.TRANSFER:
            msg = self.handle_transfer(ctx, _amount(f), _tx_id(f))
            return self._receive_command(msg)
        if opcode == Operation.RETRANSMIT:
            msg = self.handle_retransmit(ctx, _amount(f), _tx_id(f))
            return self._receive_command(msg)
        if opcode == Operation.RECEIVE:
            tx_id = _tx_id(f)
            balance = self.handle_receive(ctx, _amount(f), tx_id)
            return ok([(T_ACK_OP, bytes([Operation.RECEIVE])), (T_TX_ID, tx_id), (T_AMOUNT, f[T_AMOUNT]),
                       (T_BALANCE, tlv.u64(balance))])
        if opcode in (Operation.WITHDRAW, Operation.DEPOSIT):
            handler = self.handle_withdraw if opcode == Operation.WITHDRAW else self.handle_deposit
            op_id = f.get(T_OP_ID)
            balance = handler(ctx, _amount(f), op_id)
            fields = [(T_ACK_OP, bytes([opcode])), (T_AMOUNT, f[T_AMOUNT]), (T_BALANCE, tlv.u64(balance))]
            if op_id is not None:
                fields.append((T_OP_ID, op_id))
            return ok(fields)
        if opcode == Operation.SYNCHRONIZE:
            phase = SyncPhase(tlv.read_u8(f.get(T_PHASE, b"\x00")))
            payload = self.handle_synchronize(
                ctx, phase,
                epoch=tlv.read_u64(f[T_EPOCH]) if T_EPOCH in f else None,
                limits=Limits.decode(f[T_LIMITS]) if T_LIMITS in f else None,
                mode=ComplianceMode(tlv.read_u8(f[T_MODE])) if T_MODE in f else None)
            return ok(payload.fields() if payload is not None else [])
        if opcode == Command.VERIFY_PIN:
            self.verify_pin(ctx, f.get(T_PIN, b"").decode(errors="replace"))
            return ok()
        if opcode == Command.OPEN_PEER:
            purpose = Purpose(tlv.read_u8(f[T_PURPOSE]))
            hello = self.open_peer_session(
                ctx, f[T_CHANNEL].decode(), purpose,
                amount=_amount(f) if T_AMOUNT in f else None,
                tx_id=_tx_id(f) if T_TX_ID in f else None)
            return ok([(T_FRAME, hello)])
        if opcode == Command.GET_STATUS:
            return ok(self.status(ctx).fields())
        raise UnknownCommand(f"opcode {opcode:#04x}")

    def _receive_command(self, msg: ReceiveMessage) -> bytes:
        return encode_command(Operation.RECEIVE, [(T_AMOUNT, tlv.u64(msg.amount)), (T_TX_ID, msg.tx_id)])

    def _open_value_exchange(self, channel: str, ctx: SessionContext) -> bytes | None:
        purpose, amount, tx_id = self._peer_purpose.pop(channel, (None, 0, b""))
        pending = self.state.pending
        if purpose is None or pending is None or pending.tx_id != tx_id:
            return None
        op = Operation.TRANSFER if purpose is Purpose.PAY else Operation.RETRANSMIT
        return send(ctx, encode_command(op, [(T_AMOUNT, tlv.u64(amount)), (T_TX_ID, tx_id)]))

    # -- user authentication --------------------------------------------------

    @_internal(Role.USER_TERMINAL, Role.FI_TERMINAL)
    def verify_pin(self, ctx: SessionContext, pin: str) -> None:
        if self.pin_retries == 0:
            raise PinBlocked("PIN retry counter exhausted")
        if pin != self._pin:
            self.pin_retries -= 1
            ctx.user_verified = False
            raise WrongPin(self.pin_retries)
        self.pin_retries = PIN_TRIES
        ctx.user_verified = True

    @_internal(Role.USER_TERMINAL, Role.FI_TERMINAL)
    def status(self, ctx: SessionContext) -> DeviceStatus:
        s = self.state
        return DeviceStatus(s.balance, s.blocked, len(s.log), s.sync_epoch, self.pin_retries,
                            self.last_peer_status, s.current_tx_id, s.log[-1] if s.log else None)

    # -- payment initiation ---------------------------------------------------

    def _check_capacity(self, extra: int = 1) -> None:
        if len(self.state.completed_entries) + extra > self.log_capacity:
            raise LogFull("transaction log full; synchronize first")

    @staticmethod
    def _check_amount(amount: int) -> None:
        if amount <= 0:
            raise InvalidAmount("amount must be positive")

    @_operation(Operation.REQUEST, needs_user=True)
    def create_request(self, ctx: SessionContext, amount: int) -> PaymentRequest:
        self._check_amount(amount)
        s = self.state
        if s.balance + amount > s.limits.max_balance:
            raise BalanceCapExceeded(f"receiving {amount} would exceed the balance cap")
        self._check_capacity()
        tx_id = cc.random_bytes(self.rng, TX_ID_SIZE)
        entry = LogEntry(tx_id, amount, Direction.INCOMING, TxStatus.PENDING)
        self._commit(log=s.completed_entries + (entry,), current_tx_id=tx_id, current_tx_confirmed=False)
        return PaymentRequest(amount, tx_id)

    def _spend_checks(self, amount: int) -> None:
        s = self.state
        if amount > s.balance:
            raise InsufficientBalance(f"balance {s.balance} < {amount}")
        if amount > s.limits.per_tx_max:
            raise PerTxLimitExceeded(f"{amount} exceeds per-transaction limit {s.limits.per_tx_max}")
        if s.cumulative_spent + amount > s.limits.cumulative_max:
            raise CumulativeLimitExceeded(
                f"{s.cumulative_spent} + {amount} exceeds cumulative limit {s.limits.cumulative_max}")

    @_operation(Operation.ACCEPT, needs_user=True)
    def check_and_accept(self, ctx: SessionContext, amount: int, tx_id: bytes) -> PaymentRequest:
        self._check_amount(amount)
        self._spend_checks(amount)
        s = self.state
        if any(e.tx_id == tx_id for e in s.completed_entries):
            raise StaleTxId("transaction id already settled")
        self._check_capacity()
        entry = LogEntry(tx_id, amount, Direction.OUTGOING, TxStatus.PENDING)
        self._commit(log=s.completed_entries + (entry,), current_tx_id=None, current_tx_confirmed=False)
        return PaymentRequest(amount, tx_id)

    @_operation(Operation.ACCEPT, needs_user=True)
    def confirm_accept(self, ctx: SessionContext, amount: int, tx_id: bytes) -> None:
        s = self.state
        p = s.pending
        if (s.current_tx_id != tx_id or p is None or p.direction is not Direction.INCOMING
                or p.amount != amount):
            raise NoMatchingPending("accept does not match the outstanding request")
        if s.balance + amount > s.limits.max_balance:
            raise BalanceCapExceeded(f"receiving {amount} would exceed the balance cap")
        self._commit(current_tx_confirmed=True)

    @_internal(Role.USER_TERMINAL, needs_user=True)
    def open_peer_session(self, ctx: SessionContext, channel: str, purpose: Purpose,
                          amount: int | None = None, tx_id: bytes | None = None) -> bytes:
        """Start a device-to-device handshake whose completion triggers the value exchange."""
        if self.state.blocked:
            raise DeviceBlocked("device is blocked")
        s = self.state
        p = s.pending
        if purpose is Purpose.PAY:
            if p is None or p.direction is not Direction.INCOMING or not s.current_tx_confirmed:
                raise NoMatchingPending("no accepted incoming payment")
            amount, tx_id = p.amount, p.tx_id
        else:
            self._check_retransmit_receiver(amount, tx_id)
        state, hello = initiate(s.certificate, s.static_keys, self.variant, ca_public=self.ca_public,
                                rng=self.rng, now=self.clock(), accept_roles=frozenset({Role.SECURE_DEVICE}))
        self._sessions.pop(channel, None)
        self._handshakes[channel] = state
        self._peer_purpose[channel] = (purpose, amount, tx_id)
        self.last_peer_status = SW_OK
        return hello

    def _check_retransmit_receiver(self, amount: int | None, tx_id: bytes | None) -> None:
        log = self.state.log
        last = log[-1] if log else None
        if (last is not None and last.tx_id == tx_id and last.amount == amount
                and last.direction is Direction.INCOMING and last.pending
                and self.state.current_tx_id == tx_id):
            return
        if any(e.tx_id == tx_id for e in log[:-1]):
            raise NotMostRecent("transaction is not the most recent log entry")
        raise NoMatchingPending("most recent entry is not this pending payment")

    # -- value exchange -------------------------------------------------------

    @_operation(Operation.TRANSFER)
    def handle_transfer(self, ctx: SessionContext, amount: int, tx_id: bytes) -> ReceiveMessage:
        s = self.state
        p = s.pending
        if (p is None or p.direction is not Direction.OUTGOING or p.tx_id != tx_id
                or p.amount != amount):
            raise NoMatchingPending("transfer does not match the pending outgoing entry")
        self._spend_checks(amount)
        self._commit(
            balance=s.balance - amount,
            cumulative_spent=s.cumulative_spent + amount,
            log=s.log[:-1] + (p.completed(ctx.peer_pk),),
        )
        return ReceiveMessage(amount, tx_id)

    @_operation(Operation.RETRANSMIT)
    def handle_retransmit(self, ctx: SessionContext, amount: int, tx_id: bytes) -> ReceiveMessage:
        """Sender side: re-issue ``<Receive>`` for an already debited payment."""
        log = self.state.log
        last = log[-1] if log else None
        if (last is not None and last.tx_id == tx_id and last.amount == amount
                and last.direction is Direction.OUTGOING):
            if last.pending:
                raise NotCompleted("transfer was never executed; restart the payment")
            if last.counterparty_pk != ctx.peer_pk:
                raise NoMatchingPending("retransmit from a different counterparty")
            return ReceiveMessage(amount, tx_id)
        if any(e.tx_id == tx_id for e in log[:-1]):
            raise NotMostRecent("transaction is not the most recent log entry")
        raise NoMatchingPending("no such outgoing transaction")

    @_operation(Operation.RECEIVE)
    def handle_receive(self, ctx: SessionContext, amount: int, tx_id: bytes) -> int:
        s = self.state
        if s.current_tx_id != tx_id:
            raise StaleTxId("receive does not carry the current transaction id")
        p = s.pending
        if (p is None or p.direction is not Direction.INCOMING or p.tx_id != tx_id
                or p.amount != amount or not s.current_tx_confirmed):
            raise NoMatchingPending("receive does not match the pending incoming entry")
        if s.balance + amount > s.limits.max_balance:
            raise BalanceCapExceeded(f"receiving {amount} would exceed the balance cap")
        self._commit(
            balance=s.balance + amount,
            log=s.log[:-1] + (p.completed(ctx.peer_pk),),
            current_tx_id=None,
            current_tx_confirmed=False,
        )
        return self.state.balance

    # -- bank operations ------------------------------------------------------

    def _recall_bank_op(self, op_id: bytes | None) -> int | None:
        if op_id is None:
            return None
        for known, sw, balance in self.state.bank_ops:
            if known == op_id:
                raise_for_status(sw)
                return balance
        return None

    def _remember(self, op_id: bytes | None, sw: int, balance: int) -> tuple:
        if op_id is None:
            return self.state.bank_ops
        return (self.state.bank_ops + ((op_id, sw, balance),))[-BANK_OP_MEMORY:]

    def _bank_reject(self, op_id: bytes | None, exc: CbdcError) -> CbdcError:
        self._commit(bank_ops=self._remember(op_id, exc.status_word, self.state.balance))
        return exc

    @_operation(Operation.WITHDRAW, needs_user=True)
    def handle_withdraw(self, ctx: SessionContext, amount: int, op_id: bytes | None = None) -> int:
        recalled = self._recall_bank_op(op_id)
        if recalled is not None:
            return recalled
        s = self.state
        try:
            self._check_amount(amount)
            if s.balance + amount > s.limits.max_balance:
                raise BalanceCapExceeded(f"withdrawing {amount} would exceed the balance cap")
            if ctx.anonymous_self:
                self._check_capacity()
        except CbdcError as exc:
            raise self._bank_reject(op_id, exc) from None
        log = s.log
        if ctx.anonymous_self:
            # cash-in is logged so the next synchronization still replays; kept
            # ahead of any pending entry, which must stay the most recent one
            entry = LogEntry(cc.random_bytes(self.rng, TX_ID_SIZE), amount, Direction.INCOMING,
                             TxStatus.COMPLETED, ctx.peer_pk)
            log = s.completed_entries + (entry,) + ((s.pending,) if s.pending else ())
        new_balance = s.balance + amount
        self._commit(balance=new_balance, log=log, bank_ops=self._remember(op_id, SW_OK, new_balance))
        return new_balance

    @_operation(Operation.DEPOSIT, needs_user=True)
    def handle_deposit(self, ctx: SessionContext, amount: int, op_id: bytes | None = None) -> int:
        recalled = self._recall_bank_op(op_id)
        if recalled is not None:
            return recalled
        s = self.state
        try:
            self._check_amount(amount)
            if amount > s.balance:
                raise InsufficientBalance(f"balance {s.balance} < {amount}")
        except CbdcError as exc:
            raise self._bank_reject(op_id, exc) from None
        new_balance = s.balance - amount
        self._commit(balance=new_balance, bank_ops=self._remember(op_id, SW_OK, new_balance))
        return new_balance

    @_operation(Operation.SYNCHRONIZE)
    def handle_synchronize(self, ctx: SessionContext, phase: SyncPhase = SyncPhase.QUERY, *,
                           epoch: int | None = None, limits: Limits | None = None,
                           mode: ComplianceMode | None = None) -> SyncPayload | None:
        s = self.state
        if phase is SyncPhase.QUERY:
            completed = s.completed_entries
            if s.mode is ComplianceMode.BALANCE_TRACKING:
                return SyncPayload(s.mode, s.sync_epoch, s.balance,
                                   amounts=tuple(e.signed_amount for e in completed))
            if s.mode is ComplianceMode.TRANSACTION_TRACKING:
                return SyncPayload(s.mode, s.sync_epoch, s.balance, entries=s.log)
            return SyncPayload(s.mode, s.sync_epoch, s.balance)
        if phase is SyncPhase.BLOCK:
            self._commit(blocked=True)
            return None
        if epoch is None:
            raise DecodeError("confirmation without epoch")
        if epoch == s.sync_epoch - 1:
            return None
        if epoch != s.sync_epoch:
            raise StaleSyncEpoch(f"confirmation for epoch {epoch}, device at {s.sync_epoch}")
        new_limits = limits or s.limits
        if s.balance > new_limits.max_balance:
            raise BalanceCapExceeded("new balance cap below current balance")
        # completed entries are cleared; a pending entry survives so an
        # interrupted payment can still be retransmitted after the visit
        self._commit(
            log=(s.pending,) if s.pending else (),
            cumulative_spent=0,
            limits=new_limits,
            mode=mode if mode is not None else s.mode,
            sync_epoch=s.sync_epoch + 1,
        )
        return None
