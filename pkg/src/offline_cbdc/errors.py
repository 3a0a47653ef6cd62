"""Exception hierarchy shared by every layer.

Errors that can cross the secure-device boundary carry a two-byte status
word so they survive being encoded into a response frame and decoded again
on the terminal side.
"""

from __future__ import annotations

SW_OK = 0x9000

_BY_STATUS: dict[int, type["CbdcError"]] = {}


class CbdcError(Exception):
    """Base class for all protocol errors."""

    status_word: int = 0x6F00

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        sw = cls.__dict__.get("status_word")
        if sw is not None:
            if sw in _BY_STATUS:
                raise TypeError(f"status word {sw:#06x} already bound to {_BY_STATUS[sw].__name__}")
            _BY_STATUS[sw] = cls


def error_for_status(sw: int) -> type[CbdcError]:
    """Return the exception class bound to ``sw`` (``CbdcError`` if unknown)."""
    if 0x63C0 <= sw <= 0x63CF:
        return WrongPin
    return _BY_STATUS.get(sw, CbdcError)


def status_name(sw: int) -> str:
    if sw == SW_OK:
        return "OK"
    return error_for_status(sw).__name__


# -- framing -----------------------------------------------------------------

class DecodeError(CbdcError):
    status_word = 0x6A80


class UnknownCommand(CbdcError):
    status_word = 0x6D00


# -- crypto_core -------------------------------------------------------------

class InvalidPoint(CbdcError):
    status_word = 0x6F01


class EmptySecret(CbdcError):
    status_word = 0x6F02


class AuthFailure(CbdcError):
    status_word = 0x6F21


class CounterMismatch(CbdcError):
    status_word = 0x6F22


# -- pki ---------------------------------------------------------------------

class ExpiryInPast(CbdcError):
    status_word = 0x6F03


class BadSignature(CbdcError):
    status_word = 0x6F04


class Expired(CbdcError):
    status_word = 0x6F05


class DuplicateEnrollment(CbdcError):
    status_word = 0x6F06


# -- secure_channel ----------------------------------------------------------

class CertificateRejected(CbdcError):
    status_word = 0x6F30


class BadReceipt(CbdcError):
    status_word = 0x6F31


class HandshakeAborted(CbdcError):
    status_word = 0x6F32


class OutOfOrderMessage(CbdcError):
    status_word = 0x6F33


class SessionRequired(CbdcError):
    status_word = 0x6F34


# -- secure_device -----------------------------------------------------------

class WrongPin(CbdcError):
    status_word = 0x63C0

    def __init__(self, retries_left: int = 0):
        super().__init__(f"wrong PIN, {retries_left} tries left")
        self.retries_left = retries_left
        self.status_word = 0x63C0 | (retries_left & 0x0F)


class NotAuthenticated(CbdcError):
    status_word = 0x6982


class PinBlocked(CbdcError):
    status_word = 0x6983


class PermissionDenied(CbdcError):
    status_word = 0x6985


class DeviceBlocked(CbdcError):
    status_word = 0x6A81


class LogFull(CbdcError):
    status_word = 0x6A84


class InsufficientBalance(CbdcError):
    status_word = 0x6F10


class PerTxLimitExceeded(CbdcError):
    status_word = 0x6F11


class CumulativeLimitExceeded(CbdcError):
    status_word = 0x6F12


class BalanceCapExceeded(CbdcError):
    status_word = 0x6F13


class NoMatchingPending(CbdcError):
    status_word = 0x6F14


class StaleTxId(CbdcError):
    status_word = 0x6F15


class NotMostRecent(CbdcError):
    status_word = 0x6F16


class NotCompleted(CbdcError):
    status_word = 0x6F17


class InvalidAmount(CbdcError):
    status_word = 0x6F18


class StaleSyncEpoch(CbdcError):
    status_word = 0x6F19


# -- terminals ---------------------------------------------------------------

class TransportFailure(CbdcError):
    """A message was lost, timed out, or the channel broke underneath it."""

    status_word = 0x6F40


class RejectedByUser(CbdcError):
    status_word = 0x6F41


class InsufficientOnlineBalance(CbdcError):
    status_word = 0x6F42


class ConditionProofRejected(CbdcError):
    status_word = 0x6F43


class UnknownAccount(CbdcError):
    status_word = 0x6F44


class NotEnrolled(CbdcError):
    status_word = 0x6F45


class SyncRequired(CbdcError):
    status_word = 0x6F46
