import random

import pytest
from helpers import fake_ctx, limits_disagreements, limits_samples, make_device
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import deposit_verdict, receive_verdict, spend_verdict, withdraw_verdict

from offline_cbdc import encoding as tlv
from offline_cbdc.errors import (
    BalanceCapExceeded,
    CbdcError,
    CumulativeLimitExceeded,
    DeviceBlocked,
    InsufficientBalance,
    LogFull,
    NoMatchingPending,
    NotAuthenticated,
    NotCompleted,
    NotMostRecent,
    PerTxLimitExceeded,
    PermissionDenied,
    StaleSyncEpoch,
    StaleTxId,
)
from offline_cbdc.pki import Role
from offline_cbdc.secure_device import (
    ComplianceMode,
    Direction,
    Limits,
    LogEntry,
    T_ENTRY,
    SyncPayload,
    SyncPhase,
    TxStatus,
)

USER = fake_ctx(Role.USER_TERMINAL)
FI = fake_ctx(Role.FI_TERMINAL)
T1, T2 = b"\x11" * 16, b"\x22" * 16


@pytest.fixture()
def dev_ctx(peer_pk):
    return fake_ctx(Role.SECURE_DEVICE, peer_pk)


def sender(keyring, balance=1_000, **kw):
    return make_device(keyring, "sender.se", balance=balance, **kw)


def receiver(keyring, balance=0, **kw):
    return make_device(keyring, "receiver.se", balance=balance, **kw)


def pay(src, dst, amount, dev_ctx):
    """Drive one payment directly through the handlers."""
    req = dst.create_request(USER, amount)
    src.check_and_accept(USER, amount, req.tx_id)
    dst.confirm_accept(USER, amount, req.tx_id)
    msg = src.handle_transfer(dev_ctx, amount, req.tx_id)
    dst.handle_receive(dev_ctx, msg.amount, msg.tx_id)
    return req.tx_id


def pendings(dev):
    return sum(e.status is TxStatus.PENDING for e in dev.state.log)


class TestCreateRequest:
    def test_pending_incoming_entry(self, keyring):
        d = receiver(keyring)
        req = d.create_request(USER, 500)
        assert len(req.tx_id) == 16 and d.state.current_tx_id == req.tx_id
        p = d.state.pending
        assert (p.amount, p.direction, p.status) == (500, Direction.INCOMING, TxStatus.PENDING)

    def test_second_request_overwrites(self, keyring):
        d = receiver(keyring)
        first = d.create_request(USER, 500)
        second = d.create_request(USER, 200)
        assert pendings(d) == 1 and len(d.state.log) == 1
        assert d.state.pending.tx_id == second.tx_id != first.tx_id

    def test_device_role_denied(self, keyring, dev_ctx):
        with pytest.raises(PermissionDenied):
            receiver(keyring).create_request(dev_ctx, 500)

    def test_requires_pin(self, keyring):
        with pytest.raises(NotAuthenticated):
            receiver(keyring).create_request(fake_ctx(Role.USER_TERMINAL, user=False), 5)

    def test_blocked(self, keyring):
        d = receiver(keyring)
        d.handle_synchronize(FI, SyncPhase.BLOCK)
        with pytest.raises(DeviceBlocked):
            d.create_request(USER, 5)

    def test_cap_checked_up_front(self, keyring):
        d = receiver(keyring, balance=800, limits=Limits(1_000, 1_000, 1_000))
        with pytest.raises(BalanceCapExceeded):
            d.create_request(USER, 201)


class TestCheckAndAccept:
    def test_accept(self, keyring):
        d = sender(keyring)
        d.check_and_accept(USER, 500, T1)
        assert d.state.pending == LogEntry(T1, 500, Direction.OUTGOING, TxStatus.PENDING)

    @pytest.mark.parametrize("amount, spent, err", [
        (1_001, 0, InsufficientBalance),
        (801, 0, PerTxLimitExceeded),
        (400, 700, CumulativeLimitExceeded),
    ])
    def test_rejections(self, keyring, amount, spent, err):
        d = sender(keyring, balance=1_000, limits=Limits(2_000, 800, 1_000))
        d._commit(cumulative_spent=spent)
        before = d.state
        with pytest.raises(err):
            d.check_and_accept(USER, amount, T1)
        assert d.state == before

    def test_settled_tx_id_refused(self, keyring, dev_ctx):
        src, dst = sender(keyring), receiver(keyring)
        tx = pay(src, dst, 10, dev_ctx)
        with pytest.raises(StaleTxId):
            src.check_and_accept(USER, 10, tx)


class TestTransferReceive:
    def test_happy_path(self, keyring, dev_ctx, peer_pk):
        src, dst = sender(keyring), receiver(keyring)
        tx = pay(src, dst, 500, dev_ctx)
        assert (src.balance, dst.balance) == (500, 500)
        assert src.state.cumulative_spent == 500
        out, inc = src.state.log[-1], dst.state.log[-1]
        assert out.status is inc.status is TxStatus.COMPLETED
        assert out.tx_id == inc.tx_id == tx and out.counterparty_pk == peer_pk
        assert dst.state.current_tx_id is None

    def test_transfer_wrong_tx_id(self, keyring, dev_ctx):
        src = sender(keyring)
        src.check_and_accept(USER, 500, T1)
        before = src.state
        with pytest.raises(NoMatchingPending):
            src.handle_transfer(dev_ctx, 500, T2)
        assert src.state == before

    def test_transfer_wrong_amount(self, keyring, dev_ctx):
        src = sender(keyring)
        src.check_and_accept(USER, 500, T1)
        with pytest.raises(NoMatchingPending):
            src.handle_transfer(dev_ctx, 499, T1)

    @pytest.mark.parametrize("role", [Role.USER_TERMINAL, Role.FI_TERMINAL])
    def test_transfer_from_terminal_denied(self, keyring, role):
        src = sender(keyring)
        src.check_and_accept(USER, 500, T1)
        with pytest.raises(PermissionDenied):
            src.handle_transfer(fake_ctx(role), 500, T1)

    def test_receive_replay(self, keyring, dev_ctx):
        src, dst = sender(keyring), receiver(keyring)
        tx = pay(src, dst, 500, dev_ctx)
        with pytest.raises(StaleTxId):
            dst.handle_receive(dev_ctx, 500, tx)
        assert dst.balance == 500

    def test_receive_needs_confirmed_accept(self, keyring, dev_ctx):
        dst = receiver(keyring)
        req = dst.create_request(USER, 50)
        with pytest.raises(NoMatchingPending):
            dst.handle_receive(dev_ctx, 50, req.tx_id)

    def test_receive_cap_defence_in_depth(self, keyring, dev_ctx):
        dst = receiver(keyring, balance=300, limits=Limits(1_000, 1_000, 1_000))
        req = dst.create_request(USER, 500)
        dst.confirm_accept(USER, 500, req.tx_id)
        dst._commit(balance=800)
        with pytest.raises(BalanceCapExceeded):
            dst.handle_receive(dev_ctx, 500, req.tx_id)
        assert dst.balance == 800

    def test_receive_from_terminal_denied(self, keyring):
        with pytest.raises(PermissionDenied):
            receiver(keyring).handle_receive(USER, 1, T1)

    @settings(max_examples=300)
    @given(st.integers(0, 1_200), st.integers(0, 1_200), st.integers(-5, 1_300))
    def test_receive_cap_oracle(self, keyring, balance, cap, amount):
        if balance > cap:
            return
        dst = receiver(keyring, balance=balance, limits=Limits(cap, cap, cap))
        try:
            dst.create_request(USER, amount)
            got = "ok"
        except CbdcError as exc:
            got = type(exc).__name__
        assert got == receive_verdict(balance, cap, amount)


class TestRetransmit:
    def test_sender_answers_from_completed_entry(self, keyring, dev_ctx):
        src, dst = sender(keyring), receiver(keyring)
        req = dst.create_request(USER, 300)
        src.check_and_accept(USER, 300, req.tx_id)
        dst.confirm_accept(USER, 300, req.tx_id)
        src.handle_transfer(dev_ctx, 300, req.tx_id)  # Receive lost
        for _ in range(2):
            msg = src.handle_retransmit(dev_ctx, 300, req.tx_id)
            assert src.balance == 700
        dst.handle_receive(dev_ctx, msg.amount, msg.tx_id)
        assert (src.balance, dst.balance) == (700, 300)
        with pytest.raises(StaleTxId):
            dst.handle_receive(dev_ctx, msg.amount, msg.tx_id)

    def test_receiver_guard_when_completed(self, keyring, dev_ctx):
        src, dst = sender(keyring), receiver(keyring)
        tx = pay(src, dst, 10, dev_ctx)
        with pytest.raises(NoMatchingPending):
            dst._check_retransmit_receiver(10, tx)

    def test_receiver_guard_not_most_recent(self, keyring, dev_ctx):
        src, dst = sender(keyring), receiver(keyring)
        tx = pay(src, dst, 10, dev_ctx)
        pay(src, dst, 20, dev_ctx)
        with pytest.raises(NotMostRecent):
            dst._check_retransmit_receiver(10, tx)

    def test_sender_not_yet_debited(self, keyring, dev_ctx):
        src = sender(keyring)
        src.check_and_accept(USER, 10, T1)
        with pytest.raises(NotCompleted):
            src.handle_retransmit(dev_ctx, 10, T1)

    def test_sender_unknown_and_older(self, keyring, dev_ctx):
        src, dst = sender(keyring), receiver(keyring)
        old = pay(src, dst, 10, dev_ctx)
        pay(src, dst, 20, dev_ctx)
        with pytest.raises(NotMostRecent):
            src.handle_retransmit(dev_ctx, 10, old)
        with pytest.raises(NoMatchingPending):
            src.handle_retransmit(dev_ctx, 10, T2)

    def test_retransmit_from_other_device(self, keyring, dev_ctx):
        src, dst = sender(keyring), receiver(keyring)
        tx = pay(src, dst, 10, dev_ctx)
        stranger = fake_ctx(Role.SECURE_DEVICE, b"\x04" + b"\x01" * 64)
        with pytest.raises(NoMatchingPending):
            src.handle_retransmit(stranger, 10, tx)


class TestBankOperations:
    def test_withdraw_boundaries(self, keyring):
        d = receiver(keyring, balance=300, limits=Limits(1_000, 1_000, 1_000))
        with pytest.raises(BalanceCapExceeded):
            d.handle_withdraw(FI, 701)
        assert d.balance == 300
        assert d.handle_withdraw(FI, 700) == 1_000

    def test_withdraw_from_wallet_denied(self, keyring):
        with pytest.raises(PermissionDenied):
            receiver(keyring).handle_withdraw(USER, 10)

    def test_deposit(self, keyring):
        d = sender(keyring, balance=500)
        with pytest.raises(InsufficientBalance):
            d.handle_deposit(FI, 501)
        assert d.handle_deposit(FI, 500) == 0

    def test_deposit_while_blocked(self, keyring):
        d = sender(keyring, balance=500)
        d.handle_synchronize(FI, SyncPhase.BLOCK)
        with pytest.raises(DeviceBlocked):
            d.handle_deposit(FI, 100)

    def test_op_id_idempotent(self, keyring):
        d = receiver(keyring)
        assert d.handle_withdraw(FI, 100, b"o" * 16) == 100
        assert d.handle_withdraw(FI, 100, b"o" * 16) == 100
        assert d.balance == 100

    @settings(max_examples=300)
    @given(st.integers(0, 1_000), st.integers(-3, 1_200))
    def test_withdraw_and_deposit_oracle(self, keyring, balance, amount):
        d = receiver(keyring, balance=balance, limits=Limits(1_000, 1_000, 1_000))
        for handler, verdict in ((d.handle_withdraw, withdraw_verdict(balance, 1_000, amount)),
                                 (d.handle_deposit, deposit_verdict(balance, amount))):
            d._commit(balance=balance)
            try:
                handler(FI, amount)
                got = "ok"
            except CbdcError as exc:
                got = type(exc).__name__
            assert got == verdict


class TestSynchronize:
    def history(self, keyring, dev_ctx, mode):
        d = make_device(keyring, "hist.se", balance=100, mode=mode)
        other = make_device(keyring, "other.se", balance=1_000)
        pay(other, d, 500, dev_ctx)
        pay(d, other, 200, dev_ctx)
        return d

    def test_balance_tracking_amounts(self, keyring, dev_ctx):
        d = self.history(keyring, dev_ctx, ComplianceMode.BALANCE_TRACKING)
        payload = d.handle_synchronize(FI)
        assert (payload.balance, payload.amounts, payload.entries) == (400, (500, -200), None)
        assert payload.n == 2

    def test_transaction_tracking_metadata(self, keyring, dev_ctx, peer_pk):
        d = self.history(keyring, dev_ctx, ComplianceMode.TRANSACTION_TRACKING)
        payload = d.handle_synchronize(FI)
        assert [(e.amount, e.direction, e.status, e.counterparty_pk) for e in payload.entries] == [
            (500, Direction.INCOMING, TxStatus.COMPLETED, peer_pk),
            (200, Direction.OUTGOING, TxStatus.COMPLETED, peer_pk),
        ]
        assert all(len(e.tx_id) == 16 for e in payload.entries)
        wire = tlv.decode_map(tlv.encode(payload.fields()), repeated=(T_ENTRY,))
        assert SyncPayload.from_fields(wire) == payload

    def test_compliance_free_balance_only(self, keyring, dev_ctx):
        d = self.history(keyring, dev_ctx, ComplianceMode.COMPLIANCE_FREE)
        payload = d.handle_synchronize(FI)
        assert (payload.balance, payload.amounts, payload.entries, payload.n) == (400, None, None, 0)

    def test_confirm_resets(self, keyring, dev_ctx):
        d = self.history(keyring, dev_ctx, ComplianceMode.BALANCE_TRACKING)
        new = Limits(5_000, 900, 3_000)
        d.handle_synchronize(FI, SyncPhase.CONFIRM, epoch=0, limits=new)
        s = d.state
        assert (s.log, s.cumulative_spent, s.limits, s.sync_epoch) == ((), 0, new, 1)

    def test_confirm_keeps_pending_entry(self, keyring):
        d = receiver(keyring)
        req = d.create_request(USER, 50)
        d.handle_synchronize(FI, SyncPhase.CONFIRM, epoch=0)
        assert d.state.pending.tx_id == req.tx_id

    def test_stale_epoch(self, keyring):
        d = receiver(keyring)
        d.handle_synchronize(FI, SyncPhase.CONFIRM, epoch=0)
        assert d.handle_synchronize(FI, SyncPhase.CONFIRM, epoch=0) is None  # duplicate tolerated
        with pytest.raises(StaleSyncEpoch):
            d.handle_synchronize(FI, SyncPhase.CONFIRM, epoch=5)

    def test_wallet_cannot_sync(self, keyring):
        with pytest.raises(PermissionDenied):
            receiver(keyring).handle_synchronize(USER)

    def test_sync_allowed_while_blocked(self, keyring):
        d = receiver(keyring)
        d.handle_synchronize(FI, SyncPhase.BLOCK)
        assert d.handle_synchronize(FI).balance == 0


class TestInvariants:
    def test_log_full_forces_sync(self, keyring, dev_ctx):
        src = sender(keyring, balance=1_000, log_capacity=3)
        dst = receiver(keyring, limits=Limits(10_000, 1_000, 10_000))
        for _ in range(3):
            pay(src, dst, 1, dev_ctx)
        with pytest.raises(LogFull):
            src.check_and_accept(USER, 1, T1)
        src.handle_synchronize(FI, SyncPhase.CONFIRM, epoch=0)
        src.check_and_accept(USER, 1, T1)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(["pay", "request", "accept", "sync"]), st.integers(1, 400)),
                    max_size=25))
    def test_random_operation_sequences(self, keyring, ops):
        peer = fake_ctx(Role.SECURE_DEVICE, b"\x04" + b"\x07" * 64)
        a = make_device(keyring, "a.se", balance=1_000, limits=Limits(1_500, 300, 900))
        b = make_device(keyring, "b.se", balance=500, limits=Limits(1_500, 300, 900))
        rng = random.Random(len(ops))
        epochs = {a.name: 0, b.name: 0}
        for kind, amount in ops:
            src, dst = (a, b) if rng.random() < 0.5 else (b, a)
            try:
                if kind == "pay":
                    pay(src, dst, amount, peer)
                elif kind == "request":
                    dst.create_request(USER, amount)
                elif kind == "accept":
                    src.check_and_accept(USER, amount, rng.randbytes(16))
                else:
                    src.handle_synchronize(FI, SyncPhase.CONFIRM, epoch=epochs[src.name])
                    epochs[src.name] += 1
            except CbdcError:
                pass
            for d in (a, b):
                s = d.state
                assert 0 <= s.balance <= s.limits.max_balance
                assert s.cumulative_spent <= s.limits.cumulative_max
                assert pendings(d) <= 1
                assert all(not e.pending for e in s.log[:-1])
                assert all(e.amount <= s.limits.per_tx_max for e in s.log
                           if e.direction is Direction.OUTGOING and not e.pending)
            assert a.balance + b.balance == 1_500


class TestLimitsOracle:
    def test_grid_agrees(self, keyring):
        assert limits_disagreements(keyring, limits_samples(5_000, seed=1)) == 0

    @given(st.integers(0, 100), st.integers(0, 100), st.integers(0, 100), st.integers(0, 100),
           st.integers(-1, 110))
    def test_spend_checks_property(self, keyring, balance, per_tx, cumulative, spent, amount):
        src = sender(keyring, balance=balance, limits=Limits(200, per_tx, cumulative))
        spent = min(spent, cumulative)
        src._commit(cumulative_spent=spent)
        try:
            src.check_and_accept(USER, amount, T1)
            got = "ok"
        except CbdcError as exc:
            got = type(exc).__name__
        assert got == spend_verdict(balance, per_tx, cumulative, spent, amount)
