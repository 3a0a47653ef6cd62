import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from offline_cbdc import crypto_core as cc
from offline_cbdc.errors import AuthFailure, BadSignature, DecodeError, DuplicateEnrollment, Expired, ExpiryInPast
from offline_cbdc.pki import (
    CertificateAuthority,
    Operation,
    ParticipationCertificate,
    Registry,
    Role,
    issue_certificate,
    permission_matrix,
    permitted,
    verify_certificate,
)

NOW = 1_700_000_000

FI, USER, DEV = Role.FI_TERMINAL, Role.USER_TERMINAL, Role.SECURE_DEVICE
# rows in operation order, columns (FI terminal, user terminal, secure device)
PERMISSION_TABLE = {
    Operation.WITHDRAW: (True, False, False),
    Operation.REQUEST: (False, True, False),
    Operation.ACCEPT: (False, True, False),
    Operation.TRANSFER: (False, False, True),
    Operation.RECEIVE: (False, False, True),
    Operation.RETRANSMIT: (False, False, True),
    Operation.SYNCHRONIZE: (True, False, False),
    Operation.DEPOSIT: (True, False, False),
}


@pytest.fixture(scope="module")
def ca():
    return CertificateAuthority.generate(random.Random(1))


@pytest.fixture(scope="module")
def subject():
    return cc.generate_keypair(random.Random(2))


class TestPermissions:
    def test_matrix_equals_table(self):
        expected = {}
        for op, row in PERMISSION_TABLE.items():
            for role, allowed in zip((FI, USER, DEV), row):
                expected[(role, op)] = allowed
        assert permission_matrix() == expected
        assert len(expected) == 24

    def test_opcodes_in_table_order(self):
        assert [int(op) for op in PERMISSION_TABLE] == list(range(1, 9))

    @pytest.mark.parametrize("role, op, allowed", [
        (FI, Operation.WITHDRAW, True),
        (USER, Operation.WITHDRAW, False),
        (DEV, Operation.TRANSFER, True),
        (USER, Operation.TRANSFER, False),
    ])
    def test_examples(self, role, op, allowed):
        assert permitted(role, op) is allowed

    def test_each_operation_has_exactly_one_role(self):
        for op in Operation:
            assert sum(permitted(r, op) for r in Role) == 1

    def test_anonymous_peer_has_no_permissions(self):
        assert not any(permitted(None, op) for op in Operation)


class TestCertificates:
    def test_issue_then_verify(self, ca, subject):
        cert = ca.issue(subject.public, FI, NOW + 100, now=NOW)
        assert verify_certificate(ca.public_key, cert, NOW) is FI

    def test_expiry_in_past(self, ca, subject):
        with pytest.raises(ExpiryInPast):
            issue_certificate(ca.keys, subject.public, DEV, NOW - 1, 1, now=NOW)
        with pytest.raises(ExpiryInPast):
            issue_certificate(ca.keys, subject.public, DEV, NOW, 1, now=NOW)

    def test_flipped_payload_bit(self, ca, subject):
        cert = ca.issue(subject.public, USER, NOW + 100, now=NOW)
        raw = bytearray(cert.encode())
        serial_offset = raw.index(bytes([0x03, 0x00, 0x08])) + 3 + 7
        raw[serial_offset] ^= 0x01
        with pytest.raises(BadSignature):
            verify_certificate(ca.public_key, ParticipationCertificate.decode(bytes(raw)), NOW)

    def test_expired(self, ca, subject):
        cert = ca.issue(subject.public, DEV, NOW + 100, now=NOW)
        assert verify_certificate(ca.public_key, cert, NOW + 99) is DEV
        with pytest.raises(Expired):
            verify_certificate(ca.public_key, cert, NOW + 100)

    def test_other_ca(self, ca, subject):
        rogue = CertificateAuthority.generate(random.Random(99))
        cert = rogue.issue(subject.public, FI, NOW + 100, now=NOW)
        with pytest.raises(BadSignature):
            verify_certificate(ca.public_key, cert, NOW)

    def test_role_swap_breaks_signature(self, ca, subject):
        cert = ca.issue(subject.public, USER, NOW + 100, now=NOW)
        forged = ParticipationCertificate(cert.subject_public_key, FI, cert.serial, cert.expiry, cert.ca_signature)
        with pytest.raises(BadSignature):
            verify_certificate(ca.public_key, forged, NOW)

    def test_serials_increase(self, ca, subject):
        a = ca.issue(subject.public, DEV, NOW + 10, now=NOW)
        b = ca.issue(subject.public, DEV, NOW + 10, now=NOW)
        assert b.serial == a.serial + 1

    def test_tlv_layout(self, ca, subject):
        cert = ca.issue(subject.public, DEV, NOW + 10, now=NOW)
        raw = cert.encode()
        assert raw[:3] == bytes([0x01, 0x00, 65])
        assert raw[3:68] == subject.public
        assert raw[68:72] == bytes([0x02, 0x00, 0x01, DEV])
        assert raw[-67:-64] == bytes([0x05, 0x00, 64])
        assert ParticipationCertificate.decode(raw) == cert

    @given(st.integers(0, 255).filter(lambda r: r not in (1, 2, 3)))
    def test_unknown_role_never_decodes(self, role_byte):
        pk = cc.KeyPair.from_secret((5).to_bytes(32, "big")).public
        cert = ParticipationCertificate(pk, DEV, 1, NOW + 1, bytes(64))
        raw = bytearray(cert.encode())
        raw[71] = role_byte
        with pytest.raises(DecodeError):
            ParticipationCertificate.decode(bytes(raw))

    def test_truncated_certificate(self, ca, subject):
        raw = ca.issue(subject.public, DEV, NOW + 10, now=NOW).encode()
        with pytest.raises(DecodeError):
            ParticipationCertificate.decode(raw[:-1])


class TestRegistry:
    KEY = bytes(range(64))

    def test_same_key_two_serials(self, ca, subject):
        a = issue_certificate(ca.keys, subject.public, DEV, NOW + 10, 100, now=NOW)
        b = issue_certificate(ca.keys, subject.public, DEV, NOW + 10, 101, now=NOW)
        assert verify_certificate(ca.public_key, a, NOW) is DEV
        assert verify_certificate(ca.public_key, b, NOW) is DEV
        reg = Registry(self.KEY)
        reg.enroll("id-1", a.subject_public_key)
        with pytest.raises(DuplicateEnrollment):
            reg.enroll("id-2", b.subject_public_key)
        assert len(reg) == 1

    def test_disclosure_needs_key(self, subject):
        reg = Registry(self.KEY)
        reg.enroll("passport-42", subject.public)
        assert subject.public in reg
        entry = reg.disclose(subject.public, self.KEY)
        assert (entry.government_id, entry.public_key) == ("passport-42", subject.public)
        with pytest.raises(AuthFailure):
            reg.disclose(subject.public, bytes(64))

    def test_key_length(self):
        with pytest.raises(ValueError):
            Registry(bytes(32))
