import pytest

from offline_cbdc.harness.world import KeyRing
from offline_cbdc.pki import Role


@pytest.fixture(scope="session")
def keyring() -> KeyRing:
    return KeyRing(0)


@pytest.fixture(scope="session")
def peer_pk(keyring) -> bytes:
    keys, _ = keyring.identity("peer.se", Role.SECURE_DEVICE)
    return keys.public


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
