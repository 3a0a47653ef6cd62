"""Line-oriented scenario scripts.

One command per line; ``#`` starts a comment.  Amounts are integer minor
units.  Commands::

    variant v1|v2                     handshake variant for the whole world
    mode free|balance|tx              compliance mode for devices created later
    timeout STEPS                     delay after which a message counts as lost
    limits MAX PER_TX CUMULATIVE      limits for devices created later
    user NAME [online N] [offline N] [pin P] [age N]
    enroll NAME ...                   same as user
    pos NAME [offline N]              merchant terminal with its own device
    mint USER N                       create N of online money in USER's account
    withdraw USER N                   bank visit: sync (tracking modes) + withdraw
    deposit USER N                    bank visit: sync (tracking modes) + deposit
    sync USER                         bank visit: synchronize only
    pay PAYER PAYEE N [if ATTR MIN]   offline payment, optionally conditional
    sale POS USER N                   POS purchase with the user's bare card
    recover                           retransmit/restart interrupted payments and
                                      settle in-doubt bank operations
    set-limits USER MAX PER_TX CUM    new limits delivered at USER's next sync
    block USER                        FI blocks USER's card
    fault drop PROTO INDEX
    fault delay PROTO INDEX STEPS
    fault tamper PROTO INDEX OFFSET MASK
    fault replay PROTO INDEX CAPTURE
                                      act on message INDEX of the next run of PROTO
                                      (payment, retransmission, sync, withdraw,
                                      deposit, sale)
    assert-balance USER N             device balance
    assert-online USER N              online account balance
    assert-settled                    nothing in flight, nothing in doubt
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field

from ..errors import CbdcError
from ..secure_channel import Variant
from ..secure_device import ComplianceMode, Limits
from ..terminals import Condition, PaymentOutcome, Wallet, drive_retransmission, initiate_payment, run_pos_payment
from .audit import ConservationAudit
from .metrics import RunMetrics, collect_metrics
from .network import Capture, FaultAction, FaultKind
from .world import DEFAULT_LIMITS, KeyRing, User, World

VARIANTS = {"v1": Variant.V1_EPHEMERAL, "v2": Variant.V2_NONCE_STATIC}
MODES = {"free": ComplianceMode.COMPLIANCE_FREE, "balance": ComplianceMode.BALANCE_TRACKING,
         "tx": ComplianceMode.TRANSACTION_TRACKING}
SETTLE_ATTEMPTS = 3
PROTOCOLS = ("payment", "retransmission", "sync", "withdraw", "deposit", "sale")


class ScriptError(Exception):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Step:
    line: int
    op: str
    args: tuple[str, ...]


@dataclass
class Interrupted:
    """A payment that must be recovered before its parties transact again."""

    receiver: Wallet
    sender: Wallet
    outcome: PaymentOutcome
    parties: frozenset[str]
    condition: Condition | None = None
    colocated: bool = False


@dataclass
class Event:
    line: int
    command: str
    result: str


@dataclass
class ScenarioResult:
    world: World
    audit: ConservationAudit
    metrics: RunMetrics
    capture_log: list[Capture]
    events: list[Event] = field(default_factory=list)
    violations: list[tuple[int, str]] = field(default_factory=list)
    audits: list[tuple[int, ConservationAudit]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def parse(script: str) -> list[Step]:
    steps = []
    for no, raw in enumerate(script.splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            words = shlex.split(text)
        except ValueError as exc:
            raise ScriptError(no, str(exc)) from None
        steps.append(Step(no, words[0].lower(), tuple(words[1:])))
    return steps


def _int(step: Step, value: str) -> int:
    try:
        n = int(value, 0)
    except ValueError:
        raise ScriptError(step.line, f"expected an integer, got {value!r}") from None
    if n < 0:
        raise ScriptError(step.line, f"negative amount {n}")
    return n


def _arity(step: Step, n: int, at_most: int | None = None) -> None:
    hi = n if at_most is None else at_most
    if not n <= len(step.args) <= hi:
        raise ScriptError(step.line, f"{step.op} takes {n} argument(s), got {len(step.args)}")


def _options(step: Step, words: tuple[str, ...], known: set[str]) -> dict[str, str]:
    if len(words) % 2:
        raise ScriptError(step.line, "options come in KEY VALUE pairs")
    opts = dict(zip(words[::2], words[1::2]))
    unknown = set(opts) - known
    if unknown:
        raise ScriptError(step.line, f"unknown option(s): {', '.join(sorted(unknown))}")
    return opts


class ScenarioRunner:
    def __init__(self, seed: int = 0, *, variant: Variant | None = None, mode: ComplianceMode | None = None,
                 keyring: KeyRing | None = None):
        self.seed = seed
        self.forced_variant = variant
        self.forced_mode = mode
        self.keyring = keyring
        self.variant = variant or Variant.V1_EPHEMERAL
        self.mode = mode or ComplianceMode.BALANCE_TRACKING
        self.limits = DEFAULT_LIMITS
        self.timeout = 8
        self.world: World | None = None
        self.events: list[Event] = []
        self.outstanding: list[Interrupted] = []
        self.sync_n: list[int] = []

    def _world(self) -> World:
        if self.world is None:
            self.world = World(self.seed, variant=self.variant, mode=self.mode, limits=self.limits,
                               keyring=self.keyring, timeout=self.timeout)
        return self.world

    def _user(self, step: Step, name: str) -> User:
        try:
            return self._world().users[name]
        except KeyError:
            raise ScriptError(step.line, f"unknown user {name!r}") from None

    def _log(self, step: Step, result: str) -> None:
        self.events.append(Event(step.line, " ".join((step.op,) + step.args), result))

    def run(self, script: str) -> ScenarioResult:
        steps = parse(script)
        violations: list[tuple[int, str]] = []
        audits: list[tuple[int, ConservationAudit]] = []
        for step in steps:
            handler = getattr(self, "cmd_" + step.op.replace("-", "_"), None)
            if handler is None:
                raise ScriptError(step.line, f"unknown command {step.op!r}")
            handler(step)
            if self.world is not None:
                a = self.world.audit()
                audits.append((step.line, a))
                violations.extend((step.line, v) for v in a.violations)
        world = self._world()
        final = world.audit()
        metrics = collect_metrics(world)
        metrics.sync_n = list(self.sync_n)
        return ScenarioResult(world, final, metrics, world.net.capture_log, self.events, violations, audits)

    # -- configuration ------------------------------------------------------------

    def _configure(self, step: Step) -> None:
        if self.world is not None:
            raise ScriptError(step.line, f"{step.op} must come before any actor is created")

    def cmd_variant(self, step):
        _arity(step, 1)
        self._configure(step)
        if step.args[0] not in VARIANTS:
            raise ScriptError(step.line, f"unknown variant {step.args[0]!r}")
        if self.forced_variant is None:
            self.variant = VARIANTS[step.args[0]]

    def cmd_mode(self, step):
        _arity(step, 1)
        self._configure(step)
        if step.args[0] not in MODES:
            raise ScriptError(step.line, f"unknown mode {step.args[0]!r}")
        if self.forced_mode is None:
            self.mode = MODES[step.args[0]]

    def cmd_timeout(self, step):
        _arity(step, 1)
        self._configure(step)
        self.timeout = _int(step, step.args[0])

    def cmd_limits(self, step):
        _arity(step, 3)
        self.limits = Limits(*(_int(step, a) for a in step.args))
        if self.world is not None:
            self.world.limits = self.limits

    # -- actors -------------------------------------------------------------------

    def cmd_user(self, step):
        if not step.args:
            raise ScriptError(step.line, "user needs a name")
        name = step.args[0]
        opts = _options(step, step.args[1:], {"online", "offline", "pin", "age"})
        world = self._world()
        if name in world.users:
            raise ScriptError(step.line, f"user {name!r} already exists")
        credential = {"age": _int(step, opts["age"])} if "age" in opts else None
        world.add_user(name, online=_int(step, opts.get("online", "0")), offline=_int(step, opts.get("offline", "0")),
                       pin=opts.get("pin", "1234"), credential=credential)
        self._log(step, "enrolled")

    cmd_enroll = cmd_user

    def cmd_pos(self, step):
        if not step.args:
            raise ScriptError(step.line, "pos needs a name")
        opts = _options(step, step.args[1:], {"offline"})
        self._world().add_pos(step.args[0], offline=_int(step, opts.get("offline", "0")))
        self._log(step, "pos ready")

    def cmd_mint(self, step):
        _arity(step, 2)
        user = self._user(step, step.args[0])
        self._world().fi.mint(user.name, _int(step, step.args[1]))
        self._log(step, "minted")

    # -- bank -----------------------------------------------------------------------

    def _bank(self, step, protocol, fn, parties=()):
        if not self._settle_first(step, parties):
            return None
        world = self._world()
        world.net.begin(protocol)
        try:
            result = fn()
        except CbdcError as exc:
            self._log(step, f"failed: {type(exc).__name__}")
            return None
        self._log(step, f"ok: {result}")
        return result

    def cmd_withdraw(self, step):
        _arity(step, 2)
        u, amount = self._user(step, step.args[0]), _int(step, step.args[1])
        self._bank(step, "withdraw", lambda: self.world.fi.withdraw(u.name, u.device, amount, u.pin), {u.name})

    def cmd_deposit(self, step):
        _arity(step, 2)
        u, amount = self._user(step, step.args[0]), _int(step, step.args[1])
        self._bank(step, "deposit", lambda: self.world.fi.deposit(u.name, u.device, amount, u.pin), {u.name})

    def cmd_sync(self, step):
        _arity(step, 1)
        u = self._user(step, step.args[0])
        report = self._bank(step, "sync", lambda: self.world.fi.synchronize(u.device, u.pin), {u.name})
        if report is not None:
            self.sync_n.append(report.n)
            self.events[-1].result = f"{report.outcome.value} n={report.n} balance={report.reported_balance}"

    def cmd_set_limits(self, step):
        _arity(step, 4)
        u = self._user(step, step.args[0])
        self._world().fi.set_limits(u.device.public_key, Limits(*(_int(step, a) for a in step.args[1:])))
        self._log(step, "scheduled")

    def cmd_block(self, step):
        _arity(step, 1)
        u = self._user(step, step.args[0])
        self._bank(step, "block", lambda: self.world.fi.block(u.device, u.pin), {u.name})

    # -- payments -------------------------------------------------------------------

    def cmd_pay(self, step):
        if len(step.args) not in (3, 6):
            raise ScriptError(step.line, "pay PAYER PAYEE AMOUNT [if ATTR MIN]")
        payer, payee = self._user(step, step.args[0]), self._user(step, step.args[1])
        amount = _int(step, step.args[2])
        condition = None
        if len(step.args) == 6:
            if step.args[3] != "if":
                raise ScriptError(step.line, "expected 'if ATTR MIN'")
            condition = Condition(step.args[4], _int(step, step.args[5]))
        if not self._settle_first(step, {payer.name, payee.name}):
            return
        world = self._world()
        world.net.begin("payment")
        out = initiate_payment(world.net, payee.wallet, payer.wallet, amount, condition=condition)
        if out.status.value == "interrupted":
            self.outstanding.append(Interrupted(payee.wallet, payer.wallet, out, frozenset({payer.name, payee.name}),
                                                condition))
        self._log(step, f"{out.status.value} {out.reason}".strip())

    def cmd_sale(self, step):
        _arity(step, 3)
        world = self._world()
        try:
            pos = world.pos[step.args[0]]
        except KeyError:
            raise ScriptError(step.line, f"unknown pos {step.args[0]!r}") from None
        u = self._user(step, step.args[1])
        if not self._settle_first(step, {pos.name, u.name}):
            return
        reader = world.register_reader(pos, u.device, u.pin)
        world.net.begin("sale")
        out = run_pos_payment(world.net, pos, u.device, _int(step, step.args[2]), u.pin)
        if out.status.value == "interrupted":
            self.outstanding.append(Interrupted(pos.till, reader, out, frozenset({pos.name, u.name}), colocated=True))
        self._log(step, f"{out.status.value} {out.reason}".strip())

    # -- recovery -----------------------------------------------------------------------

    def _retransmit(self, step, which: list[Interrupted]) -> None:
        world = self._world()
        for item in which:
            world.net.begin("retransmission")
            new = drive_retransmission(world.net, item.receiver, item.sender, item.outcome,
                                       condition=item.condition, colocated=item.colocated)
            self._log(step, f"{new.path}: {new.status.value}")
            if new.status.value == "interrupted":
                item.outcome = new
            else:
                self.outstanding.remove(item)

    def _settle_first(self, step, parties) -> bool:
        """Honest wallets finish an interrupted payment before doing anything else."""
        for _ in range(SETTLE_ATTEMPTS):
            blocking = [i for i in self.outstanding if i.parties & set(parties)]
            if not blocking:
                return True
            self._retransmit(step, blocking)
        if any(i.parties & set(parties) for i in self.outstanding):
            self._log(step, "deferred: interrupted payment still unresolved")
            return False
        return True

    def cmd_recover(self, step):
        _arity(step, 0)
        world = self._world()
        self._retransmit(step, list(self.outstanding))
        pending_devices = {op.device_pk for op in world.fi.in_doubt.values()}
        for u in world.users.values():
            if u.device.public_key in pending_devices:
                self._bank(step, "recover", lambda: world.fi.connect(u.device, u.pin) and "resolved")
        world.net.flush_late(force=True)

    # -- assertions -------------------------------------------------------------------

    def cmd_fault(self, step):
        if len(step.args) < 3:
            raise ScriptError(step.line, "fault KIND PROTOCOL INDEX [ARGS]")
        kind_name, protocol = step.args[0], step.args[1]
        if protocol not in PROTOCOLS:
            raise ScriptError(step.line, f"unknown protocol {protocol!r}")
        try:
            kind = FaultKind(kind_name)
        except ValueError:
            raise ScriptError(step.line, f"unknown fault {kind_name!r}") from None
        index = _int(step, step.args[2])
        extra = [_int(step, a) for a in step.args[3:]]
        need = {FaultKind.DROP: 0, FaultKind.DELAY: 1, FaultKind.TAMPER: 2, FaultKind.REPLAY: 1}.get(kind)
        if need is None or len(extra) != need:
            raise ScriptError(step.line, f"fault {kind_name} takes {need} extra argument(s)")
        net = self._world().net
        fault = FaultAction(kind, index, protocol, net._runs[protocol] + 1)
        if kind is FaultKind.DELAY:
            fault.delay = extra[0]
        elif kind is FaultKind.TAMPER:
            fault.offset, fault.mask = extra
        elif kind is FaultKind.REPLAY:
            fault.capture_index = extra[0]
        net.schedule(fault)
        self._log(step, "scheduled")

    def cmd_assert_balance(self, step):
        _arity(step, 2)
        u, want = self._user(step, step.args[0]), _int(step, step.args[1])
        if u.device.balance != want:
            raise ScriptError(step.line, f"{u.name} device balance {u.device.balance}, expected {want}")

    def cmd_assert_online(self, step):
        _arity(step, 2)
        u, want = self._user(step, step.args[0]), _int(step, step.args[1])
        got = self._world().fi.account(u.name).balance
        if got != want:
            raise ScriptError(step.line, f"{u.name} online balance {got}, expected {want}")

    def cmd_assert_settled(self, step):
        _arity(step, 0)
        a = self._world().audit()
        if a.in_flight or self.world.fi.in_doubt or self.outstanding:
            raise ScriptError(step.line, f"unsettled: in flight {a.in_flight}, in doubt {len(self.world.fi.in_doubt)}, "
                                         f"interrupted payments {len(self.outstanding)}")


def run_scenario(script: str, seed: int = 0, *, variant: Variant | None = None, mode: ComplianceMode | None = None,
                 keyring: KeyRing | None = None) -> ScenarioResult:
    return ScenarioRunner(seed, variant=variant, mode=mode, keyring=keyring).run(script)
