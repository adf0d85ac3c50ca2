"""Three-party private-comparison round state machine.

One round moves a single entangled pair per client through the full
choreography: the coordinator (TP) prepares two Bell pairs, sends one
qubit of each to Alice and Bob, the clients set their two control flags
(i1: who is being checked, i2: measure vs reflect), TP dispatches on the
revealed flags (16-row action table), and the round ends in an
eavesdropper check, a coordinator-honesty discussion, a compared secret
bit, or no usable information.

All randomness flows through a ``Chooser`` so the same engine serves
three masters: seeded Monte Carlo sampling, full weighted-branch
enumeration (the exact probability oracle), and scripted unit tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from .qsim import (
    BELL_LABELS,
    BellIndex,
    Bit,
    RandSource,
    StateVector,
    bell_xor,
    born_bell,
    born_z,
    collapse_bell,
    collapse_z,
    prepare_bell,
    tensor,
)

# Register layout: TP's first pair occupies qubits (0, 1), the second (2, 3).
# Qubits 0 and 2 travel; 1 and 3 stay with TP.
SLOT_A1, SLOT_A2, SLOT_B1, SLOT_B2 = 0, 1, 2, 3

ALICE = "alice"
BOB = "bob"

# Named substreams so that installing an adversary never perturbs the
# preparation or flag draws of a seeded run.
STREAM_TP = 0
STREAM_ALICE = 1
STREAM_BOB = 2
STREAM_QUANTUM = 3
STREAM_ADV = 4
_ROLE_STREAM = {ALICE: STREAM_ALICE, BOB: STREAM_BOB}

_COIN = ((0, 0.5), (1, 0.5))
_UNIFORM_BELL = tuple((label, 0.25) for label in BELL_LABELS)


class ProtocolError(ValueError):
    """A protocol-contract violation (bad inputs, ordering breach)."""


# ---------------------------------------------------------------------------
# choosers: the single randomness funnel
# ---------------------------------------------------------------------------


class Fork(Exception):
    """Raised by PathChooser at an unexplored choice point (enumeration)."""

    def __init__(self, options):
        super().__init__("unexplored choice point")
        self.options = options


class SamplingChooser:
    """Draws weighted choices from per-stream deterministic sources."""

    __slots__ = ("_streams",)

    def __init__(self, streams: dict[int, RandSource]):
        self._streams = streams

    @classmethod
    def from_rand(cls, rng: RandSource) -> "SamplingChooser":
        return cls({sid: rng.substream(sid) for sid in range(5)})

    def choose(self, stream: int, options):
        live = [(v, p) for v, p in options if p > 0.0]
        if len(live) == 1:
            return live[0]
        idx = self._streams[stream].weighted_index([p for _, p in live])
        return live[idx]


class PathChooser:
    """Replays a recorded decision path; raises Fork beyond its end.

    Drives exhaustive enumeration: each Fork reports the live weighted
    options at the frontier and the caller re-runs with every extension.
    """

    __slots__ = ("path", "_pos")

    def __init__(self, path: tuple[int, ...] = ()):
        self.path = path
        self._pos = 0

    def choose(self, stream: int, options):
        live = [(v, p) for v, p in options if p > 0.0]
        if len(live) == 1:
            return live[0]
        if self._pos < len(self.path):
            choice = live[self.path[self._pos]]
            self._pos += 1
            return choice
        raise Fork(live)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Flags:
    """Per-qubit client flags: i1 selects the check target, i2 the action.

    i1=0 checks for channel eavesdroppers, i1=1 checks the coordinator.
    i2=0 means measure-and-resend, i2=1 means reflect untouched.  i2 is
    revealed to TP only when i1=0, and only after TP's acknowledgment.
    """

    i1: Bit
    i2: Bit

    def __post_init__(self):
        if self.i1 not in (0, 1) or self.i2 not in (0, 1):
            raise ProtocolError(f"flags must be bits, got {self!r}")


@dataclass(frozen=True)
class ClientPolicy:
    """How a client picks flags: uniform coin flips or a fixed script."""

    mode: str = "uniform"
    script: Optional[tuple[Flags, ...]] = None

    def __post_init__(self):
        if self.mode not in ("uniform", "scripted"):
            raise ProtocolError(f"unknown policy mode {self.mode!r}")
        if self.mode == "scripted" and not self.script:
            raise ProtocolError("scripted policy needs a non-empty script")

    @classmethod
    def uniform(cls) -> "ClientPolicy":
        return cls("uniform")

    @classmethod
    def scripted(cls, flags: Sequence[Flags | tuple[Bit, Bit]]) -> "ClientPolicy":
        return cls("scripted", tuple(f if isinstance(f, Flags) else Flags(*f)
                                     for f in flags))

    def draw(self, chooser, role: str, round_index: int) -> Flags:
        if self.mode == "scripted":
            return self.script[round_index % len(self.script)]
        stream = _ROLE_STREAM[role]
        i1 = chooser.choose(stream, _COIN)[0]
        i2 = chooser.choose(stream, _COIN)[0]
        return Flags(i1, i2)


@dataclass(frozen=True)
class RegisterQubit:
    """Handle to a qubit living in the round's 4-qubit register."""

    slot: int
    client_prepared: bool = False

    def __str__(self):
        return f"register:{self.slot}" + ("*" if self.client_prepared else "")


@dataclass(frozen=True)
class FakeQubit:
    """A decoy Z eigenstate living outside the entangled register."""

    value: Bit

    def __str__(self):
        return f"fake:|{self.value}>"


QubitHandle = object  # RegisterQubit | FakeQubit


class OutcomeKind(str, Enum):
    EVE_DETECTED_CASE1 = "eve_detected_case1"
    EVE_DETECTED_CASE2 = "eve_detected_case2"
    TP_DETECTED_STEP5 = "tp_detected_step5"
    CLIENT_IGNORED = "client_ignored"
    NO_CHECK_POSSIBLE = "no_check_possible"
    PASSED_CHECK = "passed_check"
    COMPARED_BIT = "compared_bit"


@dataclass(frozen=True)
class RoundOutcome:
    """How one round ended, with enough tags for per-case statistics."""

    kind: OutcomeKind
    detail: str = ""
    which: Optional[str] = None     # client tag for detections / ignores
    r: Optional[Bit] = None         # compared-bit value

    @property
    def is_detection(self) -> bool:
        return self.kind in (OutcomeKind.EVE_DETECTED_CASE1,
                             OutcomeKind.EVE_DETECTED_CASE2,
                             OutcomeKind.TP_DETECTED_STEP5)

    @property
    def detection_case(self) -> Optional[str]:
        if self.kind is OutcomeKind.EVE_DETECTED_CASE1:
            return f"case1:{self.which}"
        if self.kind is OutcomeKind.EVE_DETECTED_CASE2:
            return f"case2:{self.which}"
        if self.kind is OutcomeKind.TP_DETECTED_STEP5:
            return "step5"
        return None

    def key(self) -> str:
        if self.kind is OutcomeKind.CLIENT_IGNORED:
            return f"client_ignored:{self.which}"
        if self.kind is OutcomeKind.COMPARED_BIT:
            return f"compared_bit:r{self.r}"
        if self.kind in (OutcomeKind.EVE_DETECTED_CASE1, OutcomeKind.EVE_DETECTED_CASE2):
            return f"{self.kind.value}:{self.which}"
        return self.kind.value


@dataclass
class RoundState:
    """Every per-round protocol variable, for inspection and transcripts."""

    is_a: Optional[BellIndex] = None
    is_b: Optional[BellIndex] = None
    register: Optional[StateVector] = None
    flags_a: Optional[Flags] = None
    flags_b: Optional[Flags] = None
    mr_a: Optional[Bit] = None
    mr_b: Optional[Bit] = None
    returned_a: Optional[QubitHandle] = None
    returned_b: Optional[QubitHandle] = None
    m_flag: Optional[Bit] = None
    announced_bell: Optional[BellIndex] = None
    tp_bell_a1b1: Optional[BellIndex] = None
    tp_bell_a2b2: Optional[BellIndex] = None
    # TP-side check records (case 1 re-measurements, case 2 Bell results)
    tp_mr: dict = field(default_factory=dict)
    tp_pair_bell: dict = field(default_factory=dict)
    # adversary scratch: TP-private preparation data, tap memories
    tp_private: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TranscriptMessage:
    seq: int
    sender: str
    recipient: str
    kind: str
    payload: dict

    def to_obj(self) -> dict:
        return {"seq": self.seq, "from": self.sender, "to": self.recipient,
                "kind": self.kind, "payload": self.payload}

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), separators=(",", ":"))


@dataclass
class RoundTranscript:
    """Ordered message log plus the final round state and outcome."""

    messages: list[TranscriptMessage]
    round_state: RoundState
    outcome: RoundOutcome
    round_index: int = 0

    def append_message(self, sender: str, recipient: str, kind: str,
                       payload: Optional[dict] = None) -> None:
        seq = self.messages[-1].seq + 1 if self.messages else 0
        self.messages.append(TranscriptMessage(seq, sender, recipient, kind,
                                               payload or {}))

    def to_jsonl(self) -> str:
        return "".join(m.to_json() + "\n" for m in self.messages)


@dataclass
class ComparisonAccumulator:
    """Tracks which secret bits have been compared and their XOR results."""

    secret_a: tuple[Bit, ...]
    secret_b: tuple[Bit, ...]
    next_bit_index: int = 0
    r_bits: list[Bit] = field(default_factory=list)

    def __post_init__(self):
        self.secret_a = tuple(self.secret_a)
        self.secret_b = tuple(self.secret_b)
        if len(self.secret_a) != len(self.secret_b):
            raise ProtocolError("secret bit sequences must have equal length")
        if not self.secret_a:
            raise ProtocolError("secret bit sequences must be non-empty")
        for b in self.secret_a + self.secret_b:
            if b not in (0, 1):
                raise ProtocolError("secrets must be bit sequences")

    @property
    def remaining(self) -> int:
        return len(self.secret_a) - self.next_bit_index

    def current_bits(self) -> tuple[Bit, Bit]:
        i = self.next_bit_index
        return self.secret_a[i], self.secret_b[i]

    def record(self, r: Bit) -> None:
        self.r_bits.append(r)
        self.next_bit_index += 1


class VerdictKind(str, Enum):
    IDENTICAL = "identical"
    DIFFERENT = "different"
    ABORTED_DETECTION = "aborted_detection"
    EXHAUSTED = "exhausted"


@dataclass(frozen=True)
class ProtocolVerdict:
    kind: VerdictKind
    cause: str = ""
    differing_index: Optional[int] = None


@dataclass(frozen=True)
class TPAction:
    """Resolved action-table row: the swap case or two per-client actions."""

    case3: bool
    alice: Optional[str] = None   # "z_check" | "bell_check" | "ignore"
    bob: Optional[str] = None


@dataclass(frozen=True)
class Case3Decision:
    """What TP announces (and privately knows) after the swap-phase
    measurements, honest or otherwise."""

    m: Bit
    announced: Optional[BellIndex]
    c_t: Optional[Bit]                  # comparison transform bit for step 6
    known_mr_a: Optional[Bit] = None    # TP-side knowledge for leak tallies
    known_mr_b: Optional[Bit] = None


class Step5Result(str, Enum):
    PASS = "pass"
    TP_DETECTED = "tp_detected"
    PROCEED_TO_COMPARE = "proceed_to_compare"
    NO_CHECK = "no_check"


# ---------------------------------------------------------------------------
# pure protocol rules
# ---------------------------------------------------------------------------


def tp_dispatch(flags_a_i1: Bit, flags_b_i1: Bit,
                i2_a: Optional[Bit] = None, i2_b: Optional[Bit] = None) -> TPAction:
    """Resolve the 16-row action table from the revealed flags.

    A client with i1=1 keeps i2 private, so passing an i2 for such a
    client is a contract violation.  A lone i1=1 client is ignored; the
    swap case runs only when both clients request the coordinator check.
    """
    for role, i1, i2 in ((ALICE, flags_a_i1, i2_a), (BOB, flags_b_i1, i2_b)):
        if i1 == 1 and i2 is not None:
            raise ProtocolError(f"{role}: i2 revealed before discussion despite i1=1")
        if i1 == 0 and i2 is None:
            raise ProtocolError(f"{role}: i1=0 requires a revealed i2")
    if flags_a_i1 == 1 and flags_b_i1 == 1:
        return TPAction(case3=True)

    def client_action(i1: Bit, i2: Optional[Bit]) -> str:
        if i1 == 1:
            return "ignore"
        return "z_check" if i2 == 0 else "bell_check"

    return TPAction(case3=False,
                    alice=client_action(flags_a_i1, i2_a),
                    bob=client_action(flags_b_i1, i2_b))


def case1_check(client_mr: Bit, tp_mr: Bit) -> bool:
    """Measure-and-resend check: reported and re-measured bits must agree."""
    return client_mr == tp_mr


def case2_check(bell_result: BellIndex, initial: BellIndex) -> bool:
    """Reflection check: the pair must still be in its initial Bell state."""
    return bell_result == initial


def case3_compute_M(is_a: BellIndex, is_b: BellIndex,
                    m_a1b1: BellIndex, m_a2b2: BellIndex) -> Bit:
    """0 when the swap outcomes satisfy the XOR identity, else 1."""
    return 0 if bell_xor(is_a, is_b) == bell_xor(m_a1b1, m_a2b2) else 1


def step5_discussion(m_flag: Bit, announced_bell: Optional[BellIndex],
                     flags_a: Flags, flags_b: Flags,
                     mr_a: Optional[Bit], mr_b: Optional[Bit]) -> Step5Result:
    """Client-side public discussion after the swap phase.

    With M=0 and both clients holding measurement results, the announced
    Bell family fixes the parity their results must show.  M=1 with two
    reflected qubits is impossible for an honest coordinator.  M=1 with
    two measured qubits is the only gateway to the comparison step.
    """
    if m_flag == 0:
        if announced_bell is None:
            raise ProtocolError("M=0 announcement must carry the Bell result")
        if flags_a.i2 == 0 and flags_b.i2 == 0:
            if mr_a is None or mr_b is None:
                raise ProtocolError("measured clients must exchange results")
            expected_parity = announced_bell.parity_bit
            if (mr_a ^ mr_b) != expected_parity:
                return Step5Result.TP_DETECTED
            return Step5Result.PASS
        return Step5Result.NO_CHECK
    if flags_a.i2 == 1 and flags_b.i2 == 1:
        return Step5Result.TP_DETECTED
    if flags_a.i2 == 0 and flags_b.i2 == 0:
        return Step5Result.PROCEED_TO_COMPARE
    return Step5Result.NO_CHECK


def step6_compare(mr_a: Bit, m_a_bit: Bit, mr_b: Bit, m_b_bit: Bit,
                  bell_a1b1: BellIndex) -> tuple[Bit, Bit, Bit, Bit]:
    """Comparison algebra: returns (r, r_a, r_b, c_t).

    c_t is the Bell parity of the returned-qubit pair, which equals
    mr_a XOR mr_b in an honest round and so cancels the measurement
    randomness, leaving r = m_a XOR m_b.
    """
    r_a = mr_a ^ m_a_bit
    r_b = mr_b ^ m_b_bit
    c_t = bell_a1b1.parity_bit
    return r_a ^ r_b ^ c_t, r_a, r_b, c_t


# ---------------------------------------------------------------------------
# round engine
# ---------------------------------------------------------------------------


class _RoundContext:
    """Mutable state of one round in flight."""

    def __init__(self, chooser, policy_a: ClientPolicy, policy_b: ClientPolicy,
                 strategy, m_a: Bit, m_b: Bit, round_index: int, record: bool):
        self.chooser = chooser
        self.policy_a = policy_a
        self.policy_b = policy_b
        self.strategy = strategy
        self.m_a = m_a
        self.m_b = m_b
        self.round_index = round_index
        self.record = record
        self.messages: list[TranscriptMessage] = []
        self.leak_events: list[bool] = []
        self.rs = RoundState()
        self.state: Optional[StateVector] = None
        self._tap_memory: dict = {}

    # -- logging ---------------------------------------------------------

    def log(self, sender: str, recipient: str, kind: str, **payload) -> None:
        if self.record:
            self.messages.append(TranscriptMessage(
                len(self.messages), sender, recipient, kind, payload))

    # -- randomness ------------------------------------------------------

    def coin(self, stream: int) -> Bit:
        return self.chooser.choose(stream, _COIN)[0]

    # -- quantum operations ----------------------------------------------

    def measure_z(self, slot: int) -> Bit:
        outcome, prob = self.chooser.choose(STREAM_QUANTUM, born_z(self.state, slot))
        self.state = collapse_z(self.state, slot, outcome, prob)
        return outcome

    def measure_bell(self, i: int, j: int) -> BellIndex:
        outcome, prob = self.chooser.choose(STREAM_QUANTUM,
                                            born_bell(self.state, (i, j)))
        self.state = collapse_bell(self.state, (i, j), outcome, prob)
        return outcome

    def z_of_handle(self, handle: QubitHandle) -> Bit:
        if isinstance(handle, FakeQubit):
            return handle.value
        return self.measure_z(handle.slot)

    def bell_of_pair(self, hx: QubitHandle, hy: QubitHandle) -> BellIndex:
        """Bell measurement of two qubits that may live outside the register.

        A decoy eigenstate paired with a register qubit fixes the outcome
        parity to the XOR of their Z values and leaves the phase uniform.
        """
        x_fake = isinstance(hx, FakeQubit)
        y_fake = isinstance(hy, FakeQubit)
        if not x_fake and not y_fake:
            return self.measure_bell(hx.slot, hy.slot)
        if x_fake and y_fake:
            return BellIndex(hx.value ^ hy.value, self.coin(STREAM_QUANTUM))
        fake, reg = (hx, hy) if x_fake else (hy, hx)
        z = self.measure_z(reg.slot)
        return BellIndex(fake.value ^ z, self.coin(STREAM_QUANTUM))

    # -- adversary plumbing ------------------------------------------------

    def tap_memory(self, tap, channel: str) -> dict:
        return self._tap_memory.setdefault((id(tap), channel), {})

    def taps_for(self, channel: str):
        if self.strategy is None:
            return ()
        return self.strategy.taps_for(channel)

    @property
    def tp_override(self):
        return None if self.strategy is None else self.strategy.tp_override


class TapView:
    """The slice of a round a channel tap is allowed to touch."""

    def __init__(self, ctx: _RoundContext, tap, channel: str):
        self._ctx = ctx
        self._tap = tap
        self.channel = channel

    @property
    def memory(self) -> dict:
        return self._ctx.tap_memory(self._tap, self.channel)

    def measure_z_handle(self, handle: QubitHandle) -> Bit:
        return self._ctx.z_of_handle(handle)

    def coin(self) -> Bit:
        return self._ctx.coin(STREAM_ADV)

    def record_leak(self, inferred: Bit) -> None:
        truth = self._ctx.m_a if self.channel == ALICE else self._ctx.m_b
        self._ctx.leak_events.append(inferred == truth)


class TPView:
    """The slice of a round a coordinator override is allowed to touch.

    Deliberately excludes client flags and unrevealed measurement
    results: a dishonest coordinator only ever sees revealed messages.
    """

    def __init__(self, ctx: _RoundContext):
        self._ctx = ctx

    @property
    def claimed_is_a(self) -> BellIndex:
        return self._ctx.rs.is_a

    @property
    def claimed_is_b(self) -> BellIndex:
        return self._ctx.rs.is_b

    @property
    def returned_a(self) -> QubitHandle:
        return self._ctx.rs.returned_a

    @property
    def returned_b(self) -> QubitHandle:
        return self._ctx.rs.returned_b

    @property
    def private(self) -> dict:
        return self._ctx.rs.tp_private

    def retained(self, role: str) -> QubitHandle:
        return RegisterQubit(SLOT_A2 if role == ALICE else SLOT_B2)

    def coin(self) -> Bit:
        return self._ctx.coin(STREAM_ADV)

    def prep_coin(self) -> Bit:
        return self._ctx.coin(STREAM_TP)

    def measure_z_handle(self, handle: QubitHandle) -> Bit:
        return self._ctx.z_of_handle(handle)

    def measure_bell_pair(self, hx: QubitHandle, hy: QubitHandle) -> BellIndex:
        return self._ctx.bell_of_pair(hx, hy)

    def install_register(self, state: StateVector, claimed_a: BellIndex,
                         claimed_b: BellIndex) -> None:
        self._ctx.state = state
        self._ctx.rs.is_a = claimed_a
        self._ctx.rs.is_b = claimed_b

    def note_swap_results(self, m_a1b1: Optional[BellIndex],
                          m_a2b2: Optional[BellIndex]) -> None:
        self._ctx.rs.tp_bell_a1b1 = m_a1b1
        self._ctx.rs.tp_bell_a2b2 = m_a2b2


def _prepare_stage(ctx: _RoundContext) -> None:
    override = ctx.tp_override
    if override is not None and override.prepare(TPView(ctx)):
        return
    is_a = ctx.chooser.choose(STREAM_TP, _UNIFORM_BELL)[0]
    is_b = ctx.chooser.choose(STREAM_TP, _UNIFORM_BELL)[0]
    ctx.rs.is_a, ctx.rs.is_b = is_a, is_b
    ctx.state = tensor(prepare_bell(is_a), prepare_bell(is_b))


def _transit_to_client(ctx: _RoundContext, role: str, slot: int,
                       slot_name: str) -> QubitHandle:
    ctx.log("tp", role, "qubit", slot=slot_name)
    handle: QubitHandle = RegisterQubit(slot)
    for tap in ctx.taps_for(role):
        handle = tap.on_tp_to_client(TapView(ctx, tap, role), handle)
    return handle


def _client_transform(ctx: _RoundContext, role: str, flags: Flags,
                      handle: QubitHandle) -> tuple[Optional[Bit], QubitHandle]:
    """The client's physical act: measure-and-resend or reflect."""
    if flags.i2 == 1:
        return None, handle
    if isinstance(handle, FakeQubit):
        mr = handle.value
        return mr, FakeQubit(mr)
    mr = ctx.measure_z(handle.slot)
    # Resending a fresh |mr> is indistinguishable from the collapsed original.
    return mr, RegisterQubit(handle.slot, client_prepared=True)


def _return_to_tp(ctx: _RoundContext, role: str, flags: Flags,
                  handle: QubitHandle, slot_name: str) -> QubitHandle:
    for tap in ctx.taps_for(role):
        handle = tap.on_client_to_tp(TapView(ctx, tap, role), handle)
    ctx.log(role, "tp", "qubit", slot=slot_name + "*")
    ctx.log(role, "tp", "flag", i1=flags.i1)
    return handle


def _reveal_after_ack(ctx: _RoundContext, role: str, flags: Flags,
                      mr: Optional[Bit]) -> None:
    ctx.log("tp", role, "ack")
    if flags.i1 == 0:
        payload = {"i2": flags.i2}
        if flags.i2 == 0:
            payload["mr"] = mr
        ctx.log(role, "tp", "reveal", **payload)


def _honest_case3(ctx: _RoundContext) -> Case3Decision:
    m13 = ctx.bell_of_pair(ctx.rs.returned_a, ctx.rs.returned_b)
    m24 = ctx.measure_bell(SLOT_A2, SLOT_B2)
    ctx.rs.tp_bell_a1b1 = m13
    ctx.rs.tp_bell_a2b2 = m24
    m = case3_compute_M(ctx.rs.is_a, ctx.rs.is_b, m13, m24)
    return Case3Decision(m=m, announced=m13 if m == 0 else None,
                         c_t=m13.parity_bit)


def _run_client_check(ctx: _RoundContext, role: str, action: str) -> Optional[RoundOutcome]:
    """Execute one per-client eavesdropper check; None means it passed.

    A dishonest coordinator performs the same measurements but never
    aborts: its own check results carry no weight against itself.
    """
    rs = ctx.rs
    returned = rs.returned_a if role == ALICE else rs.returned_b
    suppressed = ctx.tp_override is not None
    if action == "z_check":
        reported = rs.mr_a if role == ALICE else rs.mr_b
        tp_mr = ctx.z_of_handle(returned)
        rs.tp_mr[role] = tp_mr
        if not case1_check(reported, tp_mr) and not suppressed:
            ctx.log("tp", "public", "abort", cause=f"case1 mismatch for {role}")
            return RoundOutcome(OutcomeKind.EVE_DETECTED_CASE1, which=role,
                                detail=f"{role} reported {reported}, tp measured {tp_mr}")
    elif action == "bell_check":
        retained = RegisterQubit(SLOT_A2 if role == ALICE else SLOT_B2)
        initial = rs.is_a if role == ALICE else rs.is_b
        result = ctx.bell_of_pair(returned, retained)
        rs.tp_pair_bell[role] = result
        if not case2_check(result, initial) and not suppressed:
            ctx.log("tp", "public", "abort", cause=f"case2 mismatch for {role}")
            return RoundOutcome(OutcomeKind.EVE_DETECTED_CASE2, which=role,
                                detail=f"pair measured {result}, prepared {initial}")
    return None


def _case3_phase(ctx: _RoundContext) -> RoundOutcome:
    rs = ctx.rs
    override = ctx.tp_override
    if override is not None:
        decision = override.case3(TPView(ctx))
    else:
        decision = _honest_case3(ctx)
    rs.m_flag = decision.m
    rs.announced_bell = decision.announced
    payload = {"m": decision.m}
    if decision.announced is not None:
        payload["bell"] = decision.announced.bits
    ctx.log("tp", "public", "m_announce", **payload)

    # Public discussion between the clients; i2 values (and measurement
    # results when both measured) travel client-to-client, never to TP.
    ctx.log(ALICE, BOB, "discuss_i2", i2=rs.flags_a.i2)
    ctx.log(BOB, ALICE, "discuss_i2", i2=rs.flags_b.i2)
    if rs.flags_a.i2 == 0 and rs.flags_b.i2 == 0:
        ctx.log(ALICE, BOB, "discuss_mr", mr=rs.mr_a)
        ctx.log(BOB, ALICE, "discuss_mr", mr=rs.mr_b)

    result = step5_discussion(decision.m, decision.announced,
                              rs.flags_a, rs.flags_b, rs.mr_a, rs.mr_b)
    if result is Step5Result.TP_DETECTED:
        cause = ("swap-phase M=1 with both qubits reflected" if decision.m == 1
                 else "announced Bell parity contradicts the exchanged results")
        ctx.log(ALICE, "public", "abort", cause=cause)
        return RoundOutcome(OutcomeKind.TP_DETECTED_STEP5, detail=cause)
    if result is Step5Result.PASS:
        return RoundOutcome(OutcomeKind.PASSED_CHECK,
                            detail="swap-consistency discussion passed")
    if result is Step5Result.NO_CHECK:
        return RoundOutcome(OutcomeKind.NO_CHECK_POSSIBLE,
                            detail="discussion had no checkable information")

    # step 6: the comparison proper
    r_a = rs.mr_a ^ ctx.m_a
    r_b = rs.mr_b ^ ctx.m_b
    ctx.log(ALICE, "tp", "r_send", r=r_a)
    ctx.log(BOB, "tp", "r_send", r=r_b)
    if decision.c_t is None:
        raise ProtocolError("comparison reached without a transform bit")
    r = r_a ^ r_b ^ decision.c_t

    if decision.known_mr_a is not None:
        ctx.leak_events.append((r_a ^ decision.known_mr_a) == ctx.m_a)
    if decision.known_mr_b is not None:
        ctx.leak_events.append((r_b ^ decision.known_mr_b) == ctx.m_b)
    for channel, r_x in ((ALICE, r_a), (BOB, r_b)):
        for tap in ctx.taps_for(channel):
            tap.on_compared(TapView(ctx, tap, channel), r_x)

    return RoundOutcome(OutcomeKind.COMPARED_BIT, r=r,
                        detail=f"r_a={r_a} r_b={r_b} c_t={decision.c_t}")


def play_round(ctx: _RoundContext) -> RoundOutcome:
    """Drive one full round through the engine; fills ctx as it goes."""
    _prepare_stage(ctx)
    rs = ctx.rs

    handle_a = _transit_to_client(ctx, ALICE, SLOT_A1, "a1")
    handle_b = _transit_to_client(ctx, BOB, SLOT_B1, "b1")

    rs.flags_a = ctx.policy_a.draw(ctx.chooser, ALICE, ctx.round_index)
    rs.flags_b = ctx.policy_b.draw(ctx.chooser, BOB, ctx.round_index)
    rs.mr_a, handle_a = _client_transform(ctx, ALICE, rs.flags_a, handle_a)
    rs.mr_b, handle_b = _client_transform(ctx, BOB, rs.flags_b, handle_b)

    rs.returned_a = _return_to_tp(ctx, ALICE, rs.flags_a, handle_a, "a1")
    rs.returned_b = _return_to_tp(ctx, BOB, rs.flags_b, handle_b, "b1")
    _reveal_after_ack(ctx, ALICE, rs.flags_a, rs.mr_a)
    _reveal_after_ack(ctx, BOB, rs.flags_b, rs.mr_b)

    action = tp_dispatch(rs.flags_a.i1, rs.flags_b.i1,
                         rs.flags_a.i2 if rs.flags_a.i1 == 0 else None,
                         rs.flags_b.i2 if rs.flags_b.i1 == 0 else None)
    if action.case3:
        outcome = _case3_phase(ctx)
    else:
        outcome = None
        ignored = None
        for role, act in ((ALICE, action.alice), (BOB, action.bob)):
            if act == "ignore":
                ignored = role
                continue
            outcome = _run_client_check(ctx, role, act)
            if outcome is not None:
                break
        if outcome is None:
            if ignored is not None:
                outcome = RoundOutcome(OutcomeKind.CLIENT_IGNORED, which=ignored,
                                       detail=f"{ignored} requested the coordinator check alone")
            else:
                outcome = RoundOutcome(OutcomeKind.PASSED_CHECK,
                                       detail="both channel checks passed")
    rs.register = ctx.state
    return outcome


@dataclass
class RoundResult:
    outcome: RoundOutcome
    round_state: RoundState
    messages: list[TranscriptMessage]
    leak_events: list[bool]


def run_single_round(chooser, policy_a: ClientPolicy, policy_b: ClientPolicy,
                     strategy, m_a: Bit, m_b: Bit, round_index: int = 0,
                     record: bool = False) -> RoundResult:
    """One round against an explicit chooser (sampling or enumeration)."""
    ctx = _RoundContext(chooser, policy_a, policy_b, strategy,
                        m_a, m_b, round_index, record)
    outcome = play_round(ctx)
    return RoundResult(outcome, ctx.rs, ctx.messages, ctx.leak_events)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def tp_prepare_round(rng: RandSource) -> RoundState:
    """Honest preparation: two uniformly drawn Bell pairs in one register."""
    ctx = _RoundContext(SamplingChooser.from_rand(rng), ClientPolicy.uniform(),
                        ClientPolicy.uniform(), None, 0, 0, 0, False)
    _prepare_stage(ctx)
    ctx.rs.register = ctx.state
    return ctx.rs


def client_step3(role: str, policy: ClientPolicy, rng: RandSource,
                 state: RoundState) -> tuple[Flags, RoundState]:
    """Client flag assignment and qubit handling on an in-flight round.

    Mutates and returns ``state``: records the flags, performs the Z
    measurement when i2=0 (collapsing the register and fixing the
    returned qubit to the measured eigenstate), or marks a reflection.
    """
    if role not in (ALICE, BOB):
        raise ProtocolError(f"unknown role {role!r}")
    ctx = _RoundContext(SamplingChooser.from_rand(rng), policy, policy, None,
                        0, 0, 0, False)
    ctx.state = state.register
    ctx.rs = state
    flags = policy.draw(ctx.chooser, role, 0)
    slot = SLOT_A1 if role == ALICE else SLOT_B1
    mr, handle = _client_transform(ctx, role, flags, RegisterQubit(slot))
    if role == ALICE:
        state.flags_a, state.mr_a, state.returned_a = flags, mr, handle
    else:
        state.flags_b, state.mr_b, state.returned_b = flags, mr, handle
    state.register = ctx.state
    return flags, state


def run_round(accumulator: ComparisonAccumulator,
              policies: tuple[ClientPolicy, ClientPolicy],
              strategy, rng: RandSource, *, round_index: int = 0,
              record_transcript: bool = True) -> RoundTranscript:
    """One protocol round; consumes a secret-bit index on a compared bit."""
    if accumulator.remaining <= 0:
        raise ProtocolError("no uncompared secret bits remain")
    m_a, m_b = accumulator.current_bits()
    result = run_single_round(SamplingChooser.from_rand(rng), policies[0],
                              policies[1], strategy, m_a, m_b,
                              round_index=round_index, record=record_transcript)
    if result.outcome.kind is OutcomeKind.COMPARED_BIT:
        accumulator.record(result.outcome.r)
    return RoundTranscript(result.messages, result.round_state,
                           result.outcome, round_index)


def run_protocol(secret_a: Sequence[Bit], secret_b: Sequence[Bit],
                 policies: tuple[ClientPolicy, ClientPolicy],
                 strategy, rng: RandSource, max_rounds: Optional[int] = None,
                 record_transcripts: bool = True,
                 ) -> tuple[ProtocolVerdict, list[RoundTranscript]]:
    """Loop rounds until a verdict: all bits equal, a differing bit, a
    detection abort, or the round budget is exhausted.

    On detection the simulator terminates and reports instead of silently
    restarting; restart loops would make attack statistics degenerate.
    """
    accumulator = ComparisonAccumulator(tuple(secret_a), tuple(secret_b))
    n = len(accumulator.secret_a)
    if max_rounds is None:
        max_rounds = 64 * n
    if max_rounds < 1:
        raise ProtocolError("max_rounds must be at least 1")

    transcripts: list[RoundTranscript] = []
    for k in range(max_rounds):
        transcript = run_round(accumulator, policies, strategy,
                               rng.substream(k), round_index=k,
                               record_transcript=record_transcripts)
        transcripts.append(transcript)
        outcome = transcript.outcome
        if outcome.is_detection:
            return (ProtocolVerdict(VerdictKind.ABORTED_DETECTION,
                                    cause=outcome.key()), transcripts)
        if outcome.kind is OutcomeKind.COMPARED_BIT:
            if outcome.r == 1:
                index = accumulator.next_bit_index - 1
                transcript.append_message("tp", "public", "verdict",
                                          {"result": "different", "bit_index": index})
                return (ProtocolVerdict(VerdictKind.DIFFERENT,
                                        differing_index=index), transcripts)
            if accumulator.remaining == 0:
                transcript.append_message("tp", "public", "verdict",
                                          {"result": "identical"})
                return ProtocolVerdict(VerdictKind.IDENTICAL), transcripts
    return ProtocolVerdict(VerdictKind.EXHAUSTED,
                           cause=f"{max_rounds} rounds without completion"), transcripts
