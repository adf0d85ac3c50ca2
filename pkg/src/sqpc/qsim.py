"""Exact statevector simulation of 1-4 qubit registers.

Conventions used throughout the package:

* Basis ordering: qubit 0 is the most significant bit of the amplitude
  index, so ``|q0 q1 ... qk>`` maps to index ``q0*2^k + ... + qk``.
  ``tensor(a, b)`` therefore places ``a``'s qubits at the lower qubit
  indices and equals ``numpy.kron(a, b)``.
* Bell labels are two classical bits ``(parity_bit, phase_bit)``:
  00 = phi+, 01 = phi-, 10 = psi+, 11 = psi-, with amplitudes
  phi± = (|00> ± |11>)/sqrt(2) and psi± = (|01> ± |10>)/sqrt(2).
* Every state reachable in this protocol is a stabilizer state, so all
  measurement probabilities are dyadic rationals (k / 2^m).  Born
  probabilities are snapped onto that dyadic grid, which removes the
  ~1 ulp float noise of squaring 1/sqrt(2) and makes probability
  arithmetic downstream exact in doubles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

MAX_QUBITS = 4
NORM_ATOL = 1e-12

# Dyadic snapping grid for Born probabilities.  True probabilities in this
# protocol have denominators <= 2^8; float error is < 1e-12, so a 2^20 grid
# recovers them exactly with a huge safety margin.
_SNAP_GRID = float(2**20)
_SQRT_HALF = 1.0 / math.sqrt(2.0)

Bit = int


class RegisterOverflowError(ValueError):
    """Raised when composing registers beyond the 4-qubit capacity."""


def _snap(p: float) -> float:
    q = round(p * _SNAP_GRID) / _SNAP_GRID
    return q if abs(p - q) < 1e-9 else p


@dataclass(frozen=True, order=True)
class BellIndex:
    """Two-bit Bell state label: (parity_bit, phase_bit).

    parity_bit 0 is the phi family (correlated Z outcomes), 1 the psi
    family (anticorrelated).  phase_bit 0 is "+", 1 is "-".
    """

    parity_bit: Bit
    phase_bit: Bit

    def __post_init__(self) -> None:
        if self.parity_bit not in (0, 1) or self.phase_bit not in (0, 1):
            raise ValueError(f"bell label bits must be 0/1, got {self!r}")

    @property
    def index(self) -> int:
        return 2 * self.parity_bit + self.phase_bit

    @classmethod
    def from_index(cls, idx: int) -> "BellIndex":
        return cls(idx >> 1, idx & 1)

    @classmethod
    def from_bits(cls, text: str) -> "BellIndex":
        if len(text) != 2 or any(c not in "01" for c in text):
            raise ValueError(f"bell label must be two bits, got {text!r}")
        return cls(int(text[0]), int(text[1]))

    @property
    def label(self) -> str:
        return ("phi+", "phi-", "psi+", "psi-")[self.index]

    @property
    def bits(self) -> str:
        return f"{self.parity_bit}{self.phase_bit}"

    def __xor__(self, other: "BellIndex") -> "BellIndex":
        return BellIndex(self.parity_bit ^ other.parity_bit,
                         self.phase_bit ^ other.phase_bit)

    def __str__(self) -> str:
        return self.label


BELL_LABELS: tuple[BellIndex, ...] = tuple(BellIndex.from_index(i) for i in range(4))

# Rows are the Bell basis vectors over a qubit pair (i, j), i listed first,
# in the local basis order |00>, |01>, |10>, |11>.
_BELL_MAT = np.array(
    [
        [_SQRT_HALF, 0.0, 0.0, _SQRT_HALF],
        [_SQRT_HALF, 0.0, 0.0, -_SQRT_HALF],
        [0.0, _SQRT_HALF, _SQRT_HALF, 0.0],
        [0.0, _SQRT_HALF, -_SQRT_HALF, 0.0],
    ],
    dtype=np.complex128,
)


def bell_xor(a: BellIndex, b: BellIndex) -> BellIndex:
    """Bitwise XOR of two Bell labels (the entanglement-swapping algebra)."""
    return a ^ b


class StateVector:
    """Immutable complex-amplitude state of a 1-4 qubit register."""

    __slots__ = ("num_qubits", "amplitudes")

    def __init__(self, num_qubits: int, amplitudes: Sequence[complex] | np.ndarray):
        if not 1 <= num_qubits <= MAX_QUBITS:
            raise ValueError(f"num_qubits must be in 1..{MAX_QUBITS}, got {num_qubits}")
        amps = np.asarray(amplitudes, dtype=np.complex128)
        if amps.shape != (2**num_qubits,):
            raise ValueError(
                f"expected {2**num_qubits} amplitudes for {num_qubits} qubits, "
                f"got shape {amps.shape}"
            )
        norm_sq = float(np.real(np.vdot(amps, amps)))
        if abs(norm_sq - 1.0) > NORM_ATOL:
            raise ValueError(f"state norm^2 deviates from 1 by {norm_sq - 1.0:.3e}")
        amps = amps.copy()
        amps.flags.writeable = False
        object.__setattr__(self, "num_qubits", num_qubits)
        object.__setattr__(self, "amplitudes", amps)

    def __setattr__(self, name: str, value) -> None:
        raise AttributeError("StateVector is immutable")

    def norm_sq(self) -> float:
        return float(np.real(np.vdot(self.amplitudes, self.amplitudes)))

    def tensor_view(self) -> np.ndarray:
        return self.amplitudes.reshape((2,) * self.num_qubits)

    def isclose(self, other: "StateVector", atol: float = 1e-12) -> bool:
        return (self.num_qubits == other.num_qubits
                and bool(np.allclose(self.amplitudes, other.amplitudes, atol=atol)))

    def __repr__(self) -> str:
        return f"StateVector({self.num_qubits}, {np.round(self.amplitudes, 6)!r})"


def eigenstate(bit: Bit) -> StateVector:
    """Single-qubit Z eigenstate |0> or |1>."""
    amps = np.zeros(2, dtype=np.complex128)
    amps[bit] = 1.0
    return StateVector(1, amps)


def basis_state(bits: Sequence[Bit]) -> StateVector:
    """Computational basis state |b0 b1 ...> of len(bits) qubits."""
    n = len(bits)
    idx = 0
    for b in bits:
        idx = (idx << 1) | b
    amps = np.zeros(2**n, dtype=np.complex128)
    amps[idx] = 1.0
    return StateVector(n, amps)


def prepare_bell(idx: BellIndex) -> StateVector:
    """Two-qubit Bell state for the given label, qubit 0 listed first."""
    return StateVector(2, _BELL_MAT[idx.index])


def tensor(a: StateVector, b: StateVector) -> StateVector:
    """Kronecker product; a's qubits occupy the lower qubit indices."""
    n = a.num_qubits + b.num_qubits
    if n > MAX_QUBITS:
        raise RegisterOverflowError(
            f"combined register of {n} qubits exceeds the {MAX_QUBITS}-qubit capacity"
        )
    return StateVector(n, np.kron(a.amplitudes, b.amplitudes))


def born_z(state: StateVector, qubit: int) -> list[tuple[Bit, float]]:
    """Z-measurement outcome distribution for one qubit, without collapse."""
    n = state.num_qubits
    if not 0 <= qubit < n:
        raise ValueError(f"qubit {qubit} out of range for {n}-qubit state")
    probs = np.abs(state.tensor_view()) ** 2
    axes = tuple(i for i in range(n) if i != qubit)
    marginal = probs.sum(axis=axes) if axes else probs
    return [(0, _snap(float(marginal[0]))), (1, _snap(float(marginal[1])))]


def _bell_overlaps(state: StateVector, i: int, j: int) -> np.ndarray:
    """(4, rest) matrix of <B_k| amplitudes with qubits (i, j) moved in front."""
    n = state.num_qubits
    t = np.moveaxis(state.tensor_view(), (i, j), (0, 1)).reshape(4, -1)
    return _BELL_MAT.conj() @ t


def born_bell(state: StateVector, pair: tuple[int, int]) -> list[tuple[BellIndex, float]]:
    """Bell-measurement outcome distribution for a qubit pair, without collapse."""
    i, j = pair
    n = state.num_qubits
    if i == j or not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"invalid bell pair {pair} for {n}-qubit state")
    ov = _bell_overlaps(state, i, j)
    probs = (np.abs(ov) ** 2).sum(axis=1)
    return [(BELL_LABELS[k], _snap(float(probs[k]))) for k in range(4)]


def born_distribution(state: StateVector, basis) -> list[tuple[object, float]]:
    """Full outcome distribution for a measurement basis, without collapse.

    ``basis`` is ``("z", qubit)`` or ``("bell", (i, j))``.  Probabilities
    sum to 1 and include zero-probability outcomes.
    """
    kind, target = basis
    if kind == "z":
        return list(born_z(state, target))
    if kind == "bell":
        return list(born_bell(state, tuple(target)))
    raise ValueError(f"unknown measurement basis kind {kind!r}")


def collapse_z(state: StateVector, qubit: int, outcome: Bit, prob: float) -> StateVector:
    """Post-measurement state after observing ``outcome`` on ``qubit``."""
    if prob <= 0.0:
        raise ValueError("cannot collapse onto a zero-probability branch")
    n = state.num_qubits
    t = state.tensor_view().copy()
    index = [slice(None)] * n
    index[qubit] = 1 - outcome
    t[tuple(index)] = 0.0
    return StateVector(n, t.reshape(-1) / math.sqrt(prob))


def collapse_bell(state: StateVector, pair: tuple[int, int], outcome: BellIndex,
                  prob: float) -> StateVector:
    """Post-measurement state after a Bell outcome on ``pair``.

    The measured qubits collapse in place; register size is unchanged.
    """
    if prob <= 0.0:
        raise ValueError("cannot collapse onto a zero-probability branch")
    i, j = pair
    n = state.num_qubits
    ov = _bell_overlaps(state, i, j)[outcome.index]
    new = np.outer(_BELL_MAT[outcome.index], ov) / math.sqrt(prob)
    rest_shape = tuple(2 for _ in range(n - 2))
    t = new.reshape((2, 2) + rest_shape)
    t = np.moveaxis(t, (0, 1), (i, j))
    return StateVector(n, t.reshape(-1))


_MASK64 = (1 << 64) - 1


def _mix64(*parts: int) -> int:
    """splitmix64 chain over the key parts; a documented, stable mixer."""
    x = 0x9E3779B97F4A7C15
    for part in parts:
        x = (x + (int(part) & _MASK64)) & _MASK64
        x ^= x >> 30
        x = (x * 0xBF58476D1CE4E5B9) & _MASK64
        x ^= x >> 27
        x = (x * 0x94D049BB133111EB) & _MASK64
        x ^= x >> 31
    return x


class RandSource:
    """Deterministic pseudo-random stream with keyed substream derivation.

    Seeding scheme: a stream is identified by (master_seed, key...), a
    tuple of integers.  The tuple is folded through a splitmix64 chain
    into one 64-bit value that seeds a Mersenne Twister, so equal seeds
    give identical draw sequences and substreams with distinct keys are
    independent for simulation purposes.  Streams must not be shared
    between concurrent consumers; derive one per consumer instead.
    """

    __slots__ = ("_entropy", "_key", "_rng")

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self._entropy = int(seed)
        self._key = tuple(int(k) for k in _key)
        import random as _random
        self._rng = _random.Random(_mix64(self._entropy, *self._key))

    @classmethod
    def derive(cls, master_seed: int, *key: int) -> "RandSource":
        return cls(master_seed, key)

    def substream(self, *key: int) -> "RandSource":
        return RandSource(self._entropy, self._key + tuple(key))

    def uniform(self) -> float:
        return self._rng.random()

    def bit(self) -> Bit:
        return self._rng.getrandbits(1)

    def integer(self, upper: int) -> int:
        return self._rng.randrange(upper)

    def weighted_index(self, probs: Sequence[float]) -> int:
        u = self._rng.random()
        acc = 0.0
        for k, p in enumerate(probs):
            acc += p
            if u < acc:
                return k
        return len(probs) - 1


def _sample(dist: list, rng: RandSource):
    live = [(o, p) for o, p in dist if p > 0.0]
    idx = rng.weighted_index([p for _, p in live])
    return live[idx]


def measure_z(state: StateVector, qubit: int, rng: RandSource) -> tuple[Bit, StateVector]:
    """Born-rule Z measurement; returns the outcome and the collapsed state."""
    outcome, prob = _sample(born_z(state, qubit), rng)
    return outcome, collapse_z(state, qubit, outcome, prob)


def measure_bell(state: StateVector, pair: tuple[int, int],
                 rng: RandSource) -> tuple[BellIndex, StateVector]:
    """Born-rule Bell measurement of a qubit pair; register size unchanged."""
    outcome, prob = _sample(born_bell(state, pair), rng)
    return outcome, collapse_bell(state, pair, outcome, prob)


def enumerate_bell_branches(state: StateVector, pair: tuple[int, int],
                            ) -> Iterator[tuple[BellIndex, float, StateVector]]:
    """Yield every reachable Bell outcome with its probability and collapse."""
    for outcome, prob in born_bell(state, pair):
        if prob > 0.0:
            yield outcome, prob, collapse_bell(state, pair, outcome, prob)
