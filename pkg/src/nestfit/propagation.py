"""Exact propagation of single Pauli errors through the cyclic Clifford schedule.

Works on a classical Pauli frame (an X and a Z bit per qubit): H swaps the bits,
CZ(a, b) adds X_b into Z_a and X_a into Z_b, MeasureZ reports the frame X bit and
Init0 clears the qubit. Detection events are the time-derivative of flipped results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

from .circuit import LEGAL_LABELS, Circuit, GateKind

_MAX_PERIODS = 64


class DetectionEvent(NamedTuple):
    round: int
    measure_qubit: int

    def shift(self, k: int) -> "DetectionEvent":
        return DetectionEvent(self.round + k, self.measure_qubit)


class DetectionPattern(frozenset):
    """Set of detection events; combining patterns is symmetric difference."""

    def __new__(cls, events: Iterable = ()):
        return super().__new__(cls, (DetectionEvent(int(r), int(q)) for r, q in events))

    def __xor__(self, other) -> "DetectionPattern":
        return DetectionPattern(frozenset.__xor__(self, other))

    def shift(self, k: int) -> "DetectionPattern":
        return DetectionPattern(e.shift(k) for e in self)

    def canonical(self) -> "DetectionPattern":
        """Translate in time so that the earliest event sits at round 0."""
        if not self:
            return self
        return self.shift(-min(e.round for e in self))

    def restrict(self, qubits) -> "DetectionPattern":
        qubits = set(qubits)
        return DetectionPattern(e for e in self if e.measure_qubit in qubits)

    def sorted(self) -> list[DetectionEvent]:
        return sorted(self)

    def key(self) -> tuple:
        return tuple(sorted(self))

    def to_json(self) -> list[dict]:
        return [{"measure_qubit": e.measure_qubit, "round": e.round} for e in self.sorted()]

    @classmethod
    def from_json(cls, items) -> "DetectionPattern":
        return cls((d["round"], d["measure_qubit"]) for d in items)

    def __repr__(self):
        inner = ", ".join(f"q{e.measure_qubit}@{e.round}" for e in self.sorted())
        return f"DetectionPattern({{{inner}}})"


@dataclass(frozen=True)
class ErrorLocation:
    gate_id: str
    pauli: str
    period_offset: int = 0


@dataclass(frozen=True)
class Propagation:
    """Everything a lone Pauli does: flipped results, detection events, lasting data frame."""

    flips: frozenset[tuple[int, int]]
    pattern: DetectionPattern
    data_x: frozenset[int]
    data_z: frozenset[int]


def _check(circuit: Circuit, loc: ErrorLocation):
    try:
        gate = circuit.gate(loc.gate_id)
    except KeyError:
        raise ValueError(f"unknown gate id {loc.gate_id!r}") from None
    if loc.pauli not in LEGAL_LABELS[gate.kind]:
        raise ValueError(f"Pauli {loc.pauli!r} is not legal for {gate.kind.value} gate {gate.id}")
    return gate


def _apply_gate(gate, x: int, z: int, rnd: int, flips: set):
    kind = gate.kind
    if kind is GateKind.HADAMARD:
        b = 1 << gate.qubits[0]
        xb, zb = x & b, z & b
        x = (x & ~b) | zb
        z = (z & ~b) | xb
    elif kind is GateKind.CZ:
        a, c = gate.qubits
        if x >> c & 1:
            z ^= 1 << a
        if x >> a & 1:
            z ^= 1 << c
    elif kind is GateKind.MEASURE:
        q = gate.qubits[0]
        if x >> q & 1:
            flips ^= {(q, rnd)}
    elif kind is GateKind.INIT0:
        b = 1 << gate.qubits[0]
        x &= ~b
        z &= ~b
    return x, z, flips


def _pauli_bits(gate, label: str) -> tuple[int, int]:
    x = z = 0
    for q, p in zip(gate.qubits, label):
        if p in "XY":
            x |= 1 << q
        if p in "ZY":
            z |= 1 << q
    return x, z


def propagate(circuit: Circuit, loc: ErrorLocation) -> Propagation:
    """Propagate one Pauli in an otherwise perfect circuit until the frame is periodic."""
    gate = _check(circuit, loc)
    t = loc.period_offset
    flips: set[tuple[int, int]] = set()
    x = z = 0
    ex, ez = _pauli_bits(gate, loc.pauli)
    if gate.kind is GateKind.MEASURE:
        flips.add((gate.qubits[0], t))
    else:
        x, z = ex, ez
    for g in circuit.gates:
        if g.layer > gate.layer:
            x, z, flips = _apply_gate(g, x, z, t, flips)
    prev = (x, z)
    period = t
    for _ in range(_MAX_PERIODS):
        period += 1
        for g in circuit.gates:
            x, z, flips = _apply_gate(g, x, z, period, flips)
        if (x, z) == prev:
            break
        prev = (x, z)
    else:
        raise RuntimeError(f"frame did not become periodic for {loc}")
    events = []
    for q, _ in circuit.measure_qubits:
        last = 0
        for r in range(t, period + 1):
            cur = 1 if (q, r) in flips else 0
            if cur != last:
                events.append((r, q))
            last = cur
    data_x = frozenset(q for q in circuit.data_qubits if x >> q & 1)
    data_z = frozenset(q for q in circuit.data_qubits if z >> q & 1)
    return Propagation(frozenset(flips), DetectionPattern(events), data_x, data_z)


def propagate_single(circuit: Circuit, loc: ErrorLocation) -> DetectionPattern:
    """Detection pattern of a lone Pauli error; empty when the error goes unnoticed."""
    return propagate(circuit, loc).pattern


def propagate_composite(circuit: Circuit, locs: Iterable[ErrorLocation]) -> DetectionPattern:
    """XOR of the single-error patterns."""
    out = DetectionPattern()
    for loc in locs:
        out = out ^ propagate_single(circuit, loc)
    return out


PURE_LABELS = {
    GateKind.CZ: ("IX", "XI", "IZ", "ZI"),
    GateKind.IDLE: ("X", "Z"),
    GateKind.HADAMARD: ("X", "Z"),
    GateKind.MEASURE: ("X",),
    GateKind.INIT0: ("X",),
}


def error_table(circuit: Circuit, *, pure: bool = False) -> list[dict]:
    """Every single-error row: gate, label, and its detection events relative to t=0."""
    rows = []
    for gate in circuit.gates:
        labels = PURE_LABELS[gate.kind] if pure else LEGAL_LABELS[gate.kind]
        for label in labels:
            pattern = propagate_single(circuit, ErrorLocation(gate.id, label, 0))
            rows.append({"gate": gate.id, "pauli": label, "events": pattern.to_json()})
    return rows
