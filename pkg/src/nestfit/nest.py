"""Analytic nests: single-error detection patterns grouped into error classes."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

from .circuit import LEGAL_LABELS, Circuit, StabilizerType
from .propagation import DetectionPattern, ErrorLocation, propagate

NEST_SCHEMA = "nest.v1"


class Contributor(NamedTuple):
    gate_id: str
    pauli: str
    probability: float
    slots: int = 1
    kind: str = ""


@dataclass(frozen=True)
class ErrorClass:
    """One cylinder: canonical pattern, contributing terms, first-order total probability."""

    pattern: DetectionPattern
    contributors: tuple[Contributor, ...]
    probability: float
    data_flip: frozenset[int] = frozenset()

    @property
    def keys(self) -> set[tuple[str, str]]:
        return {(c.gate_id, c.pauli) for c in self.contributors}

    @property
    def term_count(self) -> int:
        """Contributing terms with consolidated idles expanded into their idle slots."""
        return sum(c.slots for c in self.contributors)

    @property
    def size(self) -> int:
        return len(self.pattern)

    @property
    def span(self) -> int:
        return max(e.round for e in self.pattern) - min(e.round for e in self.pattern)

    def qubits(self) -> tuple[int, ...]:
        return tuple(sorted({e.measure_qubit for e in self.pattern}))

    @property
    def parity_probability(self) -> float:
        """Chance that the class pattern appears at one anchor with gates firing independently.

        Terms of one gate are exclusive so they add; distinct gates combine by odd
        parity, 1/2 (1 - prod(1 - 2 P_g)). Agrees with ``probability`` to first order.
        """
        per_gate: dict[str, float] = {}
        for c in self.contributors:
            per_gate[c.gate_id] = per_gate.get(c.gate_id, 0.0) + c.probability
        prod = 1.0
        for v in per_gate.values():
            prod *= 1.0 - 2.0 * v
        return 0.5 * (1.0 - prod)


@dataclass(frozen=True)
class Nest:
    circuit_name: str
    circuit_hash: str
    stabilizer_type: StabilizerType
    measure_qubits: tuple[int, ...]
    classes: tuple[ErrorClass, ...]
    undetectable: tuple[Contributor, ...]

    def __post_init__(self):
        keys = [c.pattern.key() for c in self.classes]
        if len(set(keys)) != len(keys):
            raise ValueError("nest classes must have distinct canonical patterns")

    def lookup(self, pattern) -> ErrorClass | None:
        return class_lookup(self, pattern)

    @property
    def total_probability(self) -> float:
        return sum(c.probability for c in self.classes)

    def index(self) -> dict[tuple, int]:
        return {c.pattern.key(): i for i, c in enumerate(self.classes)}


def _class_sort_key(cls: ErrorClass):
    return (len(cls.pattern), cls.pattern.key())


def build_nest(circuit: Circuit, stabilizer_type=StabilizerType.Z, *,
               include_zero: bool = False) -> Nest:
    """Enumerate every (gate, Pauli) term and group by canonical detection pattern.

    With ``include_zero`` every legal term is enumerated regardless of its
    probability, which yields the nest *structure* needed for model inversion.
    Correlated (non-gate) channels are not part of the analytic nest.
    """
    stype = StabilizerType(stabilizer_type)
    measure = circuit.measure_qubits_of(stype)
    if not measure:
        raise ValueError(f"circuit {circuit.name} has no {stype.value}-type measure qubits")
    groups: dict[tuple, list] = {}
    patterns: dict[tuple, DetectionPattern] = {}
    flips: dict[tuple, Counter] = {}
    undetectable = []
    for gate in circuit.gates:
        for label in LEGAL_LABELS[gate.kind]:
            p = gate.error_model.terms.get(label, 0.0)
            if p <= 0.0 and not include_zero:
                continue
            prop = propagate(circuit, ErrorLocation(gate.id, label, 0))
            pattern = prop.pattern.restrict(measure).canonical()
            contributor = Contributor(gate.id, label, p, gate.slots, gate.kind.value)
            if not pattern:
                undetectable.append(contributor)
                continue
            key = pattern.key()
            groups.setdefault(key, []).append(contributor)
            patterns[key] = pattern
            flips.setdefault(key, Counter())[prop.data_x] += 1
    classes = []
    for key, members in groups.items():
        # lasting data flip a decoder must undo; terms of one class normally agree
        effect = max(flips[key], key=lambda s: (flips[key][s], -len(s)))
        classes.append(ErrorClass(patterns[key], tuple(members),
                                  float(sum(c.probability for c in members)), frozenset(effect)))
    classes.sort(key=_class_sort_key)
    return Nest(circuit.name, circuit.structure_hash(), stype, tuple(measure), tuple(classes),
                tuple(undetectable))


def class_lookup(nest: Nest, pattern) -> ErrorClass | None:
    pattern = DetectionPattern(pattern).canonical()
    if not pattern:
        return None
    key = pattern.key()
    for cls in nest.classes:
        if cls.pattern.key() == key:
            return cls
    return None


def _contrib_json(c: Contributor) -> dict:
    return {"gate": c.gate_id, "kind": c.kind, "pauli": c.pauli, "probability": c.probability,
            "slots": c.slots}


def _contrib_from(d) -> Contributor:
    return Contributor(d["gate"], d["pauli"], float(d["probability"]), int(d.get("slots", 1)),
                       d.get("kind", ""))


def plot_data(nest: Nest, circuit: Circuit | None = None, layers: int = 6) -> dict:
    """Cylinder endpoints in (space, time) with diameters proportional to probability.

    Single-event classes end on the device edge at space -0.5 (left) or n - 0.5 (right).
    """
    positions = {q: i for i, q in enumerate(nest.measure_qubits)}
    n = len(positions)
    pmax = max((c.probability for c in nest.classes), default=0.0)
    cylinders = []
    for layer in range(layers):
        for cls in nest.classes:
            ends = [[positions[e.measure_qubit], e.round + layer] for e in cls.pattern.sorted()]
            if len(ends) == 1:
                side = "left"
                if circuit is not None:
                    sides = circuit.boundary.get(cls.pattern.sorted()[0].measure_qubit, ())
                    side = sides[0] if sides else ("left" if ends[0][0] < n / 2 else "right")
                edge = -0.5 if side == "left" else n - 0.5
                ends.append([edge, ends[0][1]])
            cylinders.append({
                "endpoints": ends,
                "diameter": cls.probability / pmax if pmax > 0 else 0.0,
                "probability": cls.probability,
            })
    return {"layers": layers, "num_cells": n, "cylinders": cylinders}


def export_nest(nest: Nest, circuit: Circuit | None = None, *, plot_layers: int = 6) -> dict:
    return {
        "schema": NEST_SCHEMA,
        "circuit": nest.circuit_name,
        "circuit_hash": nest.circuit_hash,
        "stabilizer_type": nest.stabilizer_type.value,
        "measure_qubits": list(nest.measure_qubits),
        "classes": [
            {
                "pattern": cls.pattern.to_json(),
                "probability": cls.probability,
                "data_flip": sorted(cls.data_flip),
                "contributors": [_contrib_json(c) for c in cls.contributors],
            }
            for cls in nest.classes
        ],
        "undetectable": [_contrib_json(c) for c in nest.undetectable],
        "plot": plot_data(nest, circuit, plot_layers),
    }


def import_nest(doc) -> Nest:
    if doc.get("schema") != NEST_SCHEMA:
        raise ValueError(f"expected schema {NEST_SCHEMA}, got {doc.get('schema')!r}")
    classes = tuple(
        ErrorClass(
            DetectionPattern.from_json(c["pattern"]),
            tuple(_contrib_from(x) for x in c["contributors"]),
            float(c["probability"]),
            frozenset(c.get("data_flip", ())),
        )
        for c in doc["classes"]
    )
    return Nest(doc["circuit"], doc["circuit_hash"], StabilizerType(doc["stabilizer_type"]),
                tuple(doc["measure_qubits"]), classes,
                tuple(_contrib_from(x) for x in doc["undetectable"]))


def dumps_nest(nest: Nest, circuit: Circuit | None = None) -> str:
    return json.dumps(export_nest(nest, circuit), indent=2)
