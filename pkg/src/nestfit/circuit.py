"""Gate set, stochastic Pauli error models and cyclic error-detection schedules."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import Iterable, Mapping

CIRCUIT_SCHEMA = "circuit.v1"
ERRORMODEL_SCHEMA = "errormodel.v1"


class GateKind(str, Enum):
    INIT0 = "Init0"
    HADAMARD = "Hadamard"
    CZ = "CZ"
    IDLE = "IdleMemory"
    MEASURE = "MeasureZ"

    @property
    def arity(self) -> int:
        return 2 if self is GateKind.CZ else 1


class StabilizerType(str, Enum):
    Z = "Z"
    X = "X"


ONE_QUBIT_LABELS = ("X", "Y", "Z")
TWO_QUBIT_LABELS = tuple(a + b for a in "IXYZ" for b in "IXYZ" if a + b != "II")

LEGAL_LABELS: Mapping[GateKind, tuple[str, ...]] = MappingProxyType({
    GateKind.INIT0: ("X",),
    GateKind.MEASURE: ("X",),
    GateKind.HADAMARD: ONE_QUBIT_LABELS,
    GateKind.IDLE: ONE_QUBIT_LABELS,
    GateKind.CZ: TWO_QUBIT_LABELS,
})


class CircuitError(ValueError):
    """Raised for malformed circuits, schedules or error models."""


def _kind(value) -> GateKind:
    try:
        return value if isinstance(value, GateKind) else GateKind(value)
    except ValueError:
        raise CircuitError(f"unknown gate kind {value!r}") from None


@dataclass(frozen=True)
class GateErrorModel:
    """Stochastic Pauli channel of one gate: mutually exclusive terms, label -> probability.

    For ``MeasureZ`` the single ``X`` term flips the reported bit; for ``Init0``
    it prepares |1> instead of |0>. All other terms act after the ideal gate.
    """

    kind: GateKind
    terms: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        kind = _kind(self.kind)
        legal = LEGAL_LABELS[kind]
        clean = {}
        for label, prob in dict(self.terms).items():
            if label not in legal:
                raise CircuitError(f"label {label!r} is not legal for {kind.value}")
            prob = float(prob)
            if not prob >= 0.0:
                raise CircuitError(f"negative probability {prob} for {kind.value}({label})")
            clean[label] = prob
        if sum(clean.values()) > 1.0 + 1e-12:
            raise CircuitError(f"{kind.value} term probabilities sum above 1")
        ordered = {label: clean[label] for label in legal if label in clean}
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "terms", MappingProxyType(ordered))

    @classmethod
    def depolarizing(cls, kind, p: float) -> "GateErrorModel":
        """Equal weight on every legal label, total probability ``p``."""
        kind = _kind(kind)
        labels = LEGAL_LABELS[kind]
        return cls(kind, {label: p / len(labels) for label in labels})

    @classmethod
    def zero(cls, kind) -> "GateErrorModel":
        return cls(_kind(kind), {})

    @property
    def total(self) -> float:
        return float(sum(self.terms.values()))

    def probability(self, label: str) -> float:
        if label not in LEGAL_LABELS[self.kind]:
            raise CircuitError(f"label {label!r} is not legal for {self.kind.value}")
        return self.terms.get(label, 0.0)

    def nonzero(self) -> list[tuple[str, float]]:
        return [(label, p) for label, p in self.terms.items() if p > 0.0]

    def to_dict(self) -> dict[str, float]:
        return dict(self.terms)

    def __eq__(self, other):
        if not isinstance(other, GateErrorModel):
            return NotImplemented
        return self.kind is other.kind and dict(self.terms) == dict(other.terms)

    def __hash__(self):
        return hash((self.kind, tuple(self.terms.items())))


def depolarizing_models(rates) -> dict[GateKind, GateErrorModel]:
    """Per-kind depolarizing models from a scalar rate or a ``{kind: rate}`` mapping."""
    if isinstance(rates, Mapping):
        return {_kind(k): GateErrorModel.depolarizing(k, p) for k, p in rates.items()}
    return {kind: GateErrorModel.depolarizing(kind, float(rates)) for kind in GateKind}


@dataclass(frozen=True)
class GateInstance:
    id: str
    kind: GateKind
    qubits: tuple[int, ...]
    layer: int
    error_model: GateErrorModel
    # number of idle time steps consolidated into one IdleMemory gate
    slots: int = 1

    def __post_init__(self):
        kind = _kind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "qubits", tuple(int(q) for q in self.qubits))
        if len(self.qubits) != kind.arity:
            raise CircuitError(f"gate {self.id}: {kind.value} acts on {kind.arity} qubit(s)")
        if kind is GateKind.CZ and self.qubits[0] >= self.qubits[1]:
            raise CircuitError(f"gate {self.id}: CZ operands must be ordered by qubit index")
        if self.error_model.kind is not kind:
            raise CircuitError(f"gate {self.id}: error model kind {self.error_model.kind.value}")
        if self.slots < 1:
            raise CircuitError(f"gate {self.id}: slots must be >= 1")


@dataclass(frozen=True)
class CorrelatedChannel:
    """A multi-qubit Pauli firing with ``probability`` once per period, outside any gate.

    Used to emulate correlated error processes that per-gate models cannot express.
    """

    qubits: tuple[int, ...]
    pauli: str
    probability: float
    layer: int

    def __post_init__(self):
        object.__setattr__(self, "qubits", tuple(int(q) for q in self.qubits))
        if len(self.pauli) != len(self.qubits) or set(self.pauli) - set("IXYZ"):
            raise CircuitError(f"bad correlated Pauli {self.pauli!r} on {self.qubits}")
        if not 0.0 <= self.probability <= 1.0:
            raise CircuitError("correlated channel probability outside [0, 1]")


@dataclass(frozen=True)
class Circuit:
    """One period of a cyclic error-detection schedule.

    Layers are interpreted modulo ``layers_per_period``. Measurement round ``t`` is
    the MeasureZ executed in period ``t``.
    """

    name: str
    num_qubits: int
    data_qubits: tuple[int, ...]
    measure_qubits: tuple[tuple[int, StabilizerType], ...]
    layers_per_period: int
    gates: tuple[GateInstance, ...]
    boundary: Mapping[int, tuple[str, ...]] = field(default_factory=dict)
    correlated: tuple[CorrelatedChannel, ...] = ()
    schedule_notes: str = ""

    def __post_init__(self):
        object.__setattr__(self, "data_qubits", tuple(self.data_qubits))
        object.__setattr__(
            self, "measure_qubits",
            tuple((int(q), StabilizerType(t)) for q, t in self.measure_qubits),
        )
        object.__setattr__(
            self, "gates", tuple(sorted(self.gates, key=lambda g: (g.layer, g.qubits, g.id)))
        )
        object.__setattr__(
            self, "boundary",
            MappingProxyType({int(q): tuple(s) for q, s in sorted(dict(self.boundary).items())}),
        )
        object.__setattr__(self, "correlated", tuple(self.correlated))
        self.validate()

    # -- lookups -----------------------------------------------------------
    @property
    def num_data(self) -> int:
        return len(self.data_qubits)

    @property
    def num_measure(self) -> int:
        return len(self.measure_qubits)

    @property
    def gate_ids(self) -> list[str]:
        return [g.id for g in self.gates]

    def gate(self, gate_id: str) -> GateInstance:
        for g in self.gates:
            if g.id == gate_id:
                return g
        raise KeyError(f"unknown gate id {gate_id!r}")

    def measure_index(self, qubit: int) -> int:
        """Row of ``qubit`` in measurement records."""
        for i, (q, _) in enumerate(self.measure_qubits):
            if q == qubit:
                return i
        raise KeyError(f"qubit {qubit} is not a measure qubit")

    def stabilizer_type(self, qubit: int) -> StabilizerType:
        return self.measure_qubits[self.measure_index(qubit)][1]

    def measure_qubits_of(self, stype) -> list[int]:
        stype = StabilizerType(stype)
        return [q for q, t in self.measure_qubits if t is stype]

    def position(self, qubit: int) -> int:
        """Spatial cell of a measure qubit among measure qubits of the same type."""
        return self.measure_qubits_of(self.stabilizer_type(qubit)).index(qubit)

    def is_boundary(self, qubit: int) -> bool:
        return bool(self.boundary.get(qubit))

    @property
    def stabilizer_types(self) -> list[StabilizerType]:
        seen = []
        for _, t in self.measure_qubits:
            if t not in seen:
                seen.append(t)
        return seen

    # -- validation --------------------------------------------------------
    def validate(self) -> None:
        ids = [g.id for g in self.gates]
        dup = [i for i, n in Counter(ids).items() if n > 1]
        if dup:
            raise CircuitError(f"duplicate gate ids {dup}")
        if self.layers_per_period < 1:
            raise CircuitError("layers_per_period must be >= 1")
        used: dict[int, set[int]] = {}
        for g in self.gates:
            if not 0 <= g.layer < self.layers_per_period:
                raise CircuitError(f"gate {g.id} layer {g.layer} outside the period")
            for q in g.qubits:
                if not 0 <= q < self.num_qubits:
                    raise CircuitError(f"gate {g.id} touches unknown qubit {q}")
                if q in used.setdefault(g.layer, set()):
                    raise CircuitError(f"qubit {q} used twice in layer {g.layer}")
                used[g.layer].add(q)
        measure = [q for q, _ in self.measure_qubits]
        if set(measure) & set(self.data_qubits):
            raise CircuitError("a qubit cannot be both data and measure")
        for q in measure:
            kinds = Counter(g.kind for g in self.gates if q in g.qubits)
            if kinds[GateKind.MEASURE] != 1 or kinds[GateKind.INIT0] != 1:
                raise CircuitError(f"measure qubit {q} needs one MeasureZ and one Init0 per period")
        for g in self.gates:
            if g.kind in (GateKind.MEASURE, GateKind.INIT0) and g.qubits[0] not in measure:
                raise CircuitError(f"{g.kind.value} gate {g.id} on a non-measure qubit")
        for ch in self.correlated:
            if not 0 <= ch.layer < self.layers_per_period:
                raise CircuitError("correlated channel layer outside the period")

    # -- model handling ----------------------------------------------------
    def error_models(self) -> dict[str, GateErrorModel]:
        return {g.id: g.error_model for g in self.gates}

    def with_models(self, models=None, *, overrides=None, correlated=None) -> "Circuit":
        """Copy with error models replaced per kind and/or per gate id."""
        by_kind = {_kind(k): m for k, m in (models or {}).items()}
        overrides = overrides or {}
        unknown = set(overrides) - set(self.gate_ids)
        if unknown:
            raise CircuitError(f"overrides for unknown gates {sorted(unknown)}")
        gates = []
        for g in self.gates:
            model = overrides.get(g.id, by_kind.get(g.kind, g.error_model))
            gates.append(replace(g, error_model=model))
        return replace(
            self, gates=tuple(gates),
            correlated=self.correlated if correlated is None else tuple(correlated),
        )

    def without_correlated(self) -> "Circuit":
        return replace(self, correlated=())

    def total_error_probability(self) -> float:
        return sum(g.error_model.total for g in self.gates)

    # -- serialization -----------------------------------------------------
    def to_json(self) -> dict:
        by_kind, by_gate = _split_models(self.gates)
        doc = {
            "schema": CIRCUIT_SCHEMA,
            "name": self.name,
            "num_qubits": self.num_qubits,
            "layers_per_period": self.layers_per_period,
            "data_qubits": list(self.data_qubits),
            "measure_qubits": [
                {"qubit": q, "type": t.value, "boundary": list(self.boundary.get(q, ()))}
                for q, t in self.measure_qubits
            ],
            "gates": [
                {"id": g.id, "kind": g.kind.value, "qubits": list(g.qubits), "layer": g.layer,
                 "slots": g.slots}
                for g in self.gates
            ],
            "error_models": {
                "by_kind": {k.value: m.to_dict() for k, m in by_kind.items()},
                "by_gate": {gid: m.to_dict() for gid, m in by_gate.items()},
                "correlated": [_channel_to_dict(ch) for ch in self.correlated],
            },
            "schedule_notes": self.schedule_notes,
        }
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "Circuit":
        if doc.get("schema") != CIRCUIT_SCHEMA:
            raise CircuitError(f"expected schema {CIRCUIT_SCHEMA}, got {doc.get('schema')!r}")
        models = doc.get("error_models", {})
        by_kind = {_kind(k): GateErrorModel(k, v) for k, v in models.get("by_kind", {}).items()}
        by_gate = models.get("by_gate", {})
        gates = []
        for g in doc["gates"]:
            kind = _kind(g["kind"])
            if g["id"] in by_gate:
                model = GateErrorModel(kind, by_gate[g["id"]])
            elif kind in by_kind:
                model = by_kind[kind]
            else:
                raise CircuitError(f"no error model for gate {g['id']} ({kind.value})")
            gates.append(GateInstance(g["id"], kind, tuple(g["qubits"]), int(g["layer"]),
                                      model, int(g.get("slots", 1))))
        return cls(
            name=doc["name"],
            num_qubits=int(doc["num_qubits"]),
            data_qubits=tuple(doc["data_qubits"]),
            measure_qubits=tuple((m["qubit"], m["type"]) for m in doc["measure_qubits"]),
            layers_per_period=int(doc["layers_per_period"]),
            gates=tuple(gates),
            boundary={m["qubit"]: tuple(m["boundary"]) for m in doc["measure_qubits"]
                      if m.get("boundary")},
            correlated=tuple(_channel_from_dict(c) for c in models.get("correlated", [])),
            schedule_notes=doc.get("schedule_notes", ""),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "Circuit":
        return cls.from_json(json.loads(text))

    def structure_hash(self) -> str:
        """Hash of the schedule alone (qubits, gates, layers), independent of error models."""
        doc = self.to_json()
        doc.pop("error_models")
        doc.pop("schedule_notes")
        return _sha(doc)

    def model_fingerprint(self) -> str:
        return _sha({"models": self.to_json()["error_models"]})


def _sha(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _split_models(gates):
    """Pick per-kind defaults when every gate of a kind agrees; otherwise per-gate entries."""
    by_kind, by_gate = {}, {}
    for kind in GateKind:
        members = [g for g in gates if g.kind is kind]
        if not members:
            continue
        if all(g.error_model == members[0].error_model for g in members):
            by_kind[kind] = members[0].error_model
        else:
            for g in members:
                by_gate[g.id] = g.error_model
    return by_kind, by_gate


def _channel_to_dict(ch: CorrelatedChannel) -> dict:
    return {"qubits": list(ch.qubits), "pauli": ch.pauli, "probability": ch.probability,
            "layer": ch.layer}


def _channel_from_dict(d: Mapping) -> CorrelatedChannel:
    return CorrelatedChannel(tuple(d["qubits"]), d["pauli"], float(d["probability"]),
                             int(d["layer"]))


# -- error model documents ---------------------------------------------------

def models_to_json(by_kind=None, by_gate=None, correlated=(), **extra) -> dict:
    """``errormodel.v1`` document: label -> probability maps keyed by kind or gate id."""
    doc = {
        "schema": ERRORMODEL_SCHEMA,
        "by_kind": {_kind(k).value: dict(m.terms) for k, m in (by_kind or {}).items()},
        "by_gate": {gid: dict(m.terms) for gid, m in (by_gate or {}).items()},
        "correlated": [_channel_to_dict(ch) for ch in correlated],
    }
    doc.update(extra)
    return doc


def models_from_json(doc: Mapping, circuit: Circuit | None = None):
    """Parse an ``errormodel.v1`` document into ``(by_kind, by_gate, correlated)``.

    Gate-id entries need ``circuit`` to resolve their kind.
    """
    if doc.get("schema") != ERRORMODEL_SCHEMA:
        raise CircuitError(f"expected schema {ERRORMODEL_SCHEMA}, got {doc.get('schema')!r}")
    by_kind = {_kind(k): GateErrorModel(k, v) for k, v in doc.get("by_kind", {}).items()}
    by_gate = {}
    entries = dict(doc.get("by_gate", {}))
    if circuit is not None:
        entries.update(doc.get("by_circuit", {}).get(circuit.name, {}).get("by_gate", {}))
    for gid, terms in entries.items():
        if circuit is None:
            raise CircuitError("per-gate error models need a circuit to resolve gate kinds")
        try:
            kind = circuit.gate(gid).kind
        except KeyError:
            continue  # entry for a gate of another circuit
        by_gate[gid] = GateErrorModel(kind, terms)
    channels = list(doc.get("correlated", []))
    if circuit is not None:
        channels += doc.get("by_circuit", {}).get(circuit.name, {}).get("correlated", [])
    correlated = tuple(_channel_from_dict(c) for c in channels)
    return by_kind, by_gate, correlated


def apply_models_document(circuit: Circuit, doc: Mapping) -> Circuit:
    by_kind, by_gate, correlated = models_from_json(doc, circuit)
    return circuit.with_models(by_kind, overrides=by_gate, correlated=correlated)


# -- builders ----------------------------------------------------------------

def _require(models, kinds: Iterable[GateKind]) -> dict[GateKind, GateErrorModel]:
    models = {_kind(k): m for k, m in models.items()}
    missing = [k.value for k in kinds if k not in models]
    if missing:
        raise CircuitError(f"missing error model for gate kind(s) {missing}")
    for k, m in models.items():
        if m.kind is not k:
            raise CircuitError(f"model registered under {k.value} has kind {m.kind.value}")
    return models


def build_repetition_circuit(distance: int, models) -> Circuit:
    """Distance-``d`` repetition code measuring Z_i Z_{i+1} with interleaved measure qubits.

    Qubit ``2i`` is data qubit ``D(i+1)``, qubit ``2k+1`` the measure qubit between
    ``D(k+1)`` and ``D(k+2)``. A period runs, in layers::

        0  CZ(D_k, M_k)              CZ1, CZ3, ...
        1  CZ(M_k, D_k+1)            CZ2, CZ4, ...
        2  H on measure (H1..),  consolidated idle on data (I1..)
        3  MeasureZ                  M1..
        4  Init0                     |0>1..
        5  H on measure (H_d..)

    so measurement round ``t`` belongs to period ``t`` and the Init0/H of layers 4-5
    prepare round ``t+1``. Gate ids for ``d=3`` coincide with the labelled circuit of
    the exhaustive error table.
    """
    if int(distance) != distance or distance < 2:
        raise CircuitError("distance must be an integer >= 2")
    d = int(distance)
    kinds = (GateKind.INIT0, GateKind.HADAMARD, GateKind.CZ, GateKind.IDLE, GateKind.MEASURE)
    models = _require(models, kinds)
    m = d - 1
    gates = []
    for k in range(m):
        mq = 2 * k + 1
        gates.append(GateInstance(f"CZ{2 * k + 1}", GateKind.CZ, (mq - 1, mq), 0, models[GateKind.CZ]))
        gates.append(GateInstance(f"CZ{2 * k + 2}", GateKind.CZ, (mq, mq + 1), 1, models[GateKind.CZ]))
        gates.append(GateInstance(f"H{k + 1}", GateKind.HADAMARD, (mq,), 2, models[GateKind.HADAMARD]))
        gates.append(GateInstance(f"M{k + 1}", GateKind.MEASURE, (mq,), 3, models[GateKind.MEASURE]))
        gates.append(GateInstance(f"|0>{k + 1}", GateKind.INIT0, (mq,), 4, models[GateKind.INIT0]))
        gates.append(GateInstance(f"H{m + k + 1}", GateKind.HADAMARD, (mq,), 5, models[GateKind.HADAMARD]))
    layers = 6
    for i in range(d):
        busy = {0} if i == 0 else {1} if i == d - 1 else {0, 1}
        gates.append(GateInstance(f"I{i + 1}", GateKind.IDLE, (2 * i,), 2,
                                  models[GateKind.IDLE], slots=layers - len(busy)))
    boundary = {}
    for k in range(m):
        sides = ()
        if k == 0:
            sides += ("left",)
        if k == m - 1:
            sides += ("right",)
        if sides:
            boundary[2 * k + 1] = sides
    return Circuit(
        name=f"repetition-d{d}",
        num_qubits=2 * d - 1,
        data_qubits=tuple(range(0, 2 * d - 1, 2)),
        measure_qubits=tuple((q, StabilizerType.Z) for q in range(1, 2 * d - 1, 2)),
        layers_per_period=layers,
        gates=tuple(gates),
        boundary=boundary,
        schedule_notes=(
            "period = [CZ(left data), CZ(right data), H + data idle, MeasureZ, Init0, H]; "
            "round t is measured in period t; data idles consolidated after the CZ layers"
        ),
    )


def build_parity_square_circuit(models) -> Circuit:
    """2x2 parity-check square: data D1=0, D2=2; Z-type measure qubit 1, X-type measure qubit 3.

    The Z-type gadget is the repetition-code ZZ gadget. The X-type gadget is the same
    CZ pair conjugated by Hadamards on both data qubits (H5/H6 before, H7/H8 after),
    i.e. CNOTs from the X-type measure qubit onto the data. Layers::

        0  CZ1(D1,mz)              H4(mx, prepares next XX round)
        1  CZ2(mz,D2)              I4(mx idle, 2 slots)
        2  H1(mz)  H5(D1) H6(D2)
        3  M1(mz)  CZ3(D1,mx)
        4  |0>1    CZ4(D2,mx)
        5  H3(mz)  H7(D1) H8(D2)   H2(mx)
        6  M2(mx)  I1(D1) I2(D2)   I3(mz idle, 2 slots)
        7  |0>2(mx)
    """
    kinds = (GateKind.INIT0, GateKind.HADAMARD, GateKind.CZ, GateKind.IDLE, GateKind.MEASURE)
    models = _require(models, kinds)
    cz, h, idle = models[GateKind.CZ], models[GateKind.HADAMARD], models[GateKind.IDLE]
    meas, init = models[GateKind.MEASURE], models[GateKind.INIT0]
    D1, MZ, D2, MX = 0, 1, 2, 3
    gates = (
        GateInstance("CZ1", GateKind.CZ, (D1, MZ), 0, cz),
        GateInstance("H4", GateKind.HADAMARD, (MX,), 0, h),
        GateInstance("CZ2", GateKind.CZ, (MZ, D2), 1, cz),
        GateInstance("I4", GateKind.IDLE, (MX,), 1, idle, slots=2),
        GateInstance("H1", GateKind.HADAMARD, (MZ,), 2, h),
        GateInstance("H5", GateKind.HADAMARD, (D1,), 2, h),
        GateInstance("H6", GateKind.HADAMARD, (D2,), 2, h),
        GateInstance("M1", GateKind.MEASURE, (MZ,), 3, meas),
        GateInstance("CZ3", GateKind.CZ, (D1, MX), 3, cz),
        GateInstance("|0>1", GateKind.INIT0, (MZ,), 4, init),
        GateInstance("CZ4", GateKind.CZ, (D2, MX), 4, cz),
        GateInstance("H3", GateKind.HADAMARD, (MZ,), 5, h),
        GateInstance("H7", GateKind.HADAMARD, (D1,), 5, h),
        GateInstance("H8", GateKind.HADAMARD, (D2,), 5, h),
        GateInstance("H2", GateKind.HADAMARD, (MX,), 5, h),
        GateInstance("M2", GateKind.MEASURE, (MX,), 6, meas),
        GateInstance("I1", GateKind.IDLE, (D1,), 6, idle, slots=4),
        GateInstance("I2", GateKind.IDLE, (D2,), 6, idle, slots=4),
        GateInstance("I3", GateKind.IDLE, (MZ,), 6, idle, slots=2),
        GateInstance("|0>2", GateKind.INIT0, (MX,), 7, init),
    )
    return Circuit(
        name="parity-square",
        num_qubits=4,
        data_qubits=(D1, D2),
        measure_qubits=((MZ, StabilizerType.Z), (MX, StabilizerType.X)),
        layers_per_period=8,
        gates=gates,
        boundary={MZ: ("left", "right"), MX: ("left", "right")},
        schedule_notes=(
            "ZZ gadget on qubit 1 in layers 0-5 (as in the repetition code); XX gadget on "
            "qubit 3 = ZZ gadget conjugated by data Hadamards H5-H8; data idles consolidated "
            "in layer 6 in the computational frame; measure idles consolidated"
        ),
    )
