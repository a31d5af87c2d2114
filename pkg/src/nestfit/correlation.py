"""Cross-nest and temporal correlations of detection events.

Cross-nest: for every isolated cluster in the conditioning nest, look at each
offset within the window and note which cluster (if any) of the other nest is
anchored there. Independent nests give conditionals equal to the marginal rate
of each pattern per round; a Pauli Y on a data qubit shows up as excess.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .circuit import Circuit, StabilizerType
from .extraction import ClusterPolicy, _event_chunks, iter_clusters
from .propagation import DetectionPattern
from .simulation import MeasurementRecord

NONE = ("none",)
CORR_SCHEMA = "correlation.v1"


def _label(cluster) -> tuple:
    return DetectionPattern(cluster).canonical().key()


def nest_clusters(record: MeasurementRecord, circuit: Circuit, stype,
                  policy: ClusterPolicy | None = None) -> tuple[list[tuple[tuple, int]], int]:
    """(canonical pattern, anchor round) of every usable cluster of one stabilizer type."""
    policy = policy or ClusterPolicy()
    qubits = circuit.measure_qubits_of(stype)
    if not qubits:
        raise ValueError(f"circuit {circuit.name} has no {StabilizerType(stype).value}-type checks")
    positions = {q: i for i, q in enumerate(qubits)}
    counter: dict = {}
    events = (e for chunk in _event_chunks(record, qubits) for e in chunk)
    out = [(_label(c), min(e.round for e in c))
           for c in iter_clusters(events, policy, positions, counter)]
    return out, counter.get("ignored", 0)


def _wilson(k: int, n: int, confidence: float) -> tuple[float, float]:
    ci = stats.binomtest(k, n).proportion_ci(confidence, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class CrossCorrelationReport:
    """``joint_counts[(target, given, offset)]``: clusters of the target nest anchored
    ``offset`` rounds after a cluster ``given`` of the conditioning nest (``NONE`` when
    nothing is anchored there)."""

    target: StabilizerType
    given: StabilizerType
    window: int
    rounds: int
    joint_counts: dict[tuple, int]
    given_counts: dict[tuple, int]
    target_rates: dict[tuple, float]
    confidence: float = 0.95

    @property
    def windows_examined(self) -> int:
        return sum(self.given_counts.values()) * (2 * self.window + 1)

    def conditional(self, a, b, offset) -> float | None:
        n = self.given_counts.get(b, 0)
        return self.joint_counts.get((a, b, offset), 0) / n if n else None

    def baseline(self, a) -> float:
        return self.target_rates.get(a, 0.0)

    def entries(self) -> list[dict]:
        """Every (target pattern, given pattern, offset) with conditional, baseline, excess, CI."""
        rows = []
        for b, n in sorted(self.given_counts.items()):
            if n == 0:
                continue
            for a in sorted(self.target_rates):
                for off in range(-self.window, self.window + 1):
                    k = self.joint_counts.get((a, b, off), 0)
                    base = self.baseline(a)
                    lo, hi = _wilson(k, n, self.confidence)
                    sd = np.sqrt(n * base * (1 - base))
                    rows.append({
                        "target": a, "given": b, "offset": off, "count": k, "given_count": n,
                        "conditional": k / n, "baseline": base, "excess": k / n - base,
                        "excess_interval": (lo - base, hi - base),
                        "z": float((k - n * base) / sd) if sd > 0 else 0.0,
                    })
        return rows

    def significant(self, alpha: float = 0.01) -> list[dict]:
        """Entries whose excess is significant after a Bonferroni correction."""
        rows = self.entries()
        if not rows:
            return []
        cut = stats.norm.isf(alpha / (2 * len(rows)))
        return [r for r in rows if abs(r["z"]) > cut]

    def coverage(self) -> float:
        """Fraction of entries whose excess interval contains zero."""
        rows = self.entries()
        if not rows:
            return float("nan")
        return float(np.mean([r["excess_interval"][0] <= 0 <= r["excess_interval"][1]
                              for r in rows]))

    def to_json(self) -> dict:
        def pat(k):
            return "none" if k == NONE else DetectionPattern(k).to_json()

        return {
            "schema": CORR_SCHEMA,
            "target": self.target.value,
            "given": self.given.value,
            "window": self.window,
            "rounds": self.rounds,
            "windows_examined": self.windows_examined,
            "joint_counts": [
                {"target": pat(a), "given": pat(b), "offset": off, "count": n}
                for (a, b, off), n in sorted(self.joint_counts.items(), key=lambda t: repr(t[0]))
            ],
            "entries": [
                {**{k: v for k, v in r.items() if k not in ("target", "given")},
                 "target": pat(r["target"]), "given": pat(r["given"]),
                 "excess_interval": list(r["excess_interval"])}
                for r in self.entries()
            ],
            "confidence": self.confidence,
        }


def cross_correlate(record: MeasurementRecord, circuit: Circuit, window: int = 2, *,
                    given=StabilizerType.X, policy: ClusterPolicy | None = None,
                    confidence: float = 0.95) -> CrossCorrelationReport:
    """Conditional cluster statistics of one nest given clusters of the other."""
    if record.circuit_hash != circuit.structure_hash():
        raise ValueError("record does not come from this circuit")
    if window < 0:
        raise ValueError("window must be >= 0")
    given = StabilizerType(given)
    target = StabilizerType.Z if given is StabilizerType.X else StabilizerType.X
    for t in (given, target):
        if not circuit.measure_qubits_of(t):
            raise ValueError(f"circuit {circuit.name} lacks {t.value}-type measure qubits")
    tgt, _ = nest_clusters(record, circuit, target, policy)
    cond, _ = nest_clusters(record, circuit, given, policy)
    by_round: dict[int, list[tuple]] = {}
    for lab, r in tgt:
        by_round.setdefault(r, []).append(lab)
    joint: Counter = Counter()
    given_counts: Counter = Counter()
    for b, r in cond:
        given_counts[b] += 1
        for off in range(-window, window + 1):
            hits = by_round.get(r + off)
            if hits:
                for a in hits:
                    joint[(a, b, off)] += 1
            else:
                joint[(NONE, b, off)] += 1
    rates = {a: n / record.rounds for a, n in Counter(lab for lab, _ in tgt).items()}
    return CrossCorrelationReport(target, given, int(window), record.rounds, dict(joint),
                                  dict(given_counts), rates, confidence)


@dataclass
class AutocorrelationReport:
    """Per measure qubit: P(event at t+k | event at t) for k = 1..max_lag against the rate."""

    max_lag: int
    rounds: int
    per_qubit: dict[int, list[dict]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"max_lag": self.max_lag, "rounds": self.rounds,
                "per_qubit": {str(q): v for q, v in self.per_qubit.items()}}


def temporal_autocorrelate(record: MeasurementRecord, max_lag: int = 3, *,
                           confidence: float = 0.95) -> AutocorrelationReport:
    """Event autocorrelation per measure qubit; absent (``None``) where no events exist.

    Classes spanning two rounds (measurement errors and the like) correlate lag 1
    by construction; larger lags are independent under memoryless models.
    """
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    ev = record.bits.copy()
    ev[:, 1:] ^= record.bits[:, :-1]
    rep = AutocorrelationReport(int(max_lag), record.rounds)
    for i, q in enumerate(record.measure_qubits):
        e = ev[i].astype(np.int64)
        rows = []
        for k in range(1, max_lag + 1):
            if k >= len(e):
                rows.append({"lag": k, "conditional": None, "baseline": None, "excess": None,
                             "interval": None, "count": 0, "given": 0})
                continue
            head, tail = e[:-k], e[k:]
            n = int(head.sum())
            base = float(tail.mean())
            if n == 0:
                rows.append({"lag": k, "conditional": None, "baseline": base, "excess": None,
                             "interval": None, "count": 0, "given": 0})
                continue
            both = int((head & tail).sum())
            lo, hi = _wilson(both, n, confidence)
            rows.append({"lag": k, "conditional": both / n, "baseline": base,
                         "excess": both / n - base, "interval": [lo - base, hi - base],
                         "count": both, "given": n})
        rep.per_qubit[int(q)] = rows
    return rep


def inject_bursts(record: MeasurementRecord, qubit: int, rate: float, length: int = 3,
                  seed: int = 0) -> MeasurementRecord:
    """Copy of ``record`` where bursts start on ``qubit`` with probability ``rate`` per round
    and randomize its next ``length`` results, as a faulty reset would."""
    if seed is None:
        raise ValueError("seed is required")
    rng = np.random.Generator(np.random.Philox(seed))
    bits = record.bits.copy()
    row = record.measure_qubits.index(qubit)
    starts = np.flatnonzero(rng.random(record.rounds) < rate)
    for s in starts:
        stop = min(record.rounds, s + length)
        bits[row, s:stop] ^= rng.integers(0, 2, stop - s, dtype=np.uint8)
    return MeasurementRecord(record.circuit_name, record.circuit_hash, record.measure_qubits,
                             bits, record.seed, record.model_fingerprint, record.rng)


def dumps_report(report) -> str:
    return json.dumps(report.to_json(), indent=2)


class CrossNestCorrelator(BaseEstimator):
    """Fits a cross-nest report on a record; ``predict`` lists significant excess entries."""

    def __init__(self, circuit=None, window=2, given="X", alpha=0.01):
        self.circuit = circuit
        self.window = window
        self.given = given
        self.alpha = alpha

    def fit(self, X, y=None):
        if self.circuit is None:
            raise ValueError("CrossNestCorrelator needs a circuit")
        self.report_ = cross_correlate(X, self.circuit, self.window, given=self.given)
        return self

    def predict(self, X=None):
        check_is_fitted(self, "report_")
        return self.report_.significant(self.alpha)
