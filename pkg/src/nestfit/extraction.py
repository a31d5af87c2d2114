"""Detection events, isolated clusters, class counting and likelihood deconvolution.

Two estimators share one result type. The counting estimator streams once over the
record, keeps isolated clusters of at most ``max_cluster_size`` events, classifies
them against the nest and divides by the number of rounds. The deconvolution
estimator fits the per-anchor probability of every class by maximum likelihood
over the whole event stream, so overlapping clusters are not thrown away.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numba
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .circuit import Circuit, StabilizerType
from .nest import Nest
from .propagation import DetectionEvent, DetectionPattern
from .simulation import MeasurementRecord

ESTNEST_SCHEMA = "estnest.v1"
TIME_EDGE = "time-edge"
UNMATCHED = "unmatched"
_CHUNK = 1 << 16
_BLOCK = 1 << 12
MAX_STATE_BITS = 16


class CircuitMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ClusterPolicy:
    """Two events are neighbours when they are closer than ``isolation_radius``.

    With the default (2, 3) that means at most one cell apart and at most two
    rounds apart, strictly more than any single-error footprint.
    """

    isolation_radius: tuple[int, int] = (2, 3)
    max_cluster_size: int = 2

    def __post_init__(self):
        space, time = (int(v) for v in self.isolation_radius)
        if space < 1 or time < 1:
            raise ValueError("isolation_radius components must be >= 1")
        if self.max_cluster_size < 1:
            raise ValueError("max_cluster_size must be >= 1")
        object.__setattr__(self, "isolation_radius", (space, time))

    def adjacent(self, a: tuple[int, int], b: tuple[int, int]) -> bool:
        """``a`` and ``b`` are (round, cell)."""
        space, time = self.isolation_radius
        return abs(a[0] - b[0]) < time and abs(a[1] - b[1]) < space

    def to_json(self) -> dict:
        return {"isolation_radius": list(self.isolation_radius),
                "max_cluster_size": self.max_cluster_size}

    @classmethod
    def from_json(cls, d) -> "ClusterPolicy":
        return cls(tuple(d["isolation_radius"]), int(d["max_cluster_size"]))


# -- detection events ------------------------------------------------------------

def event_matrix(bits: np.ndarray) -> np.ndarray:
    """``bits`` (rows x rounds) to events: bit(r) xor bit(r-1), bit(-1) = 0."""
    bits = np.asarray(bits, np.uint8)
    if bits.ndim == 1:
        bits = bits[None, :]
    ev = bits.copy()
    ev[:, 1:] ^= bits[:, :-1]
    return ev


def detect_events(record: MeasurementRecord, qubits=None) -> list[DetectionEvent]:
    """Round-sorted detection events of ``record`` (optionally only some measure qubits)."""
    if record.rounds < 1:
        raise ValueError("record is empty")
    return [e for chunk in _event_chunks(record, qubits) for e in chunk]


def _event_chunks(record: MeasurementRecord, qubits=None, chunk: int = _CHUNK):
    qubits = tuple(record.measure_qubits if qubits is None else qubits)
    rows = [record.measure_qubits.index(q) for q in qubits]
    prev = np.zeros(len(rows), np.uint8)
    for start in range(0, record.rounds, chunk):
        block = record.bits[rows, start:start + chunk]
        ev = block.copy()
        ev[:, 0] ^= prev
        ev[:, 1:] ^= block[:, :-1]
        prev = block[:, -1].copy()
        rr, cc = np.nonzero(ev.T)
        yield [DetectionEvent(int(start + r), qubits[c]) for r, c in zip(rr, cc)]


# -- clustering -------------------------------------------------------------------

@dataclass
class ClusterResult:
    clusters: list[tuple[DetectionEvent, ...]]
    ignored: int


class _Clusterer:
    """Incremental connected components over round-sorted events; memory ~ window."""

    def __init__(self, policy: ClusterPolicy, positions):
        self.policy = policy
        self.positions = positions
        self.open: list[list[DetectionEvent]] = []
        self.ignored = 0
        self.last_round = None

    def _cell(self, e):
        return self.positions[e.measure_qubit]

    def push(self, e: DetectionEvent) -> list[tuple[DetectionEvent, ...]]:
        if self.last_round is not None and e.round < self.last_round:
            raise ValueError("events must be sorted by round")
        self.last_round = e.round
        horizon = e.round - (self.policy.isolation_radius[1] - 1)
        done = [c for c in self.open if c[-1].round < horizon]
        self.open = [c for c in self.open if c[-1].round >= horizon]
        here = (e.round, self._cell(e))
        merged = [e]
        keep = []
        for c in self.open:
            if any(self.policy.adjacent(here, (x.round, self._cell(x))) for x in c):
                merged.extend(c)
            else:
                keep.append(c)
        merged.sort()
        keep.append(merged)
        self.open = keep
        return self._emit(done)

    def flush(self) -> list[tuple[DetectionEvent, ...]]:
        done, self.open = self.open, []
        return self._emit(done)

    def _emit(self, done):
        out = []
        for c in done:
            if len(c) > self.policy.max_cluster_size:
                self.ignored += 1
            else:
                out.append(tuple(sorted(c)))
        return out


def _default_positions(events) -> dict[int, int]:
    return {q: i for i, q in enumerate(sorted({e.measure_qubit for e in events}))}


def iter_clusters(events: Iterable[DetectionEvent], policy: ClusterPolicy, positions,
                  counter: dict | None = None) -> Iterator[tuple[DetectionEvent, ...]]:
    """Stream usable clusters; ``counter['ignored']`` is updated at the end."""
    cl = _Clusterer(policy, positions)
    for e in events:
        yield from cl.push(DetectionEvent(*e))
    yield from cl.flush()
    if counter is not None:
        counter["ignored"] = counter.get("ignored", 0) + cl.ignored


def cluster_events(events, policy: ClusterPolicy | None = None, positions=None) -> ClusterResult:
    """Connected components of round-sorted events under the policy's adjacency.

    ``positions`` maps measure qubit to spatial cell; by default the qubits seen
    are ranked in index order.
    """
    policy = policy or ClusterPolicy()
    events = [DetectionEvent(*e) for e in events]
    if positions is None:
        positions = _default_positions(events)
    counter: dict = {}
    clusters = list(iter_clusters(events, policy, positions, counter))
    return ClusterResult(clusters, counter.get("ignored", 0))


# -- classification ---------------------------------------------------------------

def classify_cluster(cluster, nest: Nest, circuit: Circuit | None = None):
    """Canonical class pattern of a usable cluster, ``TIME_EDGE`` or ``UNMATCHED``.

    A lone event on an edge-adjacent measure qubit is that qubit's boundary class.
    A lone interior event can only pair with the start or end of the record.
    """
    cluster = tuple(DetectionEvent(*e) for e in cluster)
    if not cluster:
        raise ValueError("empty cluster")
    if len(cluster) > 2:
        raise ValueError(f"cluster of {len(cluster)} events cannot be classified")
    pattern = DetectionPattern(cluster).canonical()
    if len(cluster) == 1:
        q = cluster[0].measure_qubit
        edge = circuit.is_boundary(q) if circuit is not None else nest.lookup(pattern) is not None
        if not edge:
            return TIME_EDGE
    cls = nest.lookup(pattern)
    return cls.pattern if cls is not None else UNMATCHED


# -- estimates --------------------------------------------------------------------

@dataclass
class EstimatedNest:
    """Counting results for one nest, optionally with a deconvolved fit.

    ``probabilities`` are counts / rounds_observed. ``deconvolved`` holds the
    likelihood fit: per-class probabilities and their covariance, in class order.
    """

    circuit_name: str
    circuit_hash: str
    stabilizer_type: StabilizerType
    measure_qubits: tuple[int, ...]
    class_keys: tuple[tuple, ...]
    counts: dict[tuple, int]
    rounds_observed: int
    ignored_clusters: int = 0
    unmatched: int = 0
    time_edge: int = 0
    total_clusters: int = 0
    unmatched_patterns: Counter = field(default_factory=Counter)
    policy: ClusterPolicy = field(default_factory=ClusterPolicy)
    deconvolved: dict | None = None
    records: int = 1

    @property
    def probabilities(self) -> dict[tuple, float]:
        n = self.rounds_observed
        return {k: (c / n if n else 0.0) for k, c in self.counts.items()}

    @property
    def ignored_fraction(self) -> float:
        return self.ignored_clusters / self.total_clusters if self.total_clusters else 0.0

    def counted(self) -> tuple[np.ndarray, np.ndarray]:
        """Counting estimate in class order with binomial variances."""
        n = max(self.rounds_observed, 1)
        p = np.array([self.counts.get(k, 0) / n for k in self.class_keys])
        return p, p * (1 - p) / n

    def estimate(self, method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
        """(probabilities, covariance) in class order.

        ``auto`` prefers the deconvolved fit and falls back to counting.
        """
        if method not in ("auto", "count", "deconvolve"):
            raise ValueError(f"unknown method {method!r}")
        if method != "count" and self.deconvolved is not None:
            d = self.deconvolved
            return np.asarray(d["probabilities"], float), np.asarray(d["covariance"], float)
        if method == "deconvolve":
            raise ValueError("no deconvolved estimate available")
        p, var = self.counted()
        return p, np.diag(var)

    def to_json(self) -> dict:
        doc = {
            "schema": ESTNEST_SCHEMA,
            "circuit": self.circuit_name,
            "circuit_hash": self.circuit_hash,
            "stabilizer_type": self.stabilizer_type.value,
            "measure_qubits": list(self.measure_qubits),
            "rounds": self.rounds_observed,
            "records": self.records,
            "policy": self.policy.to_json(),
            "classes": [
                {"pattern": DetectionPattern(k).to_json(), "count": int(self.counts.get(k, 0)),
                 "probability": self.probabilities.get(k, 0.0)}
                for k in self.class_keys
            ],
            "ignored": self.ignored_clusters,
            "unmatched": self.unmatched,
            "unmatched_patterns": [
                {"pattern": DetectionPattern(k).to_json(), "count": n}
                for k, n in sorted(self.unmatched_patterns.items())
            ],
            "time_edge": self.time_edge,
            "total_clusters": self.total_clusters,
        }
        if self.deconvolved is not None:
            d = self.deconvolved
            doc["deconvolved"] = {
                "probabilities": [float(v) for v in d["probabilities"]],
                "covariance": np.asarray(d["covariance"], float).tolist(),
                "loglik": float(d["loglik"]),
                "iterations": int(d["iterations"]),
                "anomalies": int(d["anomalies"]),
            }
        return doc

    @classmethod
    def from_json(cls, doc) -> "EstimatedNest":
        if doc.get("schema") != ESTNEST_SCHEMA:
            raise ValueError(f"expected schema {ESTNEST_SCHEMA}, got {doc.get('schema')!r}")
        keys = tuple(DetectionPattern.from_json(c["pattern"]).key() for c in doc["classes"])
        counts = {k: int(c["count"]) for k, c in zip(keys, doc["classes"])}
        unmatched = Counter({DetectionPattern.from_json(u["pattern"]).key(): int(u["count"])
                             for u in doc.get("unmatched_patterns", [])})
        dec = doc.get("deconvolved")
        if dec is not None:
            dec = dict(dec)
            dec["probabilities"] = np.asarray(dec["probabilities"], float)
            dec["covariance"] = np.asarray(dec["covariance"], float)
        return cls(doc["circuit"], doc["circuit_hash"], StabilizerType(doc["stabilizer_type"]),
                   tuple(doc["measure_qubits"]), keys, counts, int(doc["rounds"]),
                   int(doc["ignored"]), int(doc["unmatched"]), int(doc.get("time_edge", 0)),
                   int(doc.get("total_clusters", 0)), unmatched,
                   ClusterPolicy.from_json(doc["policy"]) if "policy" in doc else ClusterPolicy(),
                   dec, int(doc.get("records", 1)))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _check_record(record: MeasurementRecord, nest: Nest):
    if record.circuit_hash != nest.circuit_hash:
        raise CircuitMismatch(
            f"record circuit {record.circuit_hash[:12]} does not match nest circuit "
            f"{nest.circuit_hash[:12]} ({nest.circuit_name})")
    missing = set(nest.measure_qubits) - set(record.measure_qubits)
    if missing:
        raise CircuitMismatch(f"record lacks measure qubits {sorted(missing)}")


def estimate_nest(record: MeasurementRecord, nest: Nest, policy: ClusterPolicy | None = None,
                  *, circuit: Circuit | None = None, deconvolve: bool = True,
                  **fit_options) -> EstimatedNest:
    """Count isolated clusters per class in one streaming pass over ``record``.

    With ``deconvolve`` the likelihood fit of :func:`deconvolve_nest` is attached.
    """
    policy = policy or ClusterPolicy()
    _check_record(record, nest)
    if record.rounds < 1:
        raise ValueError("record is empty")
    if circuit is not None and circuit.structure_hash() != nest.circuit_hash:
        raise CircuitMismatch("circuit does not match nest")
    positions = {q: i for i, q in enumerate(nest.measure_qubits)}
    keys = tuple(c.pattern.key() for c in nest.classes)
    counts = dict.fromkeys(keys, 0)
    unmatched: Counter = Counter()
    time_edge = usable = 0
    counter: dict = {}
    events = (e for chunk in _event_chunks(record, nest.measure_qubits) for e in chunk)
    for cluster in iter_clusters(events, policy, positions, counter):
        usable += 1
        if len(cluster) > 2:
            # only reachable with max_cluster_size > 2
            unmatched[DetectionPattern(cluster).canonical().key()] += 1
            continue
        label = classify_cluster(cluster, nest, circuit)
        if label == TIME_EDGE:
            time_edge += 1
        elif label == UNMATCHED:
            unmatched[DetectionPattern(cluster).canonical().key()] += 1
        else:
            counts[label.key()] += 1
    ignored = counter.get("ignored", 0)
    est = EstimatedNest(nest.circuit_name, nest.circuit_hash, nest.stabilizer_type,
                        nest.measure_qubits, keys, counts, record.rounds, ignored,
                        sum(unmatched.values()), time_edge, usable + ignored, unmatched, policy)
    if deconvolve:
        est.deconvolved = deconvolve_nest(record, nest, **fit_options)
    return est


def merge_estimates(estimates: list[EstimatedNest]) -> EstimatedNest:
    """Combine shards: counts add, deconvolved fits combine by inverse covariance."""
    if not estimates:
        raise ValueError("nothing to merge")
    first = estimates[0]
    for e in estimates[1:]:
        if e.circuit_hash != first.circuit_hash or e.class_keys != first.class_keys:
            raise CircuitMismatch("estimates come from different nests")
    counts = {k: sum(e.counts.get(k, 0) for e in estimates) for k in first.class_keys}
    unmatched = sum((e.unmatched_patterns for e in estimates), Counter())
    merged = EstimatedNest(
        first.circuit_name, first.circuit_hash, first.stabilizer_type, first.measure_qubits,
        first.class_keys, counts, sum(e.rounds_observed for e in estimates),
        sum(e.ignored_clusters for e in estimates), sum(e.unmatched for e in estimates),
        sum(e.time_edge for e in estimates), sum(e.total_clusters for e in estimates),
        unmatched, first.policy, None, sum(e.records for e in estimates))
    if all(e.deconvolved is not None for e in estimates):
        info = sum(np.linalg.pinv(e.deconvolved["covariance"]) for e in estimates)
        cov = np.linalg.pinv(info)
        vec = sum(np.linalg.pinv(e.deconvolved["covariance"]) @ e.deconvolved["probabilities"]
                  for e in estimates)
        merged.deconvolved = {
            "probabilities": cov @ vec, "covariance": cov,
            "loglik": sum(e.deconvolved["loglik"] for e in estimates),
            "iterations": max(e.deconvolved["iterations"] for e in estimates),
            "anomalies": sum(e.deconvolved["anomalies"] for e in estimates),
        }
    return merged


# -- likelihood deconvolution ------------------------------------------------------
#
# Hidden state at the start of round r: the detection bits already owed to rounds
# r .. r+S-1 by classes anchored earlier (m*S bits, m detectors, span S). Every class
# anchored at r toggles its mask with its probability; then round r is observed and
# the state shifts by one round. Forward/backward sweeps give the expected number of
# firings per class, which is the EM update.

@numba.njit(cache=True, nogil=True)
def _stages(alpha, masks, p, stage, npend):
    ns = stage.shape[1]
    for s in range(ns):
        stage[0, s] = alpha[s] if s < npend else 0.0
    for k in range(masks.shape[0]):
        mk = masks[k]
        pk = p[k]
        for s in range(ns):
            stage[k + 1, s] = (1.0 - pk) * stage[k, s] + pk * stage[k, s ^ mk]


@numba.njit(cache=True, nogil=True)
def _observe(last, o, m, out):
    lowmask = (1 << m) - 1
    out[:] = 0.0
    for s in range(last.shape[0]):
        if (s & lowmask) == o:
            out[s >> m] += last[s]
    tot = out.sum()
    return tot


@numba.njit(cache=True, nogil=True)
def _em_pass(obs, masks, p, m, span, block):
    R = obs.shape[0]
    K = masks.shape[0]
    npend = 1 << (m * span)
    ns = 1 << (m * (span + 1))
    lowmask = (1 << m) - 1
    nblocks = (R + block - 1) // block
    checkpoints = np.zeros((nblocks, npend))
    stage = np.zeros((K + 1, ns))
    alpha = np.zeros(npend)
    alpha[0] = 1.0
    nxt = np.zeros(npend)
    loglik = 0.0
    anomalies = 0
    for r in range(R):
        if r % block == 0:
            checkpoints[r // block, :] = alpha
        _stages(alpha, masks, p, stage, npend)
        tot = _observe(stage[K], obs[r], m, nxt)
        if tot <= 0.0:
            anomalies += 1
            alpha[:] = 0.0
            alpha[0] = 1.0
            continue
        loglik += np.log(tot)
        for s in range(npend):
            alpha[s] = nxt[s] / tot
    counts = np.zeros(K)
    beta = np.ones(npend)
    bst = np.zeros((K + 1, ns))
    buf = np.zeros((block, npend))
    for b in range(nblocks - 1, -1, -1):
        r0 = b * block
        r1 = min(R, r0 + block)
        a = checkpoints[b].copy()
        for r in range(r0, r1):
            buf[r - r0, :] = a
            _stages(a, masks, p, stage, npend)
            tot = _observe(stage[K], obs[r], m, nxt)
            if tot <= 0.0:
                a[:] = 0.0
                a[0] = 1.0
            else:
                for s in range(npend):
                    a[s] = nxt[s] / tot
        for r in range(r1 - 1, r0 - 1, -1):
            _stages(buf[r - r0], masks, p, stage, npend)
            o = obs[r]
            for s in range(ns):
                bst[K, s] = beta[s >> m] if (s & lowmask) == o else 0.0
            for k in range(K - 1, -1, -1):
                mk = masks[k]
                pk = p[k]
                for s in range(ns):
                    bst[k, s] = (1.0 - pk) * bst[k + 1, s] + pk * bst[k + 1, s ^ mk]
            z = 0.0
            for s in range(ns):
                z += stage[K, s] * bst[K, s]
            if z <= 0.0:
                beta[:] = 1.0
                continue
            for k in range(K):
                mk = masks[k]
                acc = 0.0
                for s in range(ns):
                    acc += stage[k, s] * bst[k + 1, s ^ mk]
                counts[k] += p[k] * acc / z
            tot = 0.0
            for s in range(npend):
                tot += bst[0, s]
            for s in range(npend):
                beta[s] = bst[0, s] / tot
    return loglik, counts, anomalies


def _mechanisms(nest: Nest):
    pos = {q: i for i, q in enumerate(nest.measure_qubits)}
    m = len(pos)
    span = max((c.span for c in nest.classes), default=0)
    span = max(span, 1)
    if m * (span + 1) > MAX_STATE_BITS:
        raise ValueError(f"nest needs {m * (span + 1)} state bits; deconvolution supports "
                         f"at most {MAX_STATE_BITS}")
    masks = np.zeros(len(nest.classes), np.int64)
    for k, cls in enumerate(nest.classes):
        for e in cls.pattern:
            masks[k] |= 1 << (e.round * m + pos[e.measure_qubit])
    return masks, m, span


def _observations(record: MeasurementRecord, nest: Nest) -> np.ndarray:
    rows = [record.measure_qubits.index(q) for q in nest.measure_qubits]
    ev = event_matrix(record.bits[rows])
    obs = np.zeros(record.rounds, np.int64)
    for i in range(len(rows)):
        obs |= ev[i].astype(np.int64) << i
    return obs


def _score(obs, masks, p, m, span):
    _, counts, _ = _em_pass(obs, masks, p, m, span, _BLOCK)
    n = obs.shape[0]
    return (counts - n * p) / (p * (1 - p))


def deconvolve_nest(record: MeasurementRecord, nest: Nest, *, tol: float = 1e-10,
                    max_iter: int = 2000, start=None) -> dict:
    """Maximum-likelihood per-anchor class probabilities with observed-information covariance.

    Every class is an independent Bernoulli toggle of its pattern at each round.
    Fitted by EM; the covariance is the inverse of the forward-differenced score.
    Rounds impossible under the model are counted in ``anomalies``.
    """
    _check_record(record, nest)
    masks, m, span = _mechanisms(nest)
    obs = _observations(record, nest)
    n = obs.shape[0]
    k = len(masks)
    p = np.full(k, 1e-3) if start is None else np.clip(np.asarray(start, float), 1e-6, 0.4)
    loglik = 0.0
    anomalies = 0
    it = 0
    for it in range(1, max_iter + 1):
        loglik, counts, anomalies = _em_pass(obs, masks, p, m, span, _BLOCK)
        new = np.clip(counts / n, 1e-12, 0.499)
        step = np.max(np.abs(new - p))
        p = new
        if step < tol:
            break
    info = np.zeros((k, k))
    base = _score(obs, masks, p, m, span)
    for j in range(k):
        h = max(p[j] * 1e-3, 1e-9)
        up = p.copy()
        up[j] += h
        info[:, j] = -(_score(obs, masks, up, m, span) - base) / h
    info = 0.5 * (info + info.T)
    cov = np.linalg.pinv(info)
    return {"probabilities": p, "covariance": cov, "loglik": float(loglik),
            "iterations": it, "anomalies": int(anomalies)}


# -- estimator API -----------------------------------------------------------------

class DetectionEventTransformer(TransformerMixin, BaseEstimator):
    """Records (or raw bit matrices) to event matrices; stateless."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = []
        for item in X:
            bits = item.bits if isinstance(item, MeasurementRecord) else np.asarray(item)
            out.append(event_matrix(bits))
        return out


class NestEstimator(BaseEstimator):
    """Fits class probabilities of ``nest`` from one or more records (shards)."""

    def __init__(self, nest=None, circuit=None, isolation_radius=(2, 3), max_cluster_size=2,
                 deconvolve=True, tol=1e-10):
        self.nest = nest
        self.circuit = circuit
        self.isolation_radius = isolation_radius
        self.max_cluster_size = max_cluster_size
        self.deconvolve = deconvolve
        self.tol = tol

    def fit(self, X, y=None):
        if self.nest is None:
            raise ValueError("NestEstimator needs a nest")
        records = [X] if isinstance(X, MeasurementRecord) else list(X)
        if not records:
            raise ValueError("no records")
        policy = ClusterPolicy(tuple(self.isolation_radius), self.max_cluster_size)
        ests = [estimate_nest(r, self.nest, policy, circuit=self.circuit,
                              deconvolve=self.deconvolve, tol=self.tol) for r in records]
        self.estimate_ = merge_estimates(ests)
        self.class_probabilities_, cov = self.estimate_.estimate()
        self.class_errors_ = np.sqrt(np.clip(np.diag(cov), 0, None))
        return self

    def predict(self, X=None):
        """Fitted class probabilities in nest order."""
        check_is_fitted(self, "estimate_")
        return self.class_probabilities_
