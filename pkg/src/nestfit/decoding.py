"""Repetition-code decoding, logical error rates and the predicted-vs-observed test.

Events live on a (cell, round) lattice. Each event is matched to another event or
to the nearer spatial edge, greedily in order of weighted Manhattan distance, with
per-step weights -log p taken from the nest classes of each shape. A matched
segment flips the data qubits it crosses in space. Trials end with a perfect
readout of the data qubits, which supplies one last layer of syndromes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .circuit import Circuit, GateKind, StabilizerType, apply_models_document
from .nest import Nest, build_nest
from .simulation import MeasurementRecord, _compile, _run, derive_seeds, simulate_trials

LEFT, RIGHT = "left", "right"
_FLOOR = 1e-12


@dataclass(frozen=True)
class DecoderWeights:
    """Cost of one step along each class shape, -log p."""

    time: float
    space: float
    diagonal: float
    boundary: float
    diagonal_sign: int = 1

    @classmethod
    def from_probabilities(cls, time, space, diagonal, boundary, diagonal_sign=1):
        w = [-math.log(max(p, _FLOOR)) for p in (time, space, diagonal, boundary)]
        return cls(*w, diagonal_sign)

    @classmethod
    def from_nest(cls, nest: Nest) -> "DecoderWeights":
        pos = {q: i for i, q in enumerate(nest.measure_qubits)}
        shapes: dict[str, list[float]] = {"time": [], "space": [], "diagonal": [], "boundary": []}
        sign = 1
        for cls_ in nest.classes:
            ev = cls_.pattern.sorted()
            if len(ev) == 1:
                shapes["boundary"].append(cls_.probability)
            elif len(ev) == 2:
                (r1, q1), (r2, q2) = ev
                dc, dr = pos[q2] - pos[q1], r2 - r1
                if dc == 0 and dr == 1:
                    shapes["time"].append(cls_.probability)
                elif abs(dc) == 1 and dr == 0:
                    shapes["space"].append(cls_.probability)
                elif abs(dc) == 1 and dr == 1:
                    shapes["diagonal"].append(cls_.probability)
                    sign = 1 if dc > 0 else -1
        mean = {k: (float(np.mean(v)) if v else _FLOOR) for k, v in shapes.items()}
        return cls.from_probabilities(mean["time"], mean["space"], mean["diagonal"],
                                      mean["boundary"], sign)

    @classmethod
    def uniform(cls) -> "DecoderWeights":
        return cls(1.0, 1.0, 2.0, 1.0, 1)

    def distance(self, a: tuple[int, int], b: tuple[int, int]) -> float:
        """``a`` and ``b`` are (cell, round)."""
        (c1, r1), (c2, r2) = sorted((a, b), key=lambda e: (e[1], e[0]))
        dc, dr = c2 - c1, r2 - r1
        k = 0
        if dr > 0 and dc != 0 and (dc > 0) == (self.diagonal_sign > 0):
            k = min(abs(dc), dr)
        return k * self.diagonal + (abs(dc) - k) * self.space + (dr - k) * self.time

    def edge(self, cell: int, n_cells: int) -> tuple[float, str]:
        left = self.boundary + cell * self.space
        right = self.boundary + (n_cells - 1 - cell) * self.space
        return (left, LEFT) if left <= right else (right, RIGHT)


@dataclass
class Matching:
    """``pairs`` holds (i, j) event index pairs or (i, side) for edge matches."""

    pairs: list[tuple]
    weight: float


def _match_cost(events, n_cells, weights, item) -> float:
    i, other = item
    if other in (LEFT, RIGHT):
        return weights.edge(events[i][0], n_cells)[0]
    return weights.distance(events[i], events[other])


def _members(item) -> tuple[int, ...]:
    i, other = item
    return (i,) if other in (LEFT, RIGHT) else (i, other)


def greedy_matching(events, n_cells: int, weights: DecoderWeights, *,
                    refine: bool = True) -> Matching:
    """Cheapest-first matching, then pairwise exact re-matching until stable.

    Candidates are ranked by cost per matched event, so a pair competes with one
    edge match at half its cost. The refinement takes any two matches with nearby
    events and re-solves their (at most four) events exactly.
    """
    events = [tuple(e) for e in events]
    n = len(events)
    if n == 0:
        return Matching([], 0.0)
    order = sorted(range(n), key=lambda i: (events[i][1], events[i][0]))
    edges = []
    edge_cost = {}
    for i in range(n):
        cost, side = weights.edge(events[i][0], n_cells)
        edge_cost[i] = cost
        edges.append((cost, cost, 0, i, side))
    # pairs costing more than both edge matches can never be chosen
    horizon = 2 * max(edge_cost.values()) / max(min(weights.time, weights.diagonal), 1e-12)
    for a in range(n):
        i = order[a]
        for b in range(a + 1, n):
            j = order[b]
            if events[j][1] - events[i][1] > horizon:
                break
            d = weights.distance(events[i], events[j])
            if d < edge_cost[i] + edge_cost[j]:
                edges.append((d / 2, d, 1, min(i, j), max(i, j)))
    edges.sort(key=lambda e: (e[0], -e[2], e[3], str(e[4])))
    used = [False] * n
    pairs = []
    for _, cost, kind, i, other in edges:
        if used[i] or (kind == 1 and used[other]):
            continue
        used[i] = True
        if kind == 1:
            used[other] = True
        pairs.append((i, other))
    if refine:
        pairs = _refine(events, n_cells, weights, pairs, horizon)
    return Matching(pairs, sum(_match_cost(events, n_cells, weights, p) for p in pairs))


def _refine(events, n_cells, weights, pairs, horizon, group: int = 3, max_sweeps: int = 100):
    """Re-solve groups of up to ``group`` nearby matches exactly while that lowers the cost."""
    pairs = list(pairs)
    for _ in range(max_sweeps):
        pairs.sort(key=lambda p: min(events[k][1] for k in _members(p)))
        start = [min(events[k][1] for k in _members(p)) for p in pairs]
        costs = [_match_cost(events, n_cells, weights, p) for p in pairs]
        found = None
        for size in range(2, group + 1):
            for combo in _nearby(start, size, horizon + 1):
                idx = tuple(k for c in combo for k in _members(pairs[c]))
                best = exact_matching([events[k] for k in idx], n_cells, weights)
                if best.weight < sum(costs[c] for c in combo) - 1e-9:
                    found = combo, [(idx[i], o if o in (LEFT, RIGHT) else idx[o])
                                    for i, o in best.pairs]
                    break
            if found:
                break
        if not found:
            return pairs
        combo, new = found
        pairs = [p for c, p in enumerate(pairs) if c not in combo] + new
    return pairs


def _nearby(start, size, horizon):
    """Index tuples of ``size`` matches whose first rounds lie within ``horizon``."""
    n = len(start)

    def extend(prefix):
        if len(prefix) == size:
            yield tuple(prefix)
            return
        for j in range(prefix[-1] + 1, n):
            if start[j] - start[prefix[0]] > horizon:
                break
            yield from extend(prefix + [j])

    for i in range(n):
        yield from extend([i])


def exact_matching(events, n_cells: int, weights: DecoderWeights, limit: int = 10) -> Matching:
    """Minimum-weight matching with edges by exhaustive search (small instances only)."""
    events = [tuple(e) for e in events]
    if len(events) > limit:
        raise ValueError(f"exhaustive matching is limited to {limit} events")
    edge = [weights.edge(e[0], n_cells) for e in events]
    best: dict[frozenset, tuple[float, list]] = {}

    def solve(left: frozenset):
        if not left:
            return 0.0, []
        if left in best:
            return best[left]
        i = min(left)
        rest = left - {i}
        cost, tail = solve(rest)
        out = (cost + edge[i][0], [(i, edge[i][1])] + tail)
        for j in sorted(rest):
            c, t = solve(rest - {j})
            c += weights.distance(events[i], events[j])
            if c < out[0] - 1e-12:
                out = (c, [(i, j)] + t)
        best[left] = out
        return out

    cost, pairs = solve(frozenset(range(len(events))))
    return Matching(pairs, cost)


def correction(events, matching: Matching, n_cells: int) -> frozenset[int]:
    """Data positions (0 .. n_cells) flipped by the matched segments."""
    flips = np.zeros(n_cells + 1, np.uint8)
    for i, other in matching.pairs:
        c = events[i][0]
        if other == LEFT:
            flips[:c + 1] ^= 1
        elif other == RIGHT:
            flips[c + 1:] ^= 1
        else:
            a, b = sorted((c, events[other][0]))
            flips[a + 1:b + 1] ^= 1
    return frozenset(int(k) for k in np.flatnonzero(flips))


def decode_events(events, n_cells: int, weights: DecoderWeights | None = None, *,
                  exact: bool = False) -> frozenset[int]:
    weights = weights or DecoderWeights.uniform()
    match = (exact_matching if exact else greedy_matching)(events, n_cells, weights)
    return correction(events, match, n_cells)


# -- circuits and records ----------------------------------------------------------

def _layout(circuit: Circuit):
    types = set(circuit.stabilizer_types)
    if types != {StabilizerType.Z}:
        raise ValueError("decoding needs a repetition circuit with Z-type checks only")
    measure = circuit.measure_qubits_of(StabilizerType.Z)
    support = {}
    for q in measure:
        support[q] = sorted({p for g in circuit.gates if g.kind is GateKind.CZ and q in g.qubits
                             for p in g.qubits if p != q})
    data = list(circuit.data_qubits)
    for i, q in enumerate(measure):
        if support[q] != [data[i], data[i + 1]]:
            raise ValueError("measure qubits must sit between consecutive data qubits")
    return measure, data


def final_syndrome(circuit: Circuit, last_bits: np.ndarray, final_x: np.ndarray) -> np.ndarray:
    """Events of the perfect data readout layer, per trial and check."""
    measure, data = _layout(circuit)
    final_x = np.atleast_2d(final_x)
    parity = final_x[:, :-1] ^ final_x[:, 1:]
    return parity ^ np.atleast_2d(last_bits)


@dataclass
class DecodeResult:
    correction: frozenset[int]      # data qubit ids
    events: list[tuple[int, int]]   # (cell, round)
    weight: float


def decode(record: MeasurementRecord, circuit: Circuit, weights: DecoderWeights | None = None,
           *, exact: bool = False) -> DecodeResult:
    """Correction for the whole record; closes with the final data readout when known."""
    if record.circuit_hash != circuit.structure_hash():
        raise ValueError("record does not come from this circuit")
    measure, data = _layout(circuit)
    weights = weights or DecoderWeights.from_nest(build_nest(circuit))
    rows = [record.measure_qubits.index(q) for q in measure]
    bits = record.bits[rows]
    ev = bits.copy()
    ev[:, 1:] ^= bits[:, :-1]
    cells, rounds = np.nonzero(ev)
    events = sorted(zip(cells.tolist(), rounds.tolist()), key=lambda e: (e[1], e[0]))
    if record.final_data_x is not None:
        fin = final_syndrome(circuit, bits[:, -1], record.final_data_x)[0]
        events += [(int(c), record.rounds) for c in np.flatnonzero(fin)]
    match = (exact_matching if exact else greedy_matching)(events, len(measure), weights)
    fix = correction(events, match, len(measure))
    return DecodeResult(frozenset(data[k] for k in fix), events, match.weight)


# -- logical error rates -------------------------------------------------------------

@dataclass(frozen=True)
class LogicalTrialResult:
    """Failures out of independent fresh-start windows; 95% Wilson interval."""

    trials: int
    logical_failures: int
    rounds_per_trial: int
    confidence: float = 0.95

    def __post_init__(self):
        if self.trials < 0 or not 0 <= self.logical_failures <= max(self.trials, 0):
            raise ValueError("need 0 <= failures <= trials")

    @property
    def rate(self) -> float:
        return self.logical_failures / self.trials if self.trials else 0.0

    @property
    def interval(self) -> tuple[float, float]:
        if self.trials == 0:
            return (0.0, 1.0)
        ci = stats.binomtest(self.logical_failures, self.trials).proportion_ci(
            self.confidence, method="wilson")
        return (float(ci.low), float(ci.high))

    def to_json(self) -> dict:
        return {"trials": self.trials, "logical_failures": self.logical_failures,
                "rounds_per_trial": self.rounds_per_trial, "rate": self.rate,
                "interval": list(self.interval), "interval_method": "wilson",
                "confidence": self.confidence}


def _resolve(circuit: Circuit, models) -> Circuit:
    if models is None:
        return circuit
    if isinstance(models, dict) and "schema" in models:
        return apply_models_document(circuit, models)
    return circuit.with_models(models)


def _pattern_failures(circuit, bits, final_x, weights, exact=False):
    """Logical failure flag per trial, decoding each distinct syndrome once."""
    measure, data = _layout(circuit)
    trials, m, rounds = bits.shape
    ev = bits.copy()
    ev[:, :, 1:] ^= bits[:, :, :-1]
    fin = final_syndrome(circuit, bits[:, :, -1], final_x)
    full = np.concatenate([ev, fin[:, :, None]], axis=2).reshape(trials, -1)
    packed = np.packbits(full, axis=1)
    uniq, inverse = np.unique(packed, axis=0, return_inverse=True)
    flip_ref = np.zeros(len(uniq), np.uint8)
    for u in range(len(uniq)):
        vec = np.unpackbits(uniq[u], count=full.shape[1]).reshape(m, rounds + 1)
        cells, rr = np.nonzero(vec)
        if cells.size == 0:
            continue
        events = sorted(zip(cells.tolist(), rr.tolist()), key=lambda e: (e[1], e[0]))
        fix = decode_events(events, m, weights, exact=exact and len(events) <= 10)
        flip_ref[u] = 1 if 0 in fix else 0
    return flip_ref[np.ravel(inverse)] ^ final_x[:, 0]


def trial_failures(circuit: Circuit, bits: np.ndarray, final_x: np.ndarray,
                   weights: DecoderWeights | None = None, *, exact: bool = False) -> np.ndarray:
    """1 where decoding ``bits[trial, row, round]`` plus the final readout leaves a logical flip."""
    weights = weights or DecoderWeights.from_nest(build_nest(circuit.without_correlated()))
    return _pattern_failures(circuit, np.asarray(bits, np.uint8),
                             np.atleast_2d(np.asarray(final_x, np.uint8)), weights, exact)


def logical_error_rate(circuit: Circuit, models=None, trials: int = 10_000,
                       rounds_per_trial: int = 10, seed: int | None = None, *,
                       weights: DecoderWeights | None = None,
                       batch: int = 200_000) -> LogicalTrialResult:
    """Fraction of fresh-start windows whose decoded reference qubit ends flipped.

    The decoder's weights default to the nest of the simulated circuit without
    its correlated channels, i.e. what per-gate models can describe.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if seed is None:
        raise ValueError("seed is required")
    circ = _resolve(circuit, models)
    _layout(circ)
    if weights is None:
        weights = DecoderWeights.from_nest(build_nest(circ.without_correlated()))
    failures = 0
    seeds = derive_seeds(seed, (trials + batch - 1) // batch)
    done = 0
    for s in seeds:
        n = min(batch, trials - done)
        b = simulate_trials(circ, n, rounds_per_trial, s)
        failures += int(_pattern_failures(circ, b.bits, b.final_data_x, weights).sum())
        done += n
    return LogicalTrialResult(int(trials), failures, int(rounds_per_trial))


@dataclass(frozen=True)
class Verdict:
    verdict: str
    p_value: float
    z: float
    observed: LogicalTrialResult
    predicted: LogicalTrialResult
    alpha: float

    def to_json(self) -> dict:
        return {"schema": "verdict.v1", "verdict": self.verdict, "p_value": self.p_value,
                "z": self.z, "alpha": self.alpha, "observed": self.observed.to_json(),
                "predicted": self.predicted.to_json()}


CONSISTENT = "consistent"
OBSERVED_WORSE = "observed-worse"
OBSERVED_BETTER = "observed-better"


def compare_predicted_vs_observed(observed: LogicalTrialResult, predicted: LogicalTrialResult,
                                  alpha: float = 0.01) -> Verdict:
    """Pooled two-proportion z test on the logical failure rates."""
    if observed.trials == 0 or predicted.trials == 0:
        raise ValueError("both results need at least one trial")
    if observed.rounds_per_trial != predicted.rounds_per_trial:
        raise ValueError("results use different rounds per trial")
    n1, n2 = observed.trials, predicted.trials
    k1, k2 = observed.logical_failures, predicted.logical_failures
    pooled = (k1 + k2) / (n1 + n2)
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    diff = k1 / n1 - k2 / n2
    if se == 0:
        z, p = 0.0, 1.0 if diff == 0 else 0.0
    else:
        z = diff / se
        p = float(2 * stats.norm.sf(abs(z)))
    verdict = CONSISTENT
    if p < alpha:
        verdict = OBSERVED_WORSE if diff > 0 else OBSERVED_BETTER
    return Verdict(verdict, p, float(z), observed, predicted, alpha)


# -- enumeration oracle ------------------------------------------------------------

def fault_effects(circuit: Circuit, rounds: int):
    """Every single fault in a fresh ``rounds``-round window and what it does.

    Returns (faults, probabilities, op_keys, bits, final_x) with one row per fault,
    produced by the simulator's own kernel with the uniforms pinned so exactly
    that term fires.
    """
    comp = _compile(circuit)
    faults, probs, keys = [], [], []
    for r in range(rounds):
        for slot, op in enumerate(comp.active):
            lo = 0.0
            for j in range(comp.nterm[op]):
                hi = comp.cum[op, j]
                if hi > lo:
                    faults.append((r, slot, 0.5 * (lo + hi)))
                    probs.append(hi - lo)
                    keys.append((r, int(op)))
                lo = hi
    n = len(faults)
    u = np.full((n, rounds, len(comp.active)), 2.0)
    for t, (r, slot, v) in enumerate(faults):
        u[t, r, slot] = v
    bits = np.zeros((n, circuit.num_measure, rounds), np.uint8)
    fx = np.zeros(n, np.int64)
    fz = np.zeros(n, np.int64)
    _run(comp.code, comp.q0, comp.q1, comp.cum, comp.nterm, comp.xm, comp.zm, comp.meas_row,
         comp.active, u, bits, fx, fz, 0)
    final = np.array([[(int(v) >> q) & 1 for q in circuit.data_qubits] for v in fx], np.uint8)
    totals = {int(op): comp.cum[op, comp.nterm[op] - 1] for op in comp.active}
    return faults, np.array(probs), keys, bits, final, totals


def second_order_logical_rate(circuit: Circuit, rounds: int,
                              weights: DecoderWeights | None = None) -> float:
    """Logical failure probability summed over all windows with at most two faults."""
    _layout(circuit)
    weights = weights or DecoderWeights.from_nest(build_nest(circuit.without_correlated()))
    faults, probs, keys, bits, final, totals = fault_effects(circuit, rounds)
    log_clean = rounds * sum(math.log1p(-t) for t in totals.values())
    clean = math.exp(log_clean)
    fail1 = _pattern_failures(circuit, bits, final, weights)
    ratio = np.array([p / (1 - totals[k[1]]) for p, k in zip(probs, keys)])
    rate = clean * float(np.sum(ratio * fail1))
    n = len(faults)
    idx_i, idx_j = np.triu_indices(n, 1)
    same = np.array([keys[i] == keys[j] for i, j in zip(idx_i, idx_j)], bool)
    idx_i, idx_j = idx_i[~same], idx_j[~same]
    for start in range(0, len(idx_i), 200_000):
        a, b = idx_i[start:start + 200_000], idx_j[start:start + 200_000]
        fail2 = _pattern_failures(circuit, bits[a] ^ bits[b], final[a] ^ final[b], weights)
        rate += clean * float(np.sum(ratio[a] * ratio[b] * fail2))
    return rate


class RepetitionDecoder(BaseEstimator):
    """Greedy (or exhaustive) matching decoder with weights fitted from a nest."""

    def __init__(self, exact=False):
        self.exact = exact

    def fit(self, X, y=None):
        nest = X if isinstance(X, Nest) else build_nest(X)
        self.weights_ = DecoderWeights.from_nest(nest)
        self.n_cells_ = len(nest.measure_qubits)
        return self

    def predict(self, X):
        """Event lists of (cell, round) -> 1 where the reference data qubit is corrected."""
        check_is_fitted(self, "weights_")
        return np.array([1 if 0 in decode_events(ev, self.n_cells_, self.weights_,
                                                  exact=self.exact) else 0 for ev in X])

