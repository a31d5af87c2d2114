"""Gate error models from estimated nests: linear constraints and a weighted NNLS fit.

Each estimated class is one row: the sum of the probabilities of its member terms.
Rows of several nests (several circuits) are stacked. Parameterizations group the
raw terms into fewer unknowns; whatever the grouping, directions the rows cannot
see are reported through the nullspace of the whitened matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import optimize, stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .circuit import (LEGAL_LABELS, Circuit, GateErrorModel, GateKind, models_to_json)

FITREPORT_SCHEMA = "fitreport.v1"


class Parameterization(str, Enum):
    PER_TERM = "per_term"
    PER_GATE = "per_gate_depolarizing"
    PER_KIND = "per_kind_depolarizing"

    @classmethod
    def parse(cls, value) -> "Parameterization":
        if isinstance(value, cls):
            return value
        aliases = {"per-term": cls.PER_TERM, "per-gate": cls.PER_GATE, "per-kind": cls.PER_KIND,
                   "per_gate": cls.PER_GATE, "per_kind": cls.PER_KIND}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise ValueError(f"unknown parameterization {value!r}") from None


def _term_column(param: Parameterization, circuit: str, gate_id: str, kind: GateKind, label: str):
    """(unknown name, coefficient) for one raw term."""
    if param is Parameterization.PER_TERM:
        return (circuit, gate_id, label), 1.0
    share = 1.0 / len(LEGAL_LABELS[kind])
    if param is Parameterization.PER_GATE:
        return (circuit, gate_id), share
    return (kind.value,), share


def unknown_name(u: tuple) -> str:
    if len(u) == 1:
        return u[0]
    if len(u) == 2:
        return f"{u[0]}:{u[1]}"
    return f"{u[0]}:{u[1]}({u[2]})"


@dataclass
class ConstraintSystem:
    """``rhs ~ forward(matrix, x)`` with ``covariance`` of the rhs.

    ``gate_rows[i]`` splits row ``i`` by gate: its rows sum to ``matrix[i]``; the
    parity forward model combines them as independent gates.
    """

    unknowns: list[tuple]
    matrix: np.ndarray
    rhs: np.ndarray
    covariance: np.ndarray
    row_labels: list[str]
    gate_rows: list[np.ndarray]
    parameterization: Parameterization
    forward: str = "parity"

    @property
    def weights(self) -> np.ndarray:
        """Per-row variances."""
        return np.diag(self.covariance).copy()

    @property
    def names(self) -> list[str]:
        return [unknown_name(u) for u in self.unknowns]

    def predict(self, x, forward: str | None = None) -> np.ndarray:
        x = np.asarray(x, float)
        if (forward or self.forward) == "linear":
            return self.matrix @ x
        out = np.empty(len(self.gate_rows))
        for i, g in enumerate(self.gate_rows):
            out[i] = 0.5 * (1.0 - np.prod(1.0 - 2.0 * (g @ x)))
        return out

    def jacobian(self, x, forward: str | None = None) -> np.ndarray:
        x = np.asarray(x, float)
        if (forward or self.forward) == "linear":
            return self.matrix.copy()
        jac = np.empty_like(self.matrix)
        for i, g in enumerate(self.gate_rows):
            f = 1.0 - 2.0 * (g @ x)
            prod = np.prod(f)
            others = np.array([np.prod(np.delete(f, j)) for j in range(len(f))]) if prod == 0 \
                else prod / f
            jac[i] = others @ g
        return jac

    def rank(self, tol: float | None = None) -> int:
        return int(np.linalg.matrix_rank(self.matrix, tol=tol))


def build_system(pairs, param=Parameterization.PER_GATE, *, forward: str = "parity",
                 method: str = "auto") -> ConstraintSystem:
    """Stack one row per estimated class over ``(structure nest, EstimatedNest)`` pairs.

    The nest must carry every legal term (``build_nest(..., include_zero=True)``).
    ``method`` picks the estimate used as rhs (see :meth:`EstimatedNest.estimate`).
    """
    param = Parameterization.parse(param)
    if forward not in ("linear", "parity"):
        raise ValueError(f"unknown forward model {forward!r}")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no nests given")
    row_terms = []
    rhs_parts, cov_parts, labels = [], [], []
    index: dict[tuple, int] = {}
    for nest, est in pairs:
        if est.circuit_hash != nest.circuit_hash:
            raise ValueError(f"estimate and nest belong to different circuits ({nest.circuit_name})")
        by_key = {c.pattern.key(): c for c in nest.classes}
        missing = [k for k in est.class_keys if k not in by_key]
        if missing:
            raise ValueError(f"estimated patterns {missing} are not in the {nest.circuit_name} nest")
        p, cov = est.estimate(method)
        rhs_parts.append(p)
        cov_parts.append(cov)
        for k in est.class_keys:
            cls = by_key[k]
            terms = []
            for c in cls.contributors:
                kind = _contributor_kind(c)
                name, coef = _term_column(param, nest.circuit_name, c.gate_id, kind, c.pauli)
                index.setdefault(name, len(index))
                terms.append((c.gate_id, name, coef))
            row_terms.append(terms)
            labels.append(f"{nest.circuit_name}/{nest.stabilizer_type.value}/"
                          + "+".join(f"q{q}@{r}" for r, q in k))
        # terms no class sees still get a (zero) column so they are flagged, not dropped
        for c in nest.undetectable:
            name, _ = _term_column(param, nest.circuit_name, c.gate_id, _contributor_kind(c),
                                   c.pauli)
            index.setdefault(name, len(index))
    unknowns = sorted(index, key=lambda u: (len(u), u))
    col = {u: i for i, u in enumerate(unknowns)}
    n = len(unknowns)
    matrix = np.zeros((len(row_terms), n))
    gate_rows = []
    for i, terms in enumerate(row_terms):
        gates: dict[str, np.ndarray] = {}
        for gid, name, coef in terms:
            g = gates.setdefault(gid, np.zeros(n))
            g[col[name]] += coef
            matrix[i, col[name]] += coef
        gate_rows.append(np.array(list(gates.values())) if gates else np.zeros((0, n)))
    cov = np.zeros((len(row_terms), len(row_terms)))
    off = 0
    for c in cov_parts:
        k = c.shape[0]
        cov[off:off + k, off:off + k] = c
        off += k
    return ConstraintSystem(unknowns, matrix, np.concatenate(rhs_parts), cov, labels,
                            gate_rows, param, forward)


def _contributor_kind(c) -> GateKind:
    if not c.kind:
        raise ValueError(f"nest contributor {c.gate_id}({c.pauli}) carries no gate kind")
    return GateKind(c.kind)


# -- solving ---------------------------------------------------------------------

@dataclass
class FitResult:
    """Fitted unknowns. ``rates[name]`` is ``None`` where the rows cannot pin it down."""

    names: list[str]
    unknowns: list[tuple]
    values: np.ndarray
    sigma: np.ndarray
    covariance: np.ndarray
    identifiable: np.ndarray
    nullspace: np.ndarray
    residuals: np.ndarray
    chi2: float
    dof: int
    rank: int
    iterations: int
    parameterization: Parameterization
    forward: str
    row_labels: list[str] = field(default_factory=list)
    confidence: float = 0.95

    @property
    def rates(self) -> dict[str, float | None]:
        return {n: (float(v) if ok else None)
                for n, v, ok in zip(self.names, self.values, self.identifiable)}

    @property
    def unidentifiable(self) -> list[str]:
        return [n for n, ok in zip(self.names, self.identifiable) if not ok]

    @property
    def p_value(self) -> float:
        return float(stats.chi2.sf(self.chi2, self.dof)) if self.dof > 0 else float("nan")

    def interval(self, name: str) -> tuple[float, float] | None:
        i = self.names.index(name)
        if not self.identifiable[i]:
            return None
        z = stats.norm.ppf(0.5 + self.confidence / 2)
        return (max(0.0, self.values[i] - z * self.sigma[i]), self.values[i] + z * self.sigma[i])

    def combination(self, weights: dict[str, float], tol: float = 1e-8):
        """(value, sigma, estimable) of a linear combination of unknowns."""
        w = np.zeros(len(self.names))
        for n, c in weights.items():
            w[self.names.index(n)] = c
        estimable = bool(self.nullspace.size == 0
                         or np.linalg.norm(self.nullspace.T @ w) <= tol * max(1.0, np.linalg.norm(w)))
        return float(w @ self.values), float(np.sqrt(max(w @ self.covariance @ w, 0.0))), estimable

    def nullspace_directions(self, tol: float = 1e-9) -> list[dict[str, float]]:
        out = []
        for v in self.nullspace.T:
            v = v / np.max(np.abs(v))
            out.append({n: float(c) for n, c in zip(self.names, v) if abs(c) > tol})
        return out

    def to_json(self) -> dict:
        return {
            "schema": FITREPORT_SCHEMA,
            "parameterization": self.parameterization.value,
            "forward": self.forward,
            "rank": self.rank,
            "unknowns": [
                {"name": n, "value": (float(v) if ok else None), "completion": float(v),
                 "sigma": (float(s) if ok else None), "identifiable": bool(ok),
                 "interval": (list(self.interval(n)) if ok else None)}
                for n, v, s, ok in zip(self.names, self.values, self.sigma, self.identifiable)
            ],
            "unidentifiable": self.unidentifiable,
            "nullspace": self.nullspace_directions(),
            "residuals": [{"row": r, "value": float(v)}
                          for r, v in zip(self.row_labels, self.residuals)],
            "chi2": self.chi2,
            "dof": self.dof,
            "p_value": self.p_value if self.dof > 0 else None,
            "confidence": self.confidence,
        }


def _whitener(cov: np.ndarray, rhs: np.ndarray, floor: float) -> np.ndarray:
    cov = np.array(cov, float)
    d = np.diag(cov).copy()
    small = d < floor
    if np.any(small):
        cov[small, small] = floor
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.clip(w, floor, None)
    return (v / np.sqrt(w)) @ v.T


def solve(system: ConstraintSystem, *, forward: str | None = None, tol: float = 1e-12,
          max_iter: int = 10_000, rank_tol: float = 1e-9, confidence: float = 0.95,
          negative_sigmas: float = 5.0) -> FitResult:
    """Weighted non-negative least squares with nullspace flags and Gaussian intervals.

    Rank-deficient systems get the minimum-norm non-negative solution among the
    best fits; unknowns with a component along the nullspace are flagged.
    """
    A = np.asarray(system.matrix, float)
    b = np.asarray(system.rhs, float)
    forward = forward or system.forward
    if A.size == 0 or not np.any(A):
        raise ValueError("constraint matrix is all zero")
    var = np.diag(system.covariance)
    scale = np.sqrt(np.clip(var, 0, None))
    bad = b < -negative_sigmas * np.maximum(scale, 1e-15)
    if np.any(bad):
        rows = [system.row_labels[i] for i in np.flatnonzero(bad)]
        raise ValueError(f"negative class estimates beyond tolerance in rows {rows}")
    floor = max(1e-30, float(np.max(var)) * 1e-12) if np.any(var > 0) else 1.0
    W = _whitener(system.covariance, b, floor) if np.any(var > 0) else np.eye(len(b))
    Aw = W @ A
    # structural rank from the unweighted membership pattern, relative tolerance
    u, s, vt = np.linalg.svd(A, full_matrices=True)
    rank = int(np.sum(s > rank_tol * s[0]))
    null = vt[rank:].T
    identifiable = np.array([np.linalg.norm(null[j]) <= 1e-7 for j in range(A.shape[1])]) \
        if null.size else np.ones(A.shape[1], bool)

    x = np.zeros(A.shape[1])
    iterations = 0
    for iterations in range(1, 101 if forward == "parity" else 2):
        J = system.jacobian(x, forward)
        target = b - system.predict(x, forward) + J @ x
        x_new = _min_norm_nnls(W @ J, W @ target, null, max_iter, tol)
        done = np.max(np.abs(x_new - x)) <= tol * max(1.0, np.max(np.abs(x_new)))
        x = x_new
        if done:
            break
    J = system.jacobian(x, forward)
    resid = b - system.predict(x, forward)
    rw = W @ resid
    Jw = W @ J
    cov = np.linalg.pinv(Jw.T @ Jw, rcond=1e-10)
    sigma = np.sqrt(np.clip(np.diag(cov), 0, None))
    dof = int(len(b) - rank)
    return FitResult([unknown_name(v) for v in system.unknowns], list(system.unknowns), x,
                     sigma, cov, identifiable, null, resid, float(rw @ rw), dof, rank,
                     iterations, system.parameterization, forward, list(system.row_labels),
                     confidence)


def _min_norm_nnls(Aw, bw, null: np.ndarray, max_iter: int, tol: float) -> np.ndarray:
    x, _ = optimize.nnls(Aw, bw, maxiter=max_iter)
    if null.size == 0:
        return x
    # among non-negative solutions with the same fitted values, take the shortest
    y = x - null @ (null.T @ x)
    if np.all(y >= -1e-12 * max(1.0, np.max(np.abs(x)))):
        return np.clip(y, 0.0, None)
    fitted = Aw @ x
    scale = np.linalg.norm(Aw, 2)
    lam = 1e3 / scale if scale > 0 else 1.0
    stacked = np.vstack([Aw, lam * np.eye(Aw.shape[1])])
    rhs = np.concatenate([fitted, np.zeros(Aw.shape[1])])
    z, _ = optimize.nnls(stacked, rhs, maxiter=max_iter)
    if np.linalg.norm(Aw @ z - fitted) <= 1e-3 * max(1.0, np.linalg.norm(fitted)):
        return z
    return x


# -- models out ------------------------------------------------------------------

def fitted_models(result: FitResult, circuits: dict[str, Circuit]) -> dict:
    """``errormodel.v1`` document from a fit.

    Per-kind fits fill ``by_kind``; gate-level fits go under ``by_circuit`` since
    gate ids repeat across circuits. Unidentifiable unknowns keep their
    minimum-norm completion value and are listed under ``unidentifiable``.
    """
    values = dict(zip(result.unknowns, result.values))
    by_kind, by_circuit = {}, {}
    if result.parameterization is Parameterization.PER_KIND:
        for (kind,), v in values.items():
            by_kind[GateKind(kind)] = GateErrorModel.depolarizing(kind, float(v))
    else:
        for name, circuit in circuits.items():
            gates = {}
            for g in circuit.gates:
                if result.parameterization is Parameterization.PER_GATE:
                    v = values.get((name, g.id))
                    if v is not None:
                        gates[g.id] = GateErrorModel.depolarizing(g.kind, float(v)).to_dict()
                else:
                    terms = {lab: float(values[(name, g.id, lab)])
                             for lab in LEGAL_LABELS[g.kind] if (name, g.id, lab) in values}
                    if terms:
                        gates[g.id] = terms
            by_circuit[name] = {"by_gate": gates}
    return models_to_json(by_kind, None, (), by_circuit=by_circuit,
                          parameterization=result.parameterization.value,
                          unidentifiable=result.unidentifiable)


def dumps_report(result: FitResult) -> str:
    return json.dumps(result.to_json(), indent=2)


class ErrorModelInverter(BaseEstimator):
    """Fit gate error models from ``[(structure nest, EstimatedNest), ...]``."""

    def __init__(self, parameterization="per_gate_depolarizing", forward="parity", method="auto",
                 tol=1e-12, max_iter=10_000, confidence=0.95):
        self.parameterization = parameterization
        self.forward = forward
        self.method = method
        self.tol = tol
        self.max_iter = max_iter
        self.confidence = confidence

    def fit(self, X, y=None):
        self.system_ = build_system(X, self.parameterization, forward=self.forward,
                                    method=self.method)
        self.result_ = solve(self.system_, tol=self.tol, max_iter=self.max_iter,
                             confidence=self.confidence)
        self.rates_ = self.result_.rates
        return self

    def predict(self, X=None):
        """Class probabilities predicted by the fitted rates, in row order."""
        check_is_fitted(self, "result_")
        return self.system_.predict(self.result_.values)

    def models(self, circuits: dict[str, Circuit]) -> dict:
        check_is_fitted(self, "result_")
        return fitted_models(self.result_, circuits)
