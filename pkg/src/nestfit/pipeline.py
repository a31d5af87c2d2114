"""End-to-end run: circuits -> nests -> records -> estimates -> fit -> validation -> correlations.

Every stage reads its inputs from the output directory and writes its outputs
there, so each one can be rerun or inspected on its own. The report is a pure
function of the config; wall-clock data goes to a separate metadata file.
"""

from __future__ import annotations

import json
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .circuit import (
    Circuit, CorrelatedChannel, StabilizerType, _kind, apply_models_document,
    build_parity_square_circuit, build_repetition_circuit, depolarizing_models, models_to_json,
)
from .correlation import cross_correlate
from .decoding import (
    CONSISTENT, OBSERVED_WORSE, DecoderWeights, _layout, compare_predicted_vs_observed,
    logical_error_rate,
)
from .extraction import ClusterPolicy, EstimatedNest, estimate_nest, merge_estimates
from .inversion import Parameterization, build_system, fitted_models, solve, unknown_name
from .nest import build_nest, export_nest, import_nest
from .schemas import SchemaError, validate_document
from .simulation import derive_seeds, read_record, simulate_sharded, write_record

REPORT_SCHEMA = "pipeline-report.v1"
BUILTIN = ("repetition", "parity-square")
DEFAULT_TRUTH = {"CZ": 0.005, "Hadamard": 0.001, "IdleMemory": 0.002, "MeasureZ": 0.005,
                 "Init0": 0.005}
STAGES = ("build-circuit", "build-nest", "simulate", "extract", "invert", "validate", "correlate")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    """``circuits`` entries are builtin names or paths to circuit.v1 files; ``truth`` is a
    kind -> depolarizing rate map or a path to an errormodel.v1 document. ``correlated``
    channels carry a ``circuit`` key naming the circuit they are added to."""

    output_dir: str = "nestfit-run"
    seed: int | None = None
    distance: int = 3
    circuits: list = field(default_factory=lambda: list(BUILTIN))
    truth: dict | str = field(default_factory=lambda: dict(DEFAULT_TRUTH))
    correlated: list = field(default_factory=list)
    rounds: int = 1_000_000
    shards: int = 1
    isolation_radius: tuple = (2, 3)
    max_cluster_size: int = 2
    parameterization: str = "per_kind_depolarizing"
    estimator: str = "auto"
    validate_trials: int = 200_000
    validate_rounds: int | None = None
    window: int = 2
    alpha: float = 0.01
    threads: int = 1

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["isolation_radius"] = list(self.isolation_radius)
        return doc

    @property
    def policy(self) -> ClusterPolicy:
        return ClusterPolicy(tuple(self.isolation_radius), self.max_cluster_size)

    def check(self) -> list[Circuit]:
        """Fail-fast validation: every value sane and every referenced file parses.

        Returns the truth circuits.
        """
        def positive_int(name, value, minimum=1):
            if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
                raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")

        if self.seed is None:
            raise ConfigError("seed is required")
        positive_int("seed", self.seed, 0)
        positive_int("rounds", self.rounds)
        positive_int("shards", self.shards)
        positive_int("threads", self.threads)
        positive_int("distance", self.distance, 2)
        positive_int("validate_trials", self.validate_trials)
        positive_int("window", self.window, 0)
        if self.validate_rounds is not None:
            positive_int("validate_rounds", self.validate_rounds)
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.estimator not in ("auto", "count", "deconvolve"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        try:
            Parameterization.parse(self.parameterization)
            self.policy
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.circuits:
            raise ConfigError("no circuits configured")
        try:
            circuits = [self._load_circuit(c) for c in self.circuits]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad circuit entry: {exc}") from None
        names = [c.name for c in circuits]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate circuit names {names}")
        try:
            circuits = [self._apply_truth(c) for c in circuits]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad truth model: {exc}") from None
        try:
            circuits = self._apply_correlated(circuits)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad correlated channel: {exc}") from None
        return circuits

    def _load_circuit(self, entry) -> Circuit:
        zero = depolarizing_models(0.0)
        if entry == "repetition":
            return build_repetition_circuit(self.distance, zero)
        if entry == "parity-square":
            return build_parity_square_circuit(zero)
        path = Path(entry)
        if not path.exists():
            raise ConfigError(f"circuit file {entry} not found (builtins: {', '.join(BUILTIN)})")
        doc = json.loads(path.read_text())
        validate_document(doc, "circuit.v1")
        return Circuit.from_json(doc)

    def _apply_truth(self, circuit: Circuit) -> Circuit:
        if isinstance(self.truth, str):
            doc = json.loads(Path(self.truth).read_text())
            validate_document(doc, "errormodel.v1")
            return apply_models_document(circuit, doc)
        rates = {_kind(k): float(v) for k, v in self.truth.items()}
        for k, v in rates.items():
            if not 0 <= v <= 0.5:
                raise ConfigError(f"truth rate for {k.value} outside [0, 0.5]")
        return circuit.with_models(depolarizing_models(rates))

    def _apply_correlated(self, circuits: list[Circuit]) -> list[Circuit]:
        by_name = {c.name: list(c.correlated) for c in circuits}
        for ch in self.correlated:
            ch = dict(ch)
            name = ch.pop("circuit")
            if name not in by_name:
                raise ConfigError(f"correlated channel names unknown circuit {name!r}")
            by_name[name].append(CorrelatedChannel(tuple(ch["qubits"]), ch["pauli"],
                                                   float(ch["probability"]), int(ch["layer"])))
        return [c.with_models(correlated=by_name[c.name]) for c in circuits]


@dataclass
class PipelineOutcome:
    status: int
    report: dict | None
    error: str | None = None
    failed_stage: str | None = None
    output_dir: Path | None = None


def _write_json(path: Path, doc, schema: str | None = None) -> Path:
    if schema is not None:
        validate_document(doc, schema)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=False, allow_nan=False) + "\n")
    return path


def _read_json(path: Path):
    return json.loads(Path(path).read_text())


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def truth_values(unknowns: list[tuple], param: Parameterization,
                 circuits: dict[str, Circuit]) -> list[float | None]:
    """True value of each unknown under the generating models (``None`` if ill-defined)."""
    out = []
    for u in unknowns:
        if param is Parameterization.PER_KIND:
            totals = {round(g.error_model.total, 15) for c in circuits.values() for g in c.gates
                      if g.kind.value == u[0]}
            out.append(totals.pop() if len(totals) == 1 else None)
        elif param is Parameterization.PER_GATE:
            out.append(circuits[u[0]].gate(u[1]).error_model.total)
        else:
            out.append(circuits[u[0]].gate(u[1]).error_model.probability(u[2]))
    return out


def _stypes(circuit: Circuit) -> list[StabilizerType]:
    return [t for t in (StabilizerType.Z, StabilizerType.X) if circuit.measure_qubits_of(t)]


def _decodable(circuit: Circuit) -> bool:
    try:
        _layout(circuit)
    except ValueError:
        return False
    return True


class Pipeline:
    """Stage runner over one output directory."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.output_dir)
        self.artifacts: dict[str, str] = {}
        self.timings: dict[str, float] = {}

    def _path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def _note(self, key: str, path: Path):
        self.artifacts[key] = str(path.relative_to(self.out))

    # -- stages -------------------------------------------------------------
    def build_circuits(self, circuits: list[Circuit]):
        for c in circuits:
            self._note(f"circuit:{c.name}",
                       _write_json(self._path("circuits", f"{c.name}.json"), c.to_json(),
                                   "circuit.v1"))
        doc = models_to_json(by_circuit={
            c.name: {"by_gate": {g.id: g.error_model.to_dict() for g in c.gates},
                     "correlated": c.to_json()["error_models"]["correlated"]}
            for c in circuits})
        self._note("truth", _write_json(self._path("truth.json"), doc, "errormodel.v1"))

    def _circuits(self) -> dict[str, Circuit]:
        out = {}
        for key, rel in self.artifacts.items():
            if key.startswith("circuit:"):
                c = Circuit.from_json(_read_json(self.out / rel))
                out[c.name] = c
        return out

    def build_nests(self):
        for c in self._circuits().values():
            for t in _stypes(c):
                nest = build_nest(c.without_correlated(), t, include_zero=True)
                self._note(f"nest:{c.name}:{t.value}",
                           _write_json(self._path("nests", f"{c.name}.{t.value}.json"),
                                       export_nest(nest, c), "nest.v1"))

    def simulate(self):
        cfg = self.config
        seeds = self._seeds()[0]
        for (name, c), seed in zip(sorted(self._circuits().items()), seeds):
            records = simulate_sharded(c, cfg.rounds, seed, cfg.shards, threads=cfg.threads)
            self._path("records").mkdir(parents=True, exist_ok=True)
            for i, rec in enumerate(records):
                path = write_record(rec, self._path("records", f"{name}.{i}.mrec"))
                validate_document(_read_json(str(path) + ".json"), "mrec.v1")
                self._note(f"record:{name}:{i}", path)

    def _seeds(self) -> tuple[list[int], list[int]]:
        """Simulation seeds per circuit, then (observed, predicted) validation seed pairs."""
        n = len(self.config.circuits)
        seeds = derive_seeds(self.config.seed, 3 * n)
        return seeds[:n], seeds[n:]

    def _records(self, name: str):
        keys = sorted((k for k in self.artifacts if k.startswith(f"record:{name}:")),
                      key=lambda k: int(k.rsplit(":", 1)[1]))
        return [read_record(self.out / self.artifacts[k]) for k in keys]

    def extract(self):
        circuits = self._circuits()
        for key in sorted(k for k in self.artifacts if k.startswith("nest:")):
            _, name, t = key.split(":")
            nest = import_nest(_read_json(self.out / self.artifacts[key]))
            records = self._records(name)
            def fit(r, nest=nest, name=name):
                return estimate_nest(r, nest, self.config.policy, circuit=circuits[name],
                                     deconvolve=self.config.estimator != "count")

            if self.config.threads > 1 and len(records) > 1:
                with ThreadPoolExecutor(self.config.threads) as pool:
                    ests = list(pool.map(fit, records))
            else:
                ests = [fit(r) for r in records]
            est = merge_estimates(ests)
            self._note(f"estimate:{name}:{t}",
                       _write_json(self._path("estimates", f"{name}.{t}.json"), est.to_json(),
                                   "estnest.v1"))

    def _pairs(self):
        pairs = []
        for key in sorted(k for k in self.artifacts if k.startswith("nest:")):
            _, name, t = key.split(":")
            nest = import_nest(_read_json(self.out / self.artifacts[key]))
            est = EstimatedNest.from_json(
                _read_json(self.out / self.artifacts[f"estimate:{name}:{t}"]))
            pairs.append((name, t, nest, est))
        return pairs

    def invert(self):
        cfg = self.config
        pairs = self._pairs()
        system = build_system([(n, e) for _, _, n, e in pairs], cfg.parameterization,
                              method=cfg.estimator)
        result = solve(system)
        circuits = self._circuits()
        models = fitted_models(result, circuits)
        self._note("fit:models", _write_json(self._path("fit", "models.json"), models,
                                             "errormodel.v1"))
        self._note("fit:report", _write_json(self._path("fit", "report.json"),
                                             _clean(result.to_json()), "fitreport.v1"))
        truth = truth_values(result.unknowns, result.parameterization, circuits)
        table = []
        for u, v, s, ok, t in zip(result.unknowns, result.values, result.sigma,
                                  result.identifiable, truth):
            row = {"name": unknown_name(u), "truth": t, "identifiable": bool(ok),
                   "estimate": float(v) if ok else None, "sigma": float(s) if ok else None,
                   "z": None, "within_3sigma": None}
            if ok and t is not None:
                z = (v - t) / s if s > 0 else (0.0 if v == t else math.inf)
                row["z"] = float(z)
                row["within_3sigma"] = bool(abs(z) <= 3)
            table.append(row)
        combos = []
        for direction in result.nullspace_directions():
            # the sum over a nullspace direction's support, when estimable, is reported
            names = sorted(direction)
            value, sigma, estimable = result.combination({n: 1.0 for n in names})
            idx = [result.names.index(n) for n in names]
            t = [truth[i] for i in idx]
            tsum = None if any(x is None for x in t) else float(sum(t))
            entry = {"direction": direction, "sum_of": names, "estimable": estimable,
                     "estimate": value if estimable else None,
                     "sigma": sigma if estimable else None, "truth": tsum, "z": None}
            if estimable and tsum is not None and sigma > 0:
                entry["z"] = (value - tsum) / sigma
            combos.append(entry)
        return {
            "parameterization": result.parameterization.value,
            "rank": result.rank,
            "unknowns": len(result.names),
            "chi2": result.chi2,
            "dof": result.dof,
            "p_value": result.p_value if result.dof > 0 else None,
            "unidentifiable": result.unidentifiable,
            "table": table,
            "nullspace_sums": combos,
        }

    def class_table(self) -> list[dict]:
        circuits = self._circuits()
        rows = []
        for name, t, nest, est in self._pairs():
            truth_nest = build_nest(circuits[name].without_correlated(), t, include_zero=True)
            truth = {c.pattern.key(): c.parity_probability for c in truth_nest.classes}
            p, cov = est.estimate(self.config.estimator)
            for k, pk, var in zip(est.class_keys, p, np.diag(cov)):
                sd = math.sqrt(max(var, 0.0))
                tk = truth.get(k, 0.0)
                rows.append({
                    "circuit": name, "stabilizer_type": t,
                    "pattern": [list(e) for e in k],
                    "isolated_count": int(est.counts.get(k, 0)),
                    "truth": tk, "estimate": float(pk), "sigma": sd,
                    "z": (float(pk) - tk) / sd if sd > 0 else None,
                })
        return rows

    def validate(self):
        cfg = self.config
        circuits = self._circuits()
        models = _read_json(self._path("fit", "models.json"))
        rounds = cfg.validate_rounds or cfg.distance
        out = []
        pool = iter(self._seeds()[1])
        for name in sorted(circuits):
            truth = circuits[name]
            s_obs, s_pred = next(pool), next(pool)
            if not _decodable(truth):
                continue
            fitted = apply_models_document(truth.without_correlated(), models)
            weights = DecoderWeights.from_nest(build_nest(fitted))
            observed = logical_error_rate(truth, None, cfg.validate_trials, rounds, s_obs,
                                          weights=weights)
            predicted = logical_error_rate(fitted, None, cfg.validate_trials, rounds, s_pred,
                                           weights=weights)
            verdict = compare_predicted_vs_observed(observed, predicted, cfg.alpha)
            doc = verdict.to_json()
            self._note(f"validation:{name}",
                       _write_json(self._path("validation", f"{name}.json"), _clean(doc),
                                   "verdict.v1"))
            out.append({"circuit": name, "injected_correlated": len(truth.correlated),
                        **_clean(doc)})
        return out

    def correlate(self):
        out = []
        for name, c in sorted(self._circuits().items()):
            if len(_stypes(c)) < 2:
                continue
            record = self._records(name)[0]
            rep = cross_correlate(record, c, self.config.window, policy=self.config.policy)
            sig = rep.significant(self.config.alpha)
            doc = _clean(rep.to_json())
            doc["significant"] = _clean([
                {k: v for k, v in r.items() if k not in ("target", "given")} for r in sig])
            self._note(f"correlation:{name}",
                       _write_json(self._path("correlation", f"{name}.json"), doc,
                                   "correlation.v1"))
            out.append({"circuit": name, "significant_entries": len(sig),
                        "entries": len(rep.entries()), "coverage": rep.coverage(),
                        "verdict": "cross-nest excess" if sig else "null"})
        return out

    # -- driver -------------------------------------------------------------
    def run(self) -> PipelineOutcome:
        cfg = self.config
        try:
            circuits = cfg.check()
        except (ConfigError, SchemaError) as exc:
            return PipelineOutcome(2, None, str(exc))
        self.out.mkdir(parents=True, exist_ok=True)
        results: dict = {}
        steps = [
            ("build-circuit", lambda: self.build_circuits(circuits)),
            ("build-nest", self.build_nests),
            ("simulate", self.simulate),
            ("extract", self.extract),
            ("invert", self.invert),
            ("validate", self.validate),
            ("correlate", self.correlate),
        ]
        for stage, fn in steps:
            t0 = time.perf_counter()
            try:
                results[stage] = fn()
            except Exception as exc:  # noqa: BLE001 - reported with the stage name
                err = StageError(stage, exc)
                self._write_metadata(failed=stage, error=str(err))
                return PipelineOutcome(3, None, str(err), stage, self.out)
            self.timings[stage] = time.perf_counter() - t0
        try:
            report = self._report(circuits, results)
        except Exception as exc:  # noqa: BLE001
            err = StageError("report", exc)
            self._write_metadata(failed="report", error=str(err))
            return PipelineOutcome(3, None, str(err), "report", self.out)
        self._write_metadata()
        return PipelineOutcome(0, report, output_dir=self.out)

    def _report(self, circuits, results) -> dict:
        report = _clean({
            "schema": REPORT_SCHEMA,
            "config": {k: v for k, v in self.config.to_json().items()
                       if k not in ("output_dir", "threads")},
            "circuits": sorted(c.name for c in circuits),
            "classes": self.class_table(),
            "inversion": results["invert"],
            "validation": results["validate"],
            "correlation": results["correlate"],
            "artifacts": dict(sorted(self.artifacts.items())),
        })
        _write_json(self._path("report.json"), report, REPORT_SCHEMA)
        return report

    def _write_metadata(self, **extra):
        from . import __version__

        meta = {"created": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "version": __version__,
                "python": platform.python_version(), "threads": self.config.threads,
                "stage_seconds": self.timings, **extra}
        _write_json(self._path("metadata.json"), meta)


def run_pipeline(config: PipelineConfig) -> PipelineOutcome:
    """Run every stage; status 0 ok, 2 config error, 3 stage failure."""
    return Pipeline(config).run()


def acceptance_checks(report: dict) -> list[tuple[str, bool, str]]:
    """Statistical checks on a pipeline report: (name, passed, detail)."""
    checks = []
    rows = [r for r in report["inversion"]["table"] if r["within_3sigma"] is not None]
    bad = [r["name"] for r in rows if not r["within_3sigma"]]
    checks.append(("identifiable rates within 3 sigma", bool(rows) and not bad,
                   f"{len(rows) - len(bad)}/{len(rows)} ok" + (f", off: {bad}" if bad else "")))
    sums = [c for c in report["inversion"]["nullspace_sums"] if c["z"] is not None]
    bad = [c["sum_of"] for c in sums if abs(c["z"]) > 3]
    checks.append(("estimable sums of unidentifiable rates within 3 sigma", not bad,
                   f"{len(sums) - len(bad)}/{len(sums)} ok"))
    cls = [r for r in report["classes"] if r["z"] is not None]
    bad = [r for r in cls if abs(r["z"]) > 3]
    checks.append(("class probabilities within 3 sigma", bool(cls) and not bad,
                   f"{len(cls) - len(bad)}/{len(cls)} ok"))
    for v in report["validation"] or []:
        expected = OBSERVED_WORSE if v["injected_correlated"] else CONSISTENT
        checks.append((f"logical rate verdict on {v['circuit']}", v["verdict"] == expected,
                       f"{v['verdict']} (expected {expected}, p={v['p_value']:.3g})"))
    return checks
