"""Command-line front end.

Exit codes: 0 success, 2 configuration or input error, 3 stage failure,
4 statistical acceptance failure (``roundtrip`` only). Any flag can also be given
in a JSON file passed with ``--config``; flags on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .circuit import (
    Circuit, CircuitError, StabilizerType, apply_models_document, build_parity_square_circuit,
    build_repetition_circuit, depolarizing_models,
)
from .correlation import cross_correlate, temporal_autocorrelate
from .decoding import DecoderWeights, compare_predicted_vs_observed, logical_error_rate
from .extraction import ClusterPolicy, EstimatedNest, estimate_nest, merge_estimates
from .inversion import Parameterization, build_system, fitted_models, solve
from .nest import build_nest, export_nest, import_nest
from .pipeline import BUILTIN, ConfigError, PipelineConfig, acceptance_checks, run_pipeline
from .propagation import ErrorLocation, error_table, propagate_single
from .schemas import SchemaError, validate_document
from .simulation import derive_seeds, read_record, simulate_sharded, write_record

log = logging.getLogger("nestfit")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_ACCEPTANCE = 0, 2, 3, 4


class InputError(ValueError):
    """Bad or inconsistent input files: reported with exit code 2."""


# -- helpers -----------------------------------------------------------------

def _load_json(path, schema: str | None = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from None
    if schema is not None:
        try:
            validate_document(doc, schema)
        except SchemaError as exc:
            raise InputError(f"{path}: {exc}") from None
    return doc


def _load_circuit(path) -> Circuit:
    try:
        return Circuit.from_json(_load_json(path, "circuit.v1"))
    except CircuitError as exc:
        raise InputError(f"{path}: {exc}") from None


def _load_record(path):
    try:
        rec = read_record(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    return rec


def _emit(doc, out, schema: str | None = None):
    if schema is not None:
        validate_document(doc, schema)
    text = json.dumps(doc, indent=2, allow_nan=False) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, [])]
    if missing:
        raise InputError("missing required option(s): "
                         + ", ".join("--" + n.replace("_", "-") for n in missing))


def _policy(args) -> ClusterPolicy:
    try:
        return ClusterPolicy(tuple(args.isolation_radius), args.max_cluster_size)
    except ValueError as exc:
        raise InputError(str(exc)) from None


# -- commands ----------------------------------------------------------------

def cmd_build_circuit(args) -> int:
    _need(args, "out")
    models = depolarizing_models(args.p)
    if args.kind == "repetition":
        circuit = build_repetition_circuit(args.distance, models)
    else:
        circuit = build_parity_square_circuit(models)
    if args.models:
        circuit = apply_models_document(circuit, _load_json(args.models, "errormodel.v1"))
    _emit(circuit.to_json(), args.out, "circuit.v1")
    return EXIT_OK


def cmd_build_nest(args) -> int:
    _need(args, "circuit", "out")
    circuit = _load_circuit(args.circuit)
    stype = StabilizerType(args.type)
    if not circuit.measure_qubits_of(stype):
        raise InputError(f"circuit {circuit.name} has no {stype.value}-type checks")
    nest = build_nest(circuit, stype, include_zero=args.structure)
    doc = export_nest(nest, circuit, plot_layers=args.plot_layers)
    _emit(doc, args.out, "nest.v1")
    if args.plot_data:
        _emit(doc["plot"], args.plot_data)
    return EXIT_OK


def cmd_simulate(args) -> int:
    _need(args, "circuit", "rounds", "out")
    circuit = _load_circuit(args.circuit)
    records = simulate_sharded(circuit, args.rounds, args.seed, args.shards, threads=args.threads)
    out = Path(args.out)
    paths = []
    for i, rec in enumerate(records):
        path = out if len(records) == 1 else out.with_name(f"{out.stem}.{i}{out.suffix}")
        path.parent.mkdir(parents=True, exist_ok=True)
        write_record(rec, path)
        paths.append(str(path))
    log.info("simulated %d x %d rounds of %s", len(records), args.rounds, circuit.name)
    sys.stdout.write(json.dumps({"records": paths}) + "\n")
    return EXIT_OK


def cmd_oracle(args) -> int:
    _need(args, "circuit")
    circuit = _load_circuit(args.circuit)
    if args.table:
        _emit({"circuit": circuit.name, "rows": error_table(circuit, pure=args.pure)}, args.out)
        return EXIT_OK
    _need(args, "gate", "pauli")
    try:
        pattern = propagate_single(circuit, ErrorLocation(args.gate, args.pauli, args.round))
    except (KeyError, ValueError) as exc:
        raise InputError(str(exc)) from None
    _emit({"gate": args.gate, "pauli": args.pauli, "round": args.round,
           "events": pattern.to_json()}, args.out)
    return EXIT_OK


def cmd_extract(args) -> int:
    _need(args, "record", "nest", "out")
    nest = import_nest(_load_json(args.nest, "nest.v1"))
    circuit = _load_circuit(args.circuit) if args.circuit else None
    policy = _policy(args)
    ests = []
    for path in args.record:
        rec = _load_record(path)
        if rec.circuit_hash != nest.circuit_hash:
            raise InputError(f"{path} was not recorded on the circuit of {args.nest}")
        ests.append(estimate_nest(rec, nest, policy, circuit=circuit,
                                  deconvolve=not args.no_deconvolve))
    _emit(merge_estimates(ests).to_json(), args.out, "estnest.v1")
    return EXIT_OK


def cmd_invert(args) -> int:
    _need(args, "est", "nest", "out")
    nests = {}
    for path in args.nest:
        n = import_nest(_load_json(path, "nest.v1"))
        nests[(n.circuit_hash, n.stabilizer_type)] = n
    pairs = []
    for path in args.est:
        e = EstimatedNest.from_json(_load_json(path, "estnest.v1"))
        n = nests.get((e.circuit_hash, e.stabilizer_type))
        if n is None:
            raise InputError(f"no --nest given for the circuit and stabilizer type of {path}")
        pairs.append((n, e))
    if args.circuit:
        circuits = {c.name: c for c in map(_load_circuit, args.circuit)}
    else:
        circuits = {}
    missing = {n.circuit_name for n, _ in pairs} - set(circuits)
    try:
        param = Parameterization.parse(args.param)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if missing and param is not Parameterization.PER_KIND:
        raise InputError(f"gate-level models need --circuit for {sorted(missing)}")
    result = solve(build_system(pairs, param, forward=args.forward, method=args.estimator))
    _emit(fitted_models(result, circuits), args.out, "errormodel.v1")
    report = result.to_json()
    if args.report:
        _emit(report, args.report, "fitreport.v1")
    for name in result.unidentifiable:
        log.warning("unidentifiable: %s", name)
    return EXIT_OK


def cmd_validate(args) -> int:
    _need(args, "circuit", "models", "truth")
    circuit = _load_circuit(args.circuit).without_correlated()
    fitted = apply_models_document(circuit, _load_json(args.models, "errormodel.v1"))
    truth = apply_models_document(circuit, _load_json(args.truth, "errormodel.v1"))
    weights = DecoderWeights.from_nest(build_nest(fitted))
    s_obs, s_pred = derive_seeds(args.seed, 2)
    rounds = args.rounds or max(1, (len(circuit.data_qubits)))
    observed = logical_error_rate(truth, None, args.trials, rounds, s_obs, weights=weights)
    predicted = logical_error_rate(fitted, None, args.trials, rounds, s_pred, weights=weights)
    verdict = compare_predicted_vs_observed(observed, predicted, args.alpha)
    _emit(verdict.to_json(), args.out, "verdict.v1")
    return EXIT_OK


def cmd_correlate(args) -> int:
    _need(args, "record", "circuit")
    circuit = _load_circuit(args.circuit)
    rec = _load_record(args.record)
    if rec.circuit_hash != circuit.structure_hash():
        raise InputError(f"{args.record} was not recorded on {args.circuit}")
    if not circuit.measure_qubits_of(StabilizerType.X):
        raise InputError(f"circuit {circuit.name} lacks X-type measure qubits")
    rep = cross_correlate(rec, circuit, args.window, given=args.given, policy=_policy(args))
    doc = rep.to_json()
    doc["significant"] = [
        {k: v for k, v in r.items() if k not in ("target", "given")}
        | {"excess_interval": list(r["excess_interval"])}
        for r in rep.significant(args.alpha)
    ]
    if args.max_lag:
        doc["autocorrelation"] = temporal_autocorrelate(rec, args.max_lag).to_json()
    _emit(doc, args.out, "correlation.v1")
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    fields = {
        "output_dir": args.out_dir, "seed": args.seed, "distance": args.distance,
        "circuits": args.circuit or list(BUILTIN), "rounds": args.rounds, "shards": args.shards,
        "isolation_radius": tuple(args.isolation_radius),
        "max_cluster_size": args.max_cluster_size, "parameterization": args.param,
        "estimator": args.estimator, "validate_trials": args.trials,
        "validate_rounds": args.validate_rounds, "window": args.window, "alpha": args.alpha,
        "threads": args.threads, "correlated": args.correlated or [],
    }
    if args.truth is not None:
        fields["truth"] = args.truth
    config = PipelineConfig(**fields)
    outcome = run_pipeline(config)
    if outcome.status == 2:
        raise ConfigError(outcome.error)
    if outcome.status != 0:
        log.error("%s", outcome.error)
        return outcome.status
    ok = True
    for name, passed, detail in acceptance_checks(outcome.report):
        sys.stdout.write(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}\n")
        ok &= passed
    sys.stdout.write(f"report: {Path(config.output_dir) / 'report.json'}\n")
    return EXIT_OK if ok else EXIT_ACCEPTANCE


# -- parser ------------------------------------------------------------------

SEEDED = {"simulate", "validate", "roundtrip"}


def _json_arg(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for sharded simulation (default 1)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    cluster = argparse.ArgumentParser(add_help=False)
    cluster.add_argument("--isolation-radius", type=int, nargs=2, default=[2, 3],
                         metavar=("CELLS", "ROUNDS"))
    cluster.add_argument("--max-cluster-size", type=int, default=2)

    p = argparse.ArgumentParser(prog="nestfit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-circuit", parents=[common], help="write a circuit.v1 document")
    s.add_argument("--kind", choices=["repetition", "parity-square"], default="repetition")
    s.add_argument("--distance", type=int, default=3)
    s.add_argument("--p", type=float, default=0.0, help="depolarizing rate for every gate kind")
    s.add_argument("--models", help="errormodel.v1 document applied on top")
    s.add_argument("--out")
    s.set_defaults(func=cmd_build_circuit)

    s = sub.add_parser("build-nest", parents=[common], help="analytic nest of a circuit")
    s.add_argument("--circuit")
    s.add_argument("--type", choices=["Z", "X"], default="Z")
    s.add_argument("--structure", action="store_true",
                   help="enumerate every legal term, including zero-probability ones")
    s.add_argument("--out")
    s.add_argument("--plot-data")
    s.add_argument("--plot-layers", type=int, default=6)
    s.set_defaults(func=cmd_build_nest)

    s = sub.add_parser("simulate", parents=[common], help="sample an mrec.v1 record")
    s.add_argument("--circuit")
    s.add_argument("--rounds", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--shards", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("oracle", parents=[common], help="detection pattern of one error")
    s.add_argument("--circuit")
    s.add_argument("--gate")
    s.add_argument("--pauli")
    s.add_argument("--round", type=int, default=0)
    s.add_argument("--table", action="store_true", help="every single-error row")
    s.add_argument("--pure", action="store_true", help="with --table: pure X/Z labels only")
    s.add_argument("--out")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("extract", parents=[common, cluster], help="estimate a nest from a record")
    s.add_argument("--record", action="append")
    s.add_argument("--nest")
    s.add_argument("--circuit")
    s.add_argument("--no-deconvolve", action="store_true",
                   help="skip the likelihood fit and keep isolated counts only")
    s.add_argument("--out")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("invert", parents=[common], help="fit gate error models")
    s.add_argument("--est", action="append")
    s.add_argument("--nest", action="append")
    s.add_argument("--circuit", action="append", help="circuit files, for gate-level output")
    s.add_argument("--param", default="per-gate",
                   help="per-term, per-gate or per-kind (default per-gate)")
    s.add_argument("--forward", choices=["parity", "linear"], default="parity")
    s.add_argument("--estimator", choices=["auto", "count", "deconvolve"], default="auto")
    s.add_argument("--out")
    s.add_argument("--report", help="fitreport.v1 output")
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("validate", parents=[common],
                       help="compare logical error rates of fitted and true models")
    s.add_argument("--circuit")
    s.add_argument("--models")
    s.add_argument("--truth")
    s.add_argument("--trials", type=int, default=100_000)
    s.add_argument("--rounds", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--out")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("correlate", parents=[common, cluster], help="cross-nest correlations")
    s.add_argument("--record")
    s.add_argument("--circuit")
    s.add_argument("--window", type=int, default=2)
    s.add_argument("--given", choices=["X", "Z"], default="X")
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--max-lag", type=int, default=0, help="also report autocorrelations")
    s.add_argument("--out")
    s.set_defaults(func=cmd_correlate)

    s = sub.add_parser("roundtrip", parents=[common, cluster],
                       help="full pipeline plus statistical acceptance checks")
    s.add_argument("--out-dir", default="nestfit-run")
    s.add_argument("--seed", type=int)
    s.add_argument("--distance", type=int, default=3)
    s.add_argument("--circuit", action="append",
                   help=f"builtin ({', '.join(BUILTIN)}) or circuit.v1 path; repeatable")
    s.add_argument("--truth", type=_json_arg,
                   help="errormodel.v1 path or JSON map of kind -> depolarizing rate")
    s.add_argument("--correlated", type=_json_arg,
                   help="JSON list of extra channels, each with a circuit name")
    s.add_argument("--rounds", type=int, default=1_000_000)
    s.add_argument("--shards", type=int, default=1)
    s.add_argument("--param", default="per-kind")
    s.add_argument("--estimator", choices=["auto", "count", "deconvolve"], default="auto")
    s.add_argument("--trials", type=int, default=200_000)
    s.add_argument("--validate-rounds", type=int)
    s.add_argument("--window", type=int, default=2)
    s.add_argument("--alpha", type=float, default=0.01)
    s.set_defaults(func=cmd_roundtrip)

    p._command_parsers = sub.choices
    return p


def _apply_config(parser, args, argv):
    """Reparse with the config file's values as defaults so explicit flags still win."""
    doc = _load_json(args.config)
    if not isinstance(doc, dict):
        raise InputError("config must be a JSON object")
    sub = parser._command_parsers[args.command]
    dests = {a.dest for a in sub._actions}
    doc = {k.replace("-", "_"): v for k, v in doc.items()}
    unknown = set(doc) - dests - {"config"}
    if unknown:
        raise InputError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    sub.set_defaults(**doc)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.config:
            args = _apply_config(parser, args, argv)
        if args.command in SEEDED and args.seed is None:
            raise InputError(f"{args.command} needs --seed (no implicit entropy)")
        if args.threads < 1:
            raise InputError("--threads must be >= 1")
        return args.func(args)
    except (InputError, ConfigError, SchemaError, CircuitError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any compute failure is a stage failure
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
