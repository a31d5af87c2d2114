"""JSON schemas of every document the package reads or writes."""

from __future__ import annotations

from jsonschema import Draft202012Validator
from jsonschema.exceptions import ValidationError

_num = {"type": "number"}
_prob = {"type": "number", "minimum": 0, "maximum": 1}
_int = {"type": "integer"}
_nat = {"type": "integer", "minimum": 0}
_str = {"type": "string"}
_hash = {"type": "string", "pattern": "^[0-9a-f]{64}$"}
_stype = {"enum": ["X", "Z"]}
_terms = {"type": "object", "additionalProperties": _prob}

_event = {
    "type": "object",
    "required": ["measure_qubit", "round"],
    "properties": {"measure_qubit": _nat, "round": _int},
}
_pattern = {"type": "array", "items": _event}
_channel = {
    "type": "object",
    "required": ["qubits", "pauli", "probability", "layer"],
    "properties": {
        "qubits": {"type": "array", "items": _nat, "minItems": 1},
        "pauli": {"type": "string", "pattern": "^[IXYZ]+$"},
        "probability": _prob,
        "layer": _nat,
    },
}
_models = {
    "type": "object",
    "properties": {
        "by_kind": {"type": "object", "additionalProperties": _terms},
        "by_gate": {"type": "object", "additionalProperties": _terms},
        "correlated": {"type": "array", "items": _channel},
    },
}
_contributor = {
    "type": "object",
    "required": ["gate", "pauli", "probability"],
    "properties": {"gate": _str, "kind": _str, "pauli": _str, "probability": _prob,
                   "slots": _nat},
}
_policy = {
    "type": "object",
    "required": ["isolation_radius", "max_cluster_size"],
    "properties": {
        "isolation_radius": {"type": "array", "items": _nat, "minItems": 2, "maxItems": 2},
        "max_cluster_size": {"type": "integer", "minimum": 1},
    },
}
_trial = {
    "type": "object",
    "required": ["trials", "logical_failures", "rounds_per_trial", "rate", "interval"],
    "properties": {"trials": _nat, "logical_failures": _nat, "rounds_per_trial": _nat,
                   "rate": _prob, "interval": {"type": "array", "items": _prob}},
}

SCHEMAS: dict[str, dict] = {
    "circuit.v1": {
        "type": "object",
        "required": ["schema", "name", "num_qubits", "layers_per_period", "data_qubits",
                     "measure_qubits", "gates", "error_models"],
        "properties": {
            "schema": {"const": "circuit.v1"},
            "name": _str,
            "num_qubits": {"type": "integer", "minimum": 1},
            "layers_per_period": {"type": "integer", "minimum": 1},
            "data_qubits": {"type": "array", "items": _nat},
            "measure_qubits": {"type": "array", "items": {
                "type": "object",
                "required": ["qubit", "type"],
                "properties": {"qubit": _nat, "type": _stype,
                               "boundary": {"type": "array",
                                            "items": {"enum": ["left", "right"]}}},
            }},
            "gates": {"type": "array", "items": {
                "type": "object",
                "required": ["id", "kind", "qubits", "layer"],
                "properties": {"id": _str, "kind": _str,
                               "qubits": {"type": "array", "items": _nat, "minItems": 1,
                                          "maxItems": 2},
                               "layer": _nat, "slots": {"type": "integer", "minimum": 1}},
            }},
            "error_models": _models,
            "schedule_notes": _str,
        },
    },
    "errormodel.v1": {
        "type": "object",
        "required": ["schema"],
        "properties": {
            "schema": {"const": "errormodel.v1"},
            **_models["properties"],
            "by_circuit": {"type": "object", "additionalProperties": {
                "type": "object", "properties": {
                    "by_gate": {"type": "object", "additionalProperties": _terms}}}},
            "parameterization": _str,
            "unidentifiable": {"type": "array", "items": _str},
        },
    },
    "nest.v1": {
        "type": "object",
        "required": ["schema", "circuit", "circuit_hash", "stabilizer_type", "measure_qubits",
                     "classes", "undetectable"],
        "properties": {
            "schema": {"const": "nest.v1"},
            "circuit": _str,
            "circuit_hash": _hash,
            "stabilizer_type": _stype,
            "measure_qubits": {"type": "array", "items": _nat},
            "classes": {"type": "array", "items": {
                "type": "object",
                "required": ["pattern", "probability", "contributors"],
                "properties": {"pattern": {**_pattern, "minItems": 1}, "probability": _num,
                               "data_flip": {"type": "array", "items": _nat},
                               "contributors": {"type": "array", "items": _contributor,
                                                "minItems": 1}},
            }},
            "undetectable": {"type": "array", "items": _contributor},
            "plot": {"type": "object"},
        },
    },
    "estnest.v1": {
        "type": "object",
        "required": ["schema", "circuit", "circuit_hash", "stabilizer_type", "rounds", "classes",
                     "ignored", "unmatched"],
        "properties": {
            "schema": {"const": "estnest.v1"},
            "circuit": _str,
            "circuit_hash": _hash,
            "stabilizer_type": _stype,
            "measure_qubits": {"type": "array", "items": _nat},
            "rounds": _nat,
            "records": {"type": "integer", "minimum": 1},
            "policy": _policy,
            "classes": {"type": "array", "items": {
                "type": "object",
                "required": ["pattern", "count", "probability"],
                "properties": {"pattern": _pattern, "count": _nat, "probability": _num},
            }},
            "ignored": _nat,
            "unmatched": _nat,
            "unmatched_patterns": {"type": "array", "items": {
                "type": "object", "required": ["pattern", "count"],
                "properties": {"pattern": _pattern, "count": _nat}}},
            "time_edge": _nat,
            "total_clusters": _nat,
            "deconvolved": {
                "type": "object",
                "required": ["probabilities", "covariance"],
                "properties": {
                    "probabilities": {"type": "array", "items": _num},
                    "covariance": {"type": "array", "items": {"type": "array", "items": _num}},
                    "loglik": _num, "iterations": _nat, "anomalies": _nat,
                },
            },
        },
    },
    "mrec.v1": {
        "type": "object",
        "required": ["schema", "circuit_name", "circuit_hash", "model_fingerprint", "seed",
                     "rounds", "measure_qubits", "rng", "bit_order"],
        "properties": {
            "schema": {"const": "mrec.v1"},
            "circuit_name": _str,
            "circuit_hash": _hash,
            "model_fingerprint": _hash,
            "seed": _nat,
            "rounds": _nat,
            "measure_qubits": {"type": "array", "items": _nat},
            "rng": _str,
            "bit_order": _str,
        },
    },
    "fitreport.v1": {
        "type": "object",
        "required": ["schema", "parameterization", "rank", "unknowns", "unidentifiable",
                     "nullspace", "residuals", "chi2", "dof"],
        "properties": {
            "schema": {"const": "fitreport.v1"},
            "parameterization": _str,
            "forward": {"enum": ["linear", "parity"]},
            "rank": _nat,
            "unknowns": {"type": "array", "items": {
                "type": "object",
                "required": ["name", "value", "sigma", "identifiable"],
                "properties": {"name": _str, "value": {"type": ["number", "null"]},
                               "completion": _num, "sigma": {"type": ["number", "null"]},
                               "identifiable": {"type": "boolean"},
                               "interval": {"type": ["array", "null"], "items": _num}},
            }},
            "unidentifiable": {"type": "array", "items": _str},
            "nullspace": {"type": "array", "items": {"type": "object",
                                                     "additionalProperties": _num}},
            "residuals": {"type": "array"},
            "chi2": _num,
            "dof": _nat,
            "p_value": {"type": ["number", "null"]},
        },
    },
    "verdict.v1": {
        "type": "object",
        "required": ["schema", "verdict", "p_value", "observed", "predicted"],
        "properties": {
            "schema": {"const": "verdict.v1"},
            "verdict": {"enum": ["consistent", "observed-worse", "observed-better"]},
            "p_value": _prob,
            "z": _num,
            "alpha": _prob,
            "observed": _trial,
            "predicted": _trial,
        },
    },
    "correlation.v1": {
        "type": "object",
        "required": ["schema", "target", "given", "window", "rounds", "joint_counts", "entries"],
        "properties": {
            "schema": {"const": "correlation.v1"},
            "target": _stype,
            "given": _stype,
            "window": _nat,
            "rounds": _nat,
            "windows_examined": _nat,
            "joint_counts": {"type": "array", "items": {
                "type": "object", "required": ["target", "given", "offset", "count"],
                "properties": {"target": {"oneOf": [_pattern, {"const": "none"}]},
                               "given": _pattern, "offset": _int, "count": _nat}}},
            "entries": {"type": "array"},
            "significant": {"type": "array"},
            "confidence": _prob,
        },
    },
    "pipeline-report.v1": {
        "type": "object",
        "required": ["schema", "config", "circuits", "classes", "inversion", "validation",
                     "correlation", "artifacts"],
        "properties": {
            "schema": {"const": "pipeline-report.v1"},
            "config": {"type": "object"},
            "circuits": {"type": "array", "items": _str},
            "classes": {"type": "array"},
            "inversion": {"type": "object", "required": ["parameterization", "table"]},
            "validation": {"type": "array"},
            "correlation": {"type": "array"},
            "artifacts": {"type": "object", "additionalProperties": _str},
        },
    },
}

for _s in SCHEMAS.values():
    Draft202012Validator.check_schema(_s)


class SchemaError(ValueError):
    pass


def schema_of(doc) -> str:
    name = doc.get("schema") if isinstance(doc, dict) else None
    if name not in SCHEMAS:
        raise SchemaError(f"unknown or missing schema tag {name!r}")
    return name


def validate_document(doc, schema: str | None = None) -> str:
    """Validate ``doc`` against ``schema`` (default: its own ``schema`` tag); returns the name."""
    name = schema or schema_of(doc)
    if name not in SCHEMAS:
        raise SchemaError(f"unknown schema {name!r}")
    try:
        Draft202012Validator(SCHEMAS[name]).validate(doc)
    except ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{name}: {where}: {exc.message}") from None
    return name
