import pytest

from nestfit.schemas import SCHEMAS, SchemaError, schema_of, validate_document


def test_known_schemas():
    for name in ("circuit.v1", "errormodel.v1", "nest.v1", "estnest.v1", "mrec.v1",
                 "fitreport.v1", "verdict.v1", "correlation.v1", "pipeline-report.v1"):
        assert name in SCHEMAS


def test_circuit_document_validates(rep3_noisy):
    assert validate_document(rep3_noisy.to_json()) == "circuit.v1"


def test_bad_documents_rejected(rep3_noisy):
    doc = rep3_noisy.to_json()
    doc["gates"][0]["qubits"] = [0, 1, 2]
    with pytest.raises(SchemaError, match="gates/0/qubits"):
        validate_document(doc)
    with pytest.raises(SchemaError):
        schema_of({"schema": "nope.v9"})
    with pytest.raises(SchemaError):
        schema_of([])
    with pytest.raises(SchemaError):
        validate_document({}, "nope.v9")


def test_probabilities_bounded():
    with pytest.raises(SchemaError):
        validate_document({"schema": "errormodel.v1", "by_kind": {"CZ": {"XX": 1.5}}})
    assert validate_document({"schema": "errormodel.v1", "by_kind": {"CZ": {"XX": 0.5}}})
