import numpy as np
import pytest

from nestfit import (
    EstimatedNest, ErrorModelInverter, Parameterization, StabilizerType, build_nest,
    build_parity_square_circuit, build_repetition_circuit, build_system, depolarizing_models,
    fitted_models, solve,
)
from nestfit.circuit import apply_models_document
from nestfit.schemas import validate_document

from conftest import KIND_RATES


def _exact_estimate(truth_nest, structure, forward="parity", rel_sigma=1e-3):
    """EstimatedNest whose fit equals the analytic class probabilities."""
    probs = {c.pattern.key(): (c.parity_probability if forward == "parity" else c.probability)
             for c in truth_nest.classes}
    keys = tuple(c.pattern.key() for c in structure.classes)
    p = np.array([probs.get(k, 0.0) for k in keys])
    cov = np.diag((rel_sigma * np.maximum(p, 1e-6)) ** 2)
    est = EstimatedNest(structure.circuit_name, structure.circuit_hash, structure.stabilizer_type,
                        structure.measure_qubits, keys, dict.fromkeys(keys, 0), 1)
    est.deconvolved = {"probabilities": p, "covariance": cov, "loglik": 0.0, "iterations": 0,
                       "anomalies": 0}
    return est


def _pairs(circuits, forward="parity"):
    pairs = []
    for c in circuits:
        for t in sorted({s.value for _, s in c.measure_qubits}):
            structure = build_nest(c, t, include_zero=True)
            pairs.append((structure, _exact_estimate(build_nest(c, t), structure, forward)))
    return pairs


@pytest.fixture(scope="module")
def truth_circuits():
    models = depolarizing_models(KIND_RATES)
    return [build_repetition_circuit(3, models), build_parity_square_circuit(models)]


@pytest.mark.parametrize("forward", ["parity", "linear"])
def test_per_kind_exact_recovery(truth_circuits, forward):
    res = solve(build_system(_pairs(truth_circuits, forward), "per_kind", forward=forward))
    rates = res.rates
    for kind in ("CZ", "Hadamard", "IdleMemory"):
        assert abs(rates[kind] - KIND_RATES[kind]) <= 1e-10
    assert set(res.unidentifiable) == {"Init0", "MeasureZ"}
    value, _, ok = res.combination({"Init0": 1, "MeasureZ": 1})
    assert ok and abs(value - KIND_RATES["Init0"] - KIND_RATES["MeasureZ"]) <= 1e-10
    assert not res.combination({"Init0": 1})[2]
    (direction,) = res.nullspace_directions()
    assert set(direction) == {"Init0", "MeasureZ"}
    assert direction["Init0"] == pytest.approx(-direction["MeasureZ"])


def test_per_gate_rank_and_flags(truth_circuits):
    system = build_system(_pairs(truth_circuits), "per_gate")
    res = solve(system)
    assert res.rank == system.rank() < len(res.names)
    for name, rate in res.rates.items():
        assert (rate is None) == (name in res.unidentifiable)


def test_rep_only_flags_data_z_direction():
    c = build_repetition_circuit(3, depolarizing_models(KIND_RATES))
    res = solve(build_system(_pairs([c]), "per_term"))
    flagged = set(res.unidentifiable)
    for gate in ("I1", "I2", "I3"):
        assert f"repetition-d3:{gate}(Z)" in flagged
        assert res.rates[f"repetition-d3:{gate}(Z)"] is None


def test_square_sees_data_z():
    def column(circuit, name):
        system = build_system(_pairs([circuit]), "per_term")
        return system.matrix[:, system.names.index(name)]

    models = depolarizing_models(KIND_RATES)
    assert not column(build_repetition_circuit(3, models), "repetition-d3:I1(Z)").any()
    assert column(build_parity_square_circuit(models), "parity-square:I1(Z)").any()


def test_fitted_models_document(truth_circuits):
    res = solve(build_system(_pairs(truth_circuits), "per_kind"))
    doc = fitted_models(res, {c.name: c for c in truth_circuits})
    assert validate_document(doc) == "errormodel.v1"
    assert set(doc["unidentifiable"]) == {"Init0", "MeasureZ"}
    circ = apply_models_document(truth_circuits[0], doc)
    assert circ.gate("CZ1").error_model.total == pytest.approx(KIND_RATES["CZ"], abs=1e-9)


def test_fit_report_schema(truth_circuits):
    res = solve(build_system(_pairs(truth_circuits), "per_gate"))
    doc = res.to_json()
    assert validate_document(doc) == "fitreport.v1"
    assert doc["rank"] == res.rank


def test_estimator_api(truth_circuits):
    pairs = _pairs(truth_circuits)
    inv = ErrorModelInverter("per_kind").fit(pairs)
    np.testing.assert_allclose(inv.predict(), inv.system_.rhs, atol=1e-12)
    assert "CZ" in inv.rates_
    assert inv.models({c.name: c for c in truth_circuits})["schema"] == "errormodel.v1"


def test_errors(truth_circuits):
    with pytest.raises(ValueError):
        build_system([], "per_kind")
    with pytest.raises(ValueError):
        Parameterization.parse("per-banana")
    with pytest.raises(ValueError):
        build_system(_pairs(truth_circuits), "per_kind", forward="cubic")
    (s1, e1), (s2, _) = _pairs(truth_circuits)[:2]
    with pytest.raises(ValueError):
        build_system([(s2, e1)], "per_kind")


def test_strongly_negative_estimate_rejected(truth_circuits):
    structure, est = _pairs(truth_circuits)[0]
    est.deconvolved["probabilities"] = est.deconvolved["probabilities"].copy()
    est.deconvolved["probabilities"][0] = -1.0
    with pytest.raises(ValueError):
        solve(build_system([(structure, est)], "per_kind"))


def test_parameterization_aliases():
    assert Parameterization.parse("per-gate") is Parameterization.PER_GATE
    assert Parameterization.parse("per_kind_depolarizing") is Parameterization.PER_KIND
    assert StabilizerType("X") is StabilizerType.X


def test_outputs_never_negative(truth_circuits):
    rng = np.random.default_rng(0)
    for _ in range(20):
        pairs = _pairs(truth_circuits)
        for _, est in pairs:
            p = est.deconvolved["probabilities"]
            noisy = p + rng.normal(0, 0.2, p.shape) * np.maximum(p, 1e-4)
            est.deconvolved["probabilities"] = noisy
            est.deconvolved["covariance"] = np.diag((0.2 * np.maximum(p, 1e-4)) ** 2)
        for param in ("per_kind", "per_gate", "per_term"):
            res = solve(build_system(pairs, param))
            assert np.all(res.values >= 0)
