import numpy as np
import pytest

from nestfit import (
    ClusterPolicy, DetectionEvent, DetectionEventTransformer, DetectionPattern, EstimatedNest,
    NestEstimator, build_nest, build_repetition_circuit, classify_cluster, cluster_events,
    deconvolve_nest, depolarizing_models, detect_events, estimate_nest, merge_estimates,
    simulate,
)
from nestfit.extraction import TIME_EDGE, UNMATCHED, CircuitMismatch, event_matrix
from nestfit.schemas import validate_document
from nestfit.simulation import MeasurementRecord


def _record(circuit, rows):
    bits = np.array(rows, np.uint8)
    return MeasurementRecord(circuit.name, circuit.structure_hash(),
                             tuple(q for q, _ in circuit.measure_qubits), bits, 0,
                             circuit.model_fingerprint())


def test_detect_events_is_time_derivative(rep3):
    rec = _record(rep3, [[0, 0, 1, 1, 0], [0, 0, 0, 0, 0]])
    assert detect_events(rec) == [DetectionEvent(2, 1), DetectionEvent(4, 1)]
    assert event_matrix(rec.bits).tolist() == [[0, 0, 1, 0, 1], [0, 0, 0, 0, 0]]


def test_detect_events_across_chunks(rep3_noisy):
    rec = simulate(rep3_noisy, 200_000, seed=1)
    ev = event_matrix(rec.bits)
    rr, cc = np.nonzero(ev.T)
    expect = [DetectionEvent(int(r), rec.measure_qubits[c]) for r, c in zip(rr, cc)]
    assert detect_events(rec) == expect


def test_empty_record_rejected(rep3):
    rec = _record(rep3, np.zeros((2, 0)))
    with pytest.raises(ValueError):
        detect_events(rec)


def test_cluster_isolation():
    events = [(0, 1), (1, 1), (10, 1), (20, 1), (20, 3), (21, 3), (40, 3)]
    res = cluster_events(events, ClusterPolicy((2, 3), 2), positions={1: 0, 3: 1})
    sizes = sorted(len(c) for c in res.clusters)
    assert sizes == [1, 1, 2]
    assert res.ignored == 1


def test_cluster_rounds_apart_beyond_radius_split():
    res = cluster_events([(0, 1), (3, 1)], ClusterPolicy((2, 3), 2), positions={1: 0})
    assert len(res.clusters) == 2


def test_unsorted_events_rejected():
    with pytest.raises(ValueError):
        cluster_events([(5, 1), (2, 1)])


def test_policy_validation():
    with pytest.raises(ValueError):
        ClusterPolicy((0, 3))
    with pytest.raises(ValueError):
        ClusterPolicy((2, 3), 0)


def test_classify(rep3):
    nest = build_nest(rep3, include_zero=True)
    assert classify_cluster([(7, 1), (8, 1)], nest, rep3) == DetectionPattern([(0, 1), (1, 1)])
    assert classify_cluster([(7, 1)], nest, rep3) == DetectionPattern([(0, 1)])
    assert classify_cluster([(7, 1), (9, 1)], nest, rep3) == UNMATCHED
    assert classify_cluster([(7, 3), (8, 1)], nest, rep3) == UNMATCHED
    with pytest.raises(ValueError):
        classify_cluster([], nest)


def test_lone_interior_event_is_time_edge():
    c = build_repetition_circuit(5, depolarizing_models(0.0))
    nest = build_nest(c, include_zero=True)
    assert classify_cluster([(4, 3)], nest, c) == TIME_EDGE


@pytest.fixture(scope="module")
def rep3_estimate(rep3_noisy):
    nest = build_nest(rep3_noisy)
    rec = simulate(rep3_noisy, 200_000, seed=21)
    return nest, rec, estimate_nest(rec, nest, circuit=rep3_noisy)


def test_deconvolved_estimate_matches_nest(rep3_estimate):
    nest, _, est = rep3_estimate
    p, cov = est.estimate()
    sigma = np.sqrt(np.diag(cov))
    truth = np.array([c.parity_probability for c in nest.classes])
    assert np.all(np.abs(p - truth) <= 4 * sigma)


def test_counting_underestimates_when_clusters_overlap(rep3_estimate):
    nest, _, est = rep3_estimate
    counted, _ = est.counted()
    truth = np.array([c.probability for c in nest.classes])
    assert np.all(counted <= truth * 1.05)
    assert 0 < est.ignored_fraction < 0.5


def test_estimate_schema_and_round_trip(rep3_estimate):
    _, _, est = rep3_estimate
    doc = est.to_json()
    assert validate_document(doc) == "estnest.v1"
    back = EstimatedNest.from_json(doc)
    assert back.counts == est.counts
    np.testing.assert_allclose(back.estimate()[0], est.estimate()[0])
    assert back.dumps() == est.dumps()


def test_estimate_methods(rep3_estimate):
    _, _, est = rep3_estimate
    assert not np.allclose(est.estimate("count")[0], est.estimate("deconvolve")[0])
    with pytest.raises(ValueError):
        est.estimate("magic")


def test_mismatched_record_rejected(rep3_noisy, square):
    nest = build_nest(rep3_noisy)
    rec = simulate(build_repetition_circuit(4, depolarizing_models(0.005)), 100, seed=1)
    with pytest.raises(CircuitMismatch):
        estimate_nest(rec, nest)


def test_merge_adds_counts_and_pools_fit(rep3_noisy):
    nest = build_nest(rep3_noisy)
    recs = [simulate(rep3_noisy, 50_000, seed=s) for s in (1, 2)]
    parts = [estimate_nest(r, nest) for r in recs]
    merged = merge_estimates(parts)
    assert merged.rounds_observed == 100_000 and merged.records == 2
    for k in nest.index():
        assert merged.counts[k] == parts[0].counts[k] + parts[1].counts[k]
    var_m = np.diag(merged.estimate()[1])
    assert np.all(var_m < np.diag(parts[0].estimate()[1]))
    with pytest.raises(ValueError):
        merge_estimates([])


def test_deconvolve_recovers_single_class(rep3):
    from nestfit import GateErrorModel
    circ = rep3.with_models(overrides={"M1": GateErrorModel("MeasureZ", {"X": 0.03})})
    nest = build_nest(circ)
    fit = deconvolve_nest(simulate(circ, 100_000, seed=3), nest)
    (p,) = fit["probabilities"]
    assert abs(p - 0.03) < 4 * np.sqrt(fit["covariance"][0, 0])
    assert fit["anomalies"] == 0


def test_estimator_api(rep3_noisy):
    nest = build_nest(rep3_noisy)
    recs = [simulate(rep3_noisy, 20_000, seed=s) for s in (5, 6)]
    est = NestEstimator(nest=nest, circuit=rep3_noisy).fit(recs)
    assert est.predict().shape == (len(nest.classes),)
    assert est.class_errors_.shape == (len(nest.classes),)
    ev = DetectionEventTransformer().fit_transform(recs)
    assert ev[0].shape == recs[0].bits.shape


def test_estimator_consistency_large_classes():
    c = build_repetition_circuit(3, depolarizing_models(0.009))
    nest = build_nest(c)
    est = estimate_nest(simulate(c, 1_000_000, seed=2024), nest, circuit=c)
    p, _ = est.estimate()
    for cls, pk in zip(nest.classes, p):
        if cls.parity_probability >= 0.01:
            assert abs(pk - cls.parity_probability) <= 0.05 * cls.parity_probability


def test_sparseness_at_one_percent():
    c = build_repetition_circuit(3, depolarizing_models(0.01))
    est = estimate_nest(simulate(c, 200_000, seed=1), build_nest(c), deconvolve=False)
    assert est.ignored_fraction <= 0.01, f"ignored fraction {est.ignored_fraction:.3f}"
