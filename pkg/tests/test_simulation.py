import json
import time

import numpy as np
import pytest

from nestfit import (
    GateErrorModel, build_repetition_circuit, depolarizing_models, read_record, simulate,
    simulate_sharded, simulate_trials, write_record,
)
from nestfit.schemas import validate_document
from nestfit.simulation import derive_seeds


def test_same_seed_same_bits(rep3_noisy):
    a = simulate(rep3_noisy, 20_000, seed=11)
    b = simulate(rep3_noisy, 20_000, seed=11)
    c = simulate(rep3_noisy, 20_000, seed=12)
    assert a == b
    assert not np.array_equal(a.bits, c.bits)


def test_record_header(rep3_noisy):
    rec = simulate(rep3_noisy, 100, seed=3)
    assert rec.bits.shape == (2, 100)
    assert rec.measure_qubits == (1, 3)
    assert rec.circuit_hash == rep3_noisy.structure_hash()
    assert rec.model_fingerprint == rep3_noisy.model_fingerprint()
    assert rec.final_data_x.shape == (3,)


def test_seed_is_mandatory(rep3_noisy):
    with pytest.raises(ValueError):
        simulate(rep3_noisy, 10, seed=None)
    with pytest.raises(ValueError):
        simulate(rep3_noisy, 0, seed=1)
    with pytest.raises(ValueError):
        simulate(rep3_noisy, 10, seed=-1)


def test_zero_noise_is_silent(rep3):
    assert not simulate(rep3, 10_000, seed=5).bits.any()


def test_measurement_flip_frequency(rep3):
    p = 0.05
    circ = rep3.with_models(overrides={"M1": GateErrorModel("MeasureZ", {"X": p})})
    rec = simulate(circ, 200_000, seed=9)
    rate = rec.row(1).mean()
    assert abs(rate - p) < 4 * np.sqrt(p * (1 - p) / rec.rounds)
    assert not rec.row(3).any()


def test_correlated_channel_fires(rep3):
    from nestfit.circuit import CorrelatedChannel
    circ = rep3.with_models(correlated=(CorrelatedChannel((0, 2), "XX", 0.02, 2),))
    rec = simulate(circ, 50_000, seed=2)
    # XX on both neighbours of the left check leaves its parity alone
    assert not rec.row(1).any() and rec.row(3).any()


def test_mrec_round_trip(tmp_path, rep3_noisy):
    rec = simulate(rep3_noisy, 12_345, seed=77)
    path = write_record(rec, tmp_path / "r.mrec")
    side = json.loads((tmp_path / "r.mrec.json").read_text())
    assert validate_document(side) == "mrec.v1"
    back = read_record(path)
    assert back == rec
    assert back.circuit_name == rec.circuit_name
    assert path.stat().st_size < 2 * 12_345 // 8 + 256


def test_read_rejects_garbage(tmp_path):
    p = tmp_path / "bad.mrec"
    p.write_bytes(b"NOPE" + bytes(200))
    with pytest.raises(ValueError):
        read_record(p)


def test_sharding_reproducible_and_independent(rep3_noisy):
    a = simulate_sharded(rep3_noisy, 5_000, base_seed=4, shards=3)
    b = simulate_sharded(rep3_noisy, 5_000, base_seed=4, shards=3, threads=3)
    assert a == b
    assert len({r.seed for r in a}) == 3
    assert not np.array_equal(a[0].bits, a[1].bits)
    assert derive_seeds(4, 3) == [r.seed for r in a]


def test_trials_shape(rep3_noisy):
    batch = simulate_trials(rep3_noisy, 100, 3, seed=1)
    assert batch.bits.shape == (100, 2, 3)
    assert batch.final_data_x.shape == (100, 3)


def test_throughput(rep3_noisy):
    simulate(rep3_noisy, 1000, seed=0)
    start = time.perf_counter()
    simulate(rep3_noisy, 500_000, seed=0)
    rate = 500_000 / (time.perf_counter() - start)
    assert rate >= 1e5


def test_distance5_runs():
    c = build_repetition_circuit(5, depolarizing_models(0.005))
    rec = simulate(c, 10_000, seed=8)
    assert rec.bits.shape == (4, 10_000) and rec.bits.any()
