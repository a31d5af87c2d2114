import json
import sys
from pathlib import Path

import pytest

from nestfit import (
    GateErrorModel, build_parity_square_circuit, build_repetition_circuit, depolarizing_models,
)

DATA = Path(__file__).parent / "data"

# per-kind rates used by the round-trip tests
KIND_RATES = {"CZ": 0.005, "Hadamard": 0.001, "IdleMemory": 0.002, "MeasureZ": 0.005,
              "Init0": 0.005}


@pytest.fixture(scope="session")
def golden_table():
    return json.loads((DATA / "table1_golden.json").read_text())


@pytest.fixture(scope="session")
def zero_models():
    return depolarizing_models(0.0)


@pytest.fixture(scope="session")
def rep3(zero_models):
    return build_repetition_circuit(3, zero_models)


@pytest.fixture(scope="session")
def rep3_noisy():
    return build_repetition_circuit(3, depolarizing_models(0.005))


@pytest.fixture(scope="session")
def square(zero_models):
    return build_parity_square_circuit(zero_models)


def null_square(p=0.005, y=0.0):
    """2x2 code whose error terms each feed exactly one nest; ``y`` adds data Y terms."""
    zero = depolarizing_models(0.0)
    idle = {"X": p, "Y": y} if y else {"X": p}
    ov = {
        "I1": GateErrorModel("IdleMemory", idle), "I2": GateErrorModel("IdleMemory", idle),
        "H5": GateErrorModel("Hadamard", {"X": p}), "H6": GateErrorModel("Hadamard", {"X": p}),
        "H7": GateErrorModel("Hadamard", {"Z": p}), "H8": GateErrorModel("Hadamard", {"Z": p}),
        "M1": GateErrorModel("MeasureZ", {"X": p}), "M2": GateErrorModel("MeasureZ", {"X": p}),
        "|0>1": GateErrorModel("Init0", {"X": p}), "|0>2": GateErrorModel("Init0", {"X": p}),
    }
    return build_parity_square_circuit(zero).with_models(zero, overrides=ov)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def sparse_instances(distance=5, p=0.01, rounds=5, count=2000, seed=3):
    """Event lists (cell, round) of sampled noisy windows with 2..10 events, plus the weights."""
    import numpy as np

    from nestfit import build_nest, simulate_trials
    from nestfit.decoding import DecoderWeights, final_syndrome

    c = build_repetition_circuit(distance, depolarizing_models(p))
    weights = DecoderWeights.from_nest(build_nest(c))
    b = simulate_trials(c, 20 * count, rounds, seed=seed)
    ev = b.bits.copy()
    ev[:, :, 1:] ^= b.bits[:, :, :-1]
    fin = final_syndrome(c, b.bits[:, :, -1], b.final_data_x)
    full = np.concatenate([ev, fin[:, :, None]], axis=2)
    out = []
    for t in range(len(full)):
        cells, rr = np.nonzero(full[t])
        if 2 <= len(cells) <= 10:
            out.append(sorted(zip(cells.tolist(), rr.tolist()), key=lambda e: (e[1], e[0])))
            if len(out) == count:
                break
    return out, weights, distance - 1
