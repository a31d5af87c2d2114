"""Seeded Pauli-frame Monte Carlo of the cyclic circuit and the ``mrec.v1`` record format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .circuit import LEGAL_LABELS, Circuit, GateKind

MREC_MAGIC = b"MREC"
MREC_VERSION = 1
RNG_NAME = "numpy.random.Philox"
_HEADER = struct.Struct("<4sHH32s32sQQII")

_OP_IDLE, _OP_H, _OP_CZ, _OP_MEAS, _OP_INIT, _OP_CHANNEL = range(6)
_KIND_CODE = {
    GateKind.IDLE: _OP_IDLE,
    GateKind.HADAMARD: _OP_H,
    GateKind.CZ: _OP_CZ,
    GateKind.MEASURE: _OP_MEAS,
    GateKind.INIT0: _OP_INIT,
}
_CHUNK = 1 << 15


@dataclass
class MeasurementRecord:
    """Raw measurement stream: ``bits[i, r]`` is measure qubit ``measure_qubits[i]`` at round ``r``."""

    circuit_name: str
    circuit_hash: str
    measure_qubits: tuple[int, ...]
    bits: np.ndarray
    seed: int
    model_fingerprint: str
    rng: str = RNG_NAME
    final_data_x: np.ndarray | None = field(default=None, repr=False)

    @property
    def rounds(self) -> int:
        return int(self.bits.shape[1])

    @property
    def num_measure(self) -> int:
        return int(self.bits.shape[0])

    def row(self, qubit: int) -> np.ndarray:
        return self.bits[self.measure_qubits.index(qubit)]

    def header(self) -> dict:
        return {
            "schema": "mrec.v1",
            "circuit": self.circuit_name,
            "circuit_hash": self.circuit_hash,
            "model_fingerprint": self.model_fingerprint,
            "seed": int(self.seed),
            "rounds": self.rounds,
            "measure_qubits": list(self.measure_qubits),
            "rng": self.rng,
            "bit_order": "one row per measure qubit, rounds packed LSB-first, rows byte-padded",
        }

    def __eq__(self, other):
        if not isinstance(other, MeasurementRecord):
            return NotImplemented
        return self.header() == other.header() and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class _Compiled:
    code: np.ndarray      # (n_ops,) op kind
    q0: np.ndarray
    q1: np.ndarray
    cum: np.ndarray       # (n_ops, 15) cumulative term probabilities
    nterm: np.ndarray
    xm: np.ndarray        # (n_ops, 15) X mask of each term
    zm: np.ndarray
    meas_row: np.ndarray  # (n_ops,) record row of MeasureZ ops, -1 otherwise
    active: np.ndarray    # op indices with nonzero error probability
    data_mask: int


def _compile(circuit: Circuit) -> _Compiled:
    ops = []
    for g in circuit.gates:
        terms = [(label, g.error_model.terms.get(label, 0.0)) for label in LEGAL_LABELS[g.kind]]
        ops.append((g.layer, 0, _KIND_CODE[g.kind], g.qubits, terms))
    for ch in circuit.correlated:
        ops.append((ch.layer, 1, _OP_CHANNEL, ch.qubits, [(ch.pauli, ch.probability)]))
    ops.sort(key=lambda o: (o[0], o[1]))
    n = len(ops)
    code = np.zeros(n, np.int64)
    q0 = np.zeros(n, np.int64)
    q1 = np.zeros(n, np.int64)
    cum = np.zeros((n, 15))
    nterm = np.zeros(n, np.int64)
    xm = np.zeros((n, 15), np.int64)
    zm = np.zeros((n, 15), np.int64)
    meas_row = -np.ones(n, np.int64)
    rows = {q: i for i, (q, _) in enumerate(circuit.measure_qubits)}
    for i, (_, _, c, qubits, terms) in enumerate(ops):
        code[i] = c
        q0[i] = qubits[0]
        q1[i] = qubits[1] if len(qubits) > 1 else -1
        if c == _OP_MEAS:
            meas_row[i] = rows[qubits[0]]
        total = 0.0
        for j, (label, p) in enumerate(terms):
            total += p
            cum[i, j] = total
            for q, s in zip(qubits, label):
                if s in "XY":
                    xm[i, j] |= 1 << q
                if s in "ZY":
                    zm[i, j] |= 1 << q
        nterm[i] = len(terms)
    active = np.array([i for i in range(n) if cum[i, nterm[i] - 1] > 0.0], np.int64)
    data_mask = 0
    for q in circuit.data_qubits:
        data_mask |= 1 << q
    return _Compiled(code, q0, q1, cum, nterm, xm, zm, meas_row, active, data_mask)


@numba.njit(cache=True, nogil=True)
def _run(code, q0, q1, cum, nterm, xm, zm, meas_row, active, u, bits, fx, fz, r0):
    """Advance frames (fx, fz) of ``trials`` independent streams over ``u.shape[1]`` rounds.

    ``u[trial, round, k]`` is the uniform draw for op ``active[k]``.
    """
    n_ops = code.shape[0]
    trials, rounds, _ = u.shape
    slot = -np.ones(n_ops, np.int64)
    for k in range(active.shape[0]):
        slot[active[k]] = k
    for t in range(trials):
        x = fx[t]
        z = fz[t]
        for r in range(rounds):
            for i in range(n_ops):
                c = code[i]
                a = q0[i]
                if c == _OP_H:
                    ba = (x >> a) & 1
                    bz = (z >> a) & 1
                    x = (x & ~(1 << a)) | (bz << a)
                    z = (z & ~(1 << a)) | (ba << a)
                elif c == _OP_CZ:
                    b = q1[i]
                    if (x >> b) & 1:
                        z ^= 1 << a
                    if (x >> a) & 1:
                        z ^= 1 << b
                elif c == _OP_INIT:
                    x &= ~(1 << a)
                    z &= ~(1 << a)
                k = slot[i]
                fired = -1
                if k >= 0:
                    v = u[t, r, k]
                    if v < cum[i, nterm[i] - 1]:
                        j = 0
                        while v >= cum[i, j]:
                            j += 1
                        fired = j
                if c == _OP_MEAS:
                    out = (x >> a) & 1
                    if fired >= 0:
                        out ^= 1
                    bits[t, meas_row[i], r0 + r] = out
                elif fired >= 0:
                    x ^= xm[i, fired]
                    z ^= zm[i, fired]
        fx[t] = x
        fz[t] = z


def _draw(rng, compiled, trials, rounds):
    return rng.random((trials, rounds, compiled.active.shape[0]))


def _run_stream(circuit, rounds, rng, trials=1):
    compiled = _compile(circuit)
    bits = np.zeros((trials, circuit.num_measure, rounds), np.uint8)
    fx = np.zeros(trials, np.int64)
    fz = np.zeros(trials, np.int64)
    args = (compiled.code, compiled.q0, compiled.q1, compiled.cum, compiled.nterm,
            compiled.xm, compiled.zm, compiled.meas_row, compiled.active)
    if trials == 1:
        for start in range(0, rounds, _CHUNK):
            n = min(_CHUNK, rounds - start)
            _run(*args, _draw(rng, compiled, 1, n), bits, fx, fz, start)
    else:
        per = max(1, _CHUNK // rounds)
        for start in range(0, trials, per):
            stop = min(trials, start + per)
            sub_bits = bits[start:stop]
            sx, sz = fx[start:stop].copy(), fz[start:stop].copy()
            _run(*args, _draw(rng, compiled, stop - start, rounds), sub_bits, sx, sz, 0)
            fx[start:stop], fz[start:stop] = sx, sz
    return bits, fx, fz


def _data_frame(circuit, fx):
    return np.array([[(int(v) >> q) & 1 for q in circuit.data_qubits] for v in fx], np.uint8)


def simulate(circuit: Circuit, rounds: int, seed: int) -> MeasurementRecord:
    """Sample ``rounds`` periods from a fresh start; bit-identical for identical inputs.

    Each period every gate applies its ideal action to the Pauli frame and then
    draws once from {no error} U terms. Round 0 is compared against an ideal prior.
    """
    rounds = _check_rounds(rounds)
    seed = _check_seed(seed)
    rng = np.random.Generator(np.random.Philox(seed))
    bits, fx, _ = _run_stream(circuit, rounds, rng)
    return MeasurementRecord(
        circuit.name, circuit.structure_hash(), tuple(q for q, _ in circuit.measure_qubits),
        bits[0], seed, circuit.model_fingerprint(), final_data_x=_data_frame(circuit, fx)[0],
    )


def derive_seeds(base_seed: int, shards: int) -> list[int]:
    """Reproducible, distinct 63-bit seeds for ``shards`` independent streams."""
    base_seed = _check_seed(base_seed)
    seeds = []
    for i in range(int(shards)):
        ss = np.random.SeedSequence(base_seed, spawn_key=(i,))
        seeds.append(int(ss.generate_state(1, np.uint64)[0]) >> 1)
    return seeds


def simulate_sharded(circuit: Circuit, rounds: int, base_seed: int, shards: int,
                     *, threads: int = 1) -> list[MeasurementRecord]:
    """``shards`` independent fresh-start records of ``rounds`` rounds each."""
    if shards < 1:
        raise ValueError("shards must be >= 1")
    seeds = derive_seeds(base_seed, shards)
    if threads > 1 and shards > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda s: simulate(circuit, rounds, s), seeds))
    return [simulate(circuit, rounds, s) for s in seeds]


@dataclass
class TrialBatch:
    """Independent fresh-start windows: ``bits[trial, row, round]`` and the final data X frame."""

    bits: np.ndarray
    final_data_x: np.ndarray
    measure_qubits: tuple[int, ...]
    data_qubits: tuple[int, ...]


def simulate_trials(circuit: Circuit, trials: int, rounds: int, seed: int) -> TrialBatch:
    rounds = _check_rounds(rounds)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.Generator(np.random.Philox(_check_seed(seed)))
    bits, fx, _ = _run_stream(circuit, rounds, rng, trials=int(trials))
    return TrialBatch(bits, _data_frame(circuit, fx),
                      tuple(q for q, _ in circuit.measure_qubits), circuit.data_qubits)


def _check_rounds(rounds) -> int:
    if int(rounds) != rounds or rounds < 1:
        raise ValueError("rounds must be a positive integer")
    return int(rounds)


def _check_seed(seed) -> int:
    if seed is None or int(seed) != seed or not 0 <= int(seed) < 2**64:
        raise ValueError("seed must be an integer in [0, 2**64)")
    return int(seed)


# -- mrec.v1 -------------------------------------------------------------------

def write_record(record: MeasurementRecord, path) -> Path:
    """Write ``path`` (binary) and ``path.json`` (sidecar mirroring the header).

    Layout: little-endian header ``<4sHH32s32sQQII`` = magic, version, reserved,
    circuit hash, model fingerprint, seed, rounds, number of measure qubits, rng name
    length; then the measure qubit indices (uint32 each), the rng name (ASCII), and
    one byte-padded row per measure qubit with round ``r`` at bit ``r % 8`` of byte ``r // 8``.
    """
    path = Path(path)
    rng = record.rng.encode("ascii")
    header = _HEADER.pack(
        MREC_MAGIC, MREC_VERSION, 0, bytes.fromhex(record.circuit_hash),
        bytes.fromhex(record.model_fingerprint), record.seed, record.rounds,
        record.num_measure, len(rng),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(record.measure_qubits, "<u4").tobytes())
        fh.write(rng)
        fh.write(np.packbits(record.bits, axis=1, bitorder="little").tobytes())
    sidecar = record.header()
    sidecar["circuit_name"] = sidecar.pop("circuit")
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def read_record(path) -> MeasurementRecord:
    path = Path(path)
    blob = path.read_bytes()
    magic, version, _, chash, fp, seed, rounds, m, nrng = _HEADER.unpack_from(blob, 0)
    if magic != MREC_MAGIC:
        raise ValueError(f"{path} is not an mrec file")
    if version != MREC_VERSION:
        raise ValueError(f"unsupported mrec version {version}")
    off = _HEADER.size
    qubits = tuple(int(q) for q in np.frombuffer(blob, "<u4", m, off))
    off += 4 * m
    rng = blob[off:off + nrng].decode("ascii")
    off += nrng
    row = (rounds + 7) // 8
    packed = np.frombuffer(blob, np.uint8, m * row, off).reshape(m, row)
    bits = np.unpackbits(packed, axis=1, count=rounds, bitorder="little")
    name = ""
    side = Path(str(path) + ".json")
    if side.exists():
        name = json.loads(side.read_text()).get("circuit_name", "")
    return MeasurementRecord(name, chash.hex(), qubits, bits, seed, fp.hex(), rng)
