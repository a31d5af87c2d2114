"""Extract gate error models from the detection events of error-detection circuits."""

from .circuit import (
    Circuit, CircuitError, CorrelatedChannel, GateErrorModel, GateInstance, GateKind,
    StabilizerType, apply_models_document, build_parity_square_circuit,
    build_repetition_circuit, depolarizing_models, models_from_json, models_to_json,
)
from .correlation import (
    CrossCorrelationReport, CrossNestCorrelator, cross_correlate, inject_bursts,
    temporal_autocorrelate,
)
from .decoding import (
    DecoderWeights, LogicalTrialResult, RepetitionDecoder, Verdict,
    compare_predicted_vs_observed, decode, decode_events, exact_matching, greedy_matching,
    logical_error_rate, second_order_logical_rate, trial_failures,
)
from .extraction import (
    ClusterPolicy, DetectionEventTransformer, EstimatedNest, NestEstimator, classify_cluster,
    cluster_events, deconvolve_nest, detect_events, estimate_nest, merge_estimates,
)
from .inversion import (
    ConstraintSystem, ErrorModelInverter, FitResult, Parameterization, build_system,
    fitted_models, solve,
)
from .nest import ErrorClass, Nest, build_nest, class_lookup, export_nest, import_nest
from .propagation import (
    DetectionEvent, DetectionPattern, ErrorLocation, error_table, propagate_composite,
    propagate_single,
)
from .simulation import (
    MeasurementRecord, read_record, simulate, simulate_sharded, simulate_trials, write_record,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
