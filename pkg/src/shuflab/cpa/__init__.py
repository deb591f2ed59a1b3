"""Correlation power analysis: segmentation, hyper-parameter recovery and weight recovery."""
from .attack import (DEFAULT_TAU, AttackReport, NeuronObservation, SecretResult, WeightCandidateSet,
                     attack_network, cpa_recover_weight, detect_layer_boundary, observe, recover_layers)
from .segment import (NeuronSegment, ShapeHints, classify_activation, count_neurons, find_mac_blocks,
                      find_markers, mean_trace, segment_trace)
from .stats import (ScanResult, correlation_scan, pearson, pge, product_hypotheses, rank_candidates,
                    sum_hypotheses)

__all__ = [
    "DEFAULT_TAU", "AttackReport", "NeuronObservation", "NeuronSegment", "ScanResult", "SecretResult",
    "ShapeHints", "WeightCandidateSet", "attack_network", "classify_activation", "correlation_scan",
    "count_neurons", "cpa_recover_weight", "detect_layer_boundary", "find_mac_blocks", "find_markers",
    "mean_trace", "observe", "pearson", "pge", "product_hypotheses", "rank_candidates", "recover_layers",
    "segment_trace", "sum_hypotheses",
]
