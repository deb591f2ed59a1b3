"""Cycle-level leakage simulation of inference, software division and Fisher-Yates."""
from .division import division_latency, divide_batch, division_leak_matrix, normalisation_shifts, software_divide
from .model import (ACT_ENTRY, ACT_EXIT, DEFAULT_COSTS, DIV_LANDMARK, HW_LUT, SAT_CONSTS, CycleCostTable,
                    LeakModel, hamming_weight, hamming_weights)
from .program import (MODES, Emitter, Executor, check_mode, create_list, cycle_count, fisher_yates,
                      measure_overhead, run_program, trace_infer)
from .trace import PowerTrace, read_trace, write_trace

__all__ = [
    "ACT_ENTRY", "ACT_EXIT", "DEFAULT_COSTS", "DIV_LANDMARK", "HW_LUT", "SAT_CONSTS", "MODES",
    "CycleCostTable", "Emitter", "Executor", "LeakModel", "PowerTrace",
    "check_mode", "create_list", "cycle_count", "divide_batch", "division_latency", "division_leak_matrix",
    "fisher_yates", "hamming_weight", "hamming_weights", "measure_overhead", "normalisation_shifts",
    "read_trace", "run_program", "software_divide", "trace_infer", "write_trace",
]
