"""
netsched

単一ホップ・スロット時間の Max-Weight / Max-Weight-α スケジューリングの
シミュレーションと静的解析。
"""

from core.netsched.analysis import (
    FlowClass,
    StabilityReport,
    bernoulli_bound,
    classify_flows,
    compute_H,
    covering_number,
    fluid_solve,
    s_max,
    moment_bound,
    traffic_intensity,
)
from core.netsched.arrivals import ArrivalSpec, Constant, Geometric, Zeta, bernoulli, heavy, moment, sample
from core.netsched.engine import run, step
from core.netsched.model import NetworkSpec, Schedule, conflicts, preset, validate_network
from core.netsched.scheduling import MaxWeight, MaxWeightAlpha, Priority, decide, weight
from core.netsched.stats import (
    SimStats,
    basta_distance,
    block_means,
    divergence_diagnostic,
    littles_law_residual,
    merge,
)

__all__ = [
    "ArrivalSpec", "Constant", "Geometric", "Zeta", "bernoulli", "heavy", "moment", "sample",
    "NetworkSpec", "Schedule", "conflicts", "preset", "validate_network",
    "MaxWeight", "MaxWeightAlpha", "Priority", "decide", "weight",
    "run", "step",
    "SimStats", "merge", "littles_law_residual", "basta_distance", "block_means",
    "divergence_diagnostic",
    "traffic_intensity", "covering_number", "s_max", "fluid_solve", "compute_H", "moment_bound",
    "bernoulli_bound", "classify_flows", "FlowClass", "StabilityReport",
]
