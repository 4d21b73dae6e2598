"""Cell-free massive MIMO downlink simulator with hybrid serving modes.

Pipeline: network generation (netgen) -> channel estimation and precoding
statistics (chanstat) -> achievable-rate evaluation (rates) -> successive
convex power optimization (sca) -> experiment drivers and CLI (runner).
"""

from .errors import ConfigError, DegenerateLinkError, NumericalError
from .netgen import SystemConfig, Topology, SpatialModel, PilotAssignment
from .chanstat import PrecodingStatistics, estimate_statistics
from .rates import ModeAssignment, PowerSolution, RateReport, evaluate
from .sca import (
    ScaProblem,
    SubproblemSolution,
    ScaRun,
    assemble_subproblem,
    solve_subproblem,
    initial_anchor,
    run_sca,
)

__all__ = [
    "ConfigError",
    "DegenerateLinkError",
    "NumericalError",
    "SystemConfig",
    "Topology",
    "SpatialModel",
    "PilotAssignment",
    "PrecodingStatistics",
    "estimate_statistics",
    "ModeAssignment",
    "PowerSolution",
    "RateReport",
    "evaluate",
    "ScaProblem",
    "SubproblemSolution",
    "ScaRun",
    "assemble_subproblem",
    "solve_subproblem",
    "initial_anchor",
    "run_sca",
]

__version__ = "0.1.0"
