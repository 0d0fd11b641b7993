"""Quantum-trajectory simulation and analysis of dissipative freezing under strong symmetries."""

from .freezing import (
    EnsembleFreezeStats,
    FreezeReport,
    ProductTracker,
    WeightLedger,
    detect_freeze,
    ensemble_stats,
    freeze_time_vs_gap,
    update_product,
    update_weights,
)
from .liouvillian import (
    build_liouvillian,
    detect_traceless_modes,
    evolve_exact,
    integrate_master_equation,
    inter_sector_gap,
    sector_spectrum,
    steady_states,
)
from .models import InitialState, ModelSpec, build_model
from .symmetry import BlockOperator, BlockStructure, Subspace, check_similar, verify_strong_symmetry
from .trajectory import UnravelingConfig, run_ensemble, run_trajectory, step

__version__ = "0.1.0"
