"""Placement planning and discrete-event simulation of MoE inference on edge servers."""

from .config import Scenario, load_scenario
from .errors import ConfigError, InfeasibleError, StructuralError
from .model import CoActivationMatrix, ExpertRef, MoEModelSpec, RoutingTrace, estimate_coactivation, generate_trace
from .placement import Placement, brute_force_place, expected_objective, place, segment_submodels
from .sim import SimReport, Simulator, simulate

__version__ = "0.1.0"

__all__ = [
    "CoActivationMatrix",
    "ConfigError",
    "ExpertRef",
    "InfeasibleError",
    "MoEModelSpec",
    "Placement",
    "RoutingTrace",
    "Scenario",
    "SimReport",
    "Simulator",
    "StructuralError",
    "brute_force_place",
    "estimate_coactivation",
    "expected_objective",
    "generate_trace",
    "load_scenario",
    "place",
    "segment_submodels",
    "simulate",
]
