"""Passivity-preserving variable impedance control for robotic palpation and scanning."""

__version__ = "0.1.0"

from .core import (
    ContactState,
    PalpationRecord,
    Phantom,
    ViscoelasticParams,
    WorkspaceError,
    default_phantom,
    hc_force,
    hunt_crossley,
    kv_force,
    phantom_query,
)
from .estimation import PalpationProtocol, fit_hc, fit_kv, generate_palpation, survey_grid
from .surface import HeightGrid, fit_grid
from .gpr import BodyMap, build_body_map, gpr_fit, gpr_predict
from .qp import ActiveSetSolver, QpProblem, kkt_check, qp_solve
from .controller import StrategyConfig, TankState, VariableImpedanceController, control_cycle
from .sim import ScanPlan, SimulationBlowup, default_lift, run_scan, run_summary, safety_certificates

__all__ = [
    "ActiveSetSolver", "BodyMap", "ContactState", "HeightGrid", "PalpationProtocol", "PalpationRecord",
    "Phantom", "QpProblem", "ScanPlan", "SimulationBlowup", "StrategyConfig", "TankState",
    "VariableImpedanceController", "ViscoelasticParams", "WorkspaceError", "build_body_map", "control_cycle",
    "default_lift", "default_phantom", "fit_grid", "fit_hc", "fit_kv", "generate_palpation", "gpr_fit",
    "gpr_predict", "hc_force", "hunt_crossley", "kkt_check", "kv_force", "phantom_query", "qp_solve",
    "run_scan", "run_summary", "safety_certificates", "survey_grid",
]
