"""Tube MPC with an online-adapted deep network disturbance rejector.

The package splits into the plant models (`plant`), the adaptive network
(`network`), hidden-layer training (`trainer`), the QP/SQP backend
(`ocp`), the controller layer (`mpc`), trace certification
(`diagnostics`), and scenario orchestration (`harness` / `cli`).
"""

__version__ = "0.1.0"

from .config import ScenarioConfig, load_scenario
from .harness import (SimulationLog, compare_controllers, export_csv,
                      export_plot_data, oracle_scenario, run_scenario,
                      setup_scenario)
from .plant import ConstraintSets, ControlAffineModel, UncertaintySpec

__all__ = [
    "ConstraintSets",
    "ControlAffineModel",
    "ScenarioConfig",
    "SimulationLog",
    "UncertaintySpec",
    "compare_controllers",
    "export_csv",
    "export_plot_data",
    "load_scenario",
    "oracle_scenario",
    "run_scenario",
    "setup_scenario",
    "__version__",
]
