"""Vehicular task offloading with sensing-assisted modes: model, AM and learned solvers."""

from .model import (Allocation, CostModel, LinkState, RsuBudget, Scenario, TaskProfile,
                    check_feasibility, penalized_cost, system_cost)
from .scenario import ScenarioSpec, build_scenario, restrict_icc, sweep_grid

__version__ = "0.1.0"
