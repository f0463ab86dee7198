"""Desk-scale numerical laboratory for viscous compressible MHD.

Two implicit mixed finite-volume / finite-element discretizations of the
isentropic viscous resistive MHD system on the unit square:

* ``scheme1``: triangulated mesh, Crouzeix-Raviart velocity with no-slip
  walls, lowest-order edge elements for the magnetic field with perfectly
  conducting walls, upwinded finite-volume density transport;
* ``scheme2``: periodic quadrilateral mesh, piecewise-constant velocity
  with jump-penalty viscosity, edge elements for the magnetic field.

Both preserve total mass and density positivity exactly, keep the magnetic
field weakly divergence free, and satisfy a per-step energy balance whose
terms the diagnostics module measures one by one.
"""

from .mesh import Mesh, build_tri_mesh, build_periodic_mesh
from .fespace import (
    CellField, CRField, EdgeField, PotentialField,
    project_Q, interpolate_CR, interpolate_Nedelec, interpolate_W,
    grad_h, div_h, div_h_pc, curl_h, grad_W, cell_quadrature, integrate,
)
from .numerics import (
    Params, pressure, pressure_potential, upwind, diffusive_flux,
    epsilon_window, validate_epsilon,
)
from .scheme import (
    DiscreteState, StepReport, PositivityLoss, PicardDivergence,
    LinearSolveFailure, initial_state, step, run,
    residual_continuity, residual_momentum, residual_induction,
)
from .diagnostics import (
    EnergyReport, ConsistencyReport, TestFamily, default_family,
    total_energy, total_mass, energy_report, relative_energy,
    weak_divfree_residual, smooth_divfree_residual, renormalized_residual,
    consistency_residuals, merge_reports, eoc,
)
from .cli import RunConfig, parse_config, scenario_fields, build_mesh, main

__version__ = "0.1.0"

__all__ = [
    "Mesh", "build_tri_mesh", "build_periodic_mesh",
    "CellField", "CRField", "EdgeField", "PotentialField",
    "project_Q", "interpolate_CR", "interpolate_Nedelec", "interpolate_W",
    "grad_h", "div_h", "div_h_pc", "curl_h", "grad_W",
    "cell_quadrature", "integrate",
    "Params", "pressure", "pressure_potential", "upwind", "diffusive_flux",
    "epsilon_window", "validate_epsilon",
    "DiscreteState", "StepReport", "PositivityLoss", "PicardDivergence",
    "LinearSolveFailure", "initial_state", "step", "run",
    "residual_continuity", "residual_momentum", "residual_induction",
    "EnergyReport", "ConsistencyReport", "TestFamily", "default_family",
    "total_energy", "total_mass", "energy_report", "relative_energy",
    "weak_divfree_residual", "smooth_divfree_residual",
    "renormalized_residual", "consistency_residuals", "merge_reports", "eoc",
    "RunConfig", "parse_config", "scenario_fields", "build_mesh", "main",
]
