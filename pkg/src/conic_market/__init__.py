"""Conic (SOCP-based) electricity market clearing.

Library layout:

- ``cones``       standard-form conic programs and cone arithmetic
- ``solver``      embedded homogeneous self-dual interior-point SOCP solver
- ``duality``     structural dualization, Phase-I probing, strong-duality reports
- ``network``     DC network model, PTDF, line flows
- ``uncertainty`` forecast-error model, Cholesky factors, scenario sampling
- ``bids``        conic bid data model and SOC constraint templates
- ``clearing``    market assembly, solving, nodal prices, payments
- ``economics``   equilibrium/KKT residuals, cost recovery, revenue adequacy
- ``benchmarks``  LP reference designs (reserve-based R1, scenario-based R2)
- ``simulation``  out-of-sample evaluation and design comparison
- ``cli``         command-line front end and instance file schema
"""

from .cones import Cone, ConeKind, ConicProgram, SolveResult, SolveStatus, in_cone, project_onto_soc
from .solver import SolverSettings, solve

__all__ = [
    "Cone",
    "ConeKind",
    "ConicProgram",
    "SolveResult",
    "SolveStatus",
    "SolverSettings",
    "in_cone",
    "project_onto_soc",
    "solve",
]

__version__ = "0.1.0"
