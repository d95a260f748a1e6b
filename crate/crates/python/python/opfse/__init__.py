from ._opfse import (
    Feeder,
    SimulationResult,
    analyze,
    cvar_constraint,
    project_capability,
    simulate,
    wls_estimate,
)

__all__ = [
    "Feeder",
    "SimulationResult",
    "analyze",
    "cvar_constraint",
    "project_capability",
    "simulate",
    "wls_estimate",
]
