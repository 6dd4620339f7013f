"""Simulation and analysis of a pulsed alkali / noble-gas comagnetometer.

Modules:

- :mod:`panco.model` cell parameters, units and closed-form quantities
- :mod:`panco.dynamics` coupled Bloch equations and the adaptive integrator
- :mod:`panco.protocol` pulse schedules, settling, signatures and references
- :mod:`panco.estimation` least-squares fits, Fisher sensitivities, cross-talk
- :mod:`panco.scenarios` ready-made emulations with JSON specs
- :mod:`panco.cli` command-line entry point
"""

from .dynamics import DriveTimeline, SpinState, integrate
from .estimation import (
    bias_scan,
    crosstalk,
    fisher_information,
    fit_cycle,
    fit_trace,
    sensitivities,
    suppression_factor,
)
from .model import CellConfig, QModel, SpeciesParams, k_he3_idealised, rb_xe_fig2
from .protocol import PulseSchedule, SignatureSet, generate_signatures, khe_schedule, run_protocol, settle

__version__ = "0.1.0"

__all__ = [
    "CellConfig",
    "QModel",
    "SpeciesParams",
    "k_he3_idealised",
    "rb_xe_fig2",
    "SpinState",
    "DriveTimeline",
    "integrate",
    "PulseSchedule",
    "SignatureSet",
    "khe_schedule",
    "run_protocol",
    "settle",
    "generate_signatures",
    "fit_cycle",
    "fit_trace",
    "fisher_information",
    "sensitivities",
    "bias_scan",
    "crosstalk",
    "suppression_factor",
]
