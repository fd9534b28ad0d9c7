"""mmcsim: averaged-model MMC simulator and reference-calculation library.

Compares five AC additive-current reference calculation methods for the
internal energy balancing of a modular multilevel converter under balanced,
AC-grid-singular and internal-singular voltage sag conditions.
"""
from .phasors import (ALPHA, Impedance, SequenceSet, ThreePhase, extract_phasor,
                      fortescue, from_polar, inverse_fortescue, synthesize)
from .plant import ArmCommand, MmcState, Plant, PlantParams
from .refcalc import (AdditiveCurrentRefs, MethodId, PowerTargets,
                      SolveDiagnostics, UdiffZeroDcRegulator, assemble_m,
                      compute_udiff0dc, dc_additive_refs, det_closed_form,
                      grid_current_ref, method_matrix, solve_ac_additive,
                      vertical_power_forward)
from .control import ControlConfig, EnergyRefs, Notch, Pi
from .scenario import (SagClass, SagKind, ScenarioSpec, canonical_scenarios,
                       load_scenario, make_ac_singular, make_impedance_study,
                       make_internal_singular, save_scenario)
from .simrunner import RunResult, TripCause, batch, run

__version__ = "0.1.0"

__all__ = [
    "ALPHA", "Impedance", "SequenceSet", "ThreePhase", "extract_phasor",
    "fortescue", "from_polar", "inverse_fortescue", "synthesize",
    "ArmCommand", "MmcState", "Plant", "PlantParams",
    "AdditiveCurrentRefs", "MethodId", "PowerTargets", "SolveDiagnostics",
    "UdiffZeroDcRegulator", "assemble_m", "compute_udiff0dc",
    "dc_additive_refs", "det_closed_form", "grid_current_ref",
    "method_matrix", "solve_ac_additive", "vertical_power_forward",
    "ControlConfig", "EnergyRefs", "Notch", "Pi",
    "SagClass", "SagKind", "ScenarioSpec", "canonical_scenarios",
    "load_scenario", "make_ac_singular", "make_impedance_study",
    "make_internal_singular", "save_scenario",
    "RunResult", "TripCause", "batch", "run",
]
