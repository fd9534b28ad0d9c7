"""Declarative fault scenarios: singular voltage sags and impedance studies.

Voltage sag classes follow the standard ABC classification with phases
expressed against a 1 pu pre-fault per-phase voltage.  Each class is pinned
at its singular point (characteristic voltage h = 0), where the
impedance-free reference-calculation matrix is exactly rank deficient:

* classes C, E, G collapse onto equal sequence components (U+ = U-),
* classes D, F collapse onto opposed components (U- = -U+, one phase
  voltage vanishes and that phase loses all vertical-power authority).

Internal singular scenarios reproduce the equal-differential-voltage
condition U_diff+ = U_diff- through the grid construction
U_g- = U_g+ + Z_eq I_s+ (the "internal factor"); the fault-window power
set-points are derived so the injected current realizes that factor.
"""
from __future__ import annotations

import configparser
import enum
import io
import math
from dataclasses import dataclass, field, replace

from .phasors import Impedance, SequenceSet, from_polar
from .refcalc import MethodId

#: Default study timing: fault applied at 2 s, cleared at 5 s, 7 s total.
T_FAULT_DEFAULT = 2.0
T_CLEAR_DEFAULT = 5.0
DURATION_DEFAULT = 7.0

#: Rated operating point: 1 pu apparent power at 0.95 capacitive power factor.
P_SET_DEFAULT = 0.95
Q_SET_DEFAULT = -math.sin(math.acos(0.95))

#: Canonical internal-singular operating point: positive-sequence grid
#: voltage and internal factor Z_eq * I_s+.
INTERNAL_UGPOS = 0.5 + 0.0j
INTERNAL_FACTOR = from_polar(0.24, 87.75)

BALANCED_GRID = SequenceSet(1.0 + 0.0j, 0.0j, 0.0j)


class SagKind(enum.Enum):
    C = "C"
    D = "D"
    E = "E"
    F = "F"
    G = "G"


@dataclass(frozen=True)
class SagClass:
    """ABC sag class with characteristic magnitude h in [0, 1]."""

    kind: SagKind
    h: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.h <= 1.0:
            raise ValueError(f"characteristic magnitude {self.h} outside [0, 1]")


def make_ac_singular(sag: SagClass) -> SequenceSet:
    """Grid sequence set of an ABC sag class at characteristic magnitude h.

    h = 0 (the default) pins the class at its singular point.
    """
    h = sag.h
    if sag.kind == SagKind.C:
        pos, neg, zero = (1.0 + h) / 2.0, (1.0 - h) / 2.0, 0.0
    elif sag.kind == SagKind.D:
        pos, neg, zero = (h + 1.0) / 2.0, (h - 1.0) / 2.0, 0.0
    elif sag.kind == SagKind.E:
        pos, neg, zero = (1.0 + 2.0 * h) / 3.0, (1.0 - h) / 3.0, (1.0 - h) / 3.0
    elif sag.kind == SagKind.F:
        pos, neg, zero = (5.0 * h + 1.0) / 6.0, (h - 1.0) / 6.0, 0.0
    elif sag.kind == SagKind.G:
        pos, neg, zero = (1.0 + 2.0 * h) / 3.0, (1.0 - h) / 3.0, 0.0
    else:  # pragma: no cover
        raise ValueError(sag.kind)
    return SequenceSet(complex(pos), complex(neg), complex(zero))


def make_internal_singular(u_g_pos: complex, internal_factor: complex,
                           mirror: bool = False) -> SequenceSet:
    """Grid set that makes the differential sequence voltages collapse.

    With positive-sequence-only current injection, U_diff- = U_g- and
    U_diff+ = U_g+ + internal_factor, so U_g- = U_g+ + internal_factor
    yields U_diff+ = U_diff-.  ``mirror=True`` flips the sign of U_g-
    (the opposed-sequence singular manifold of classes D and F).
    """
    u_neg = u_g_pos + internal_factor
    if mirror:
        u_neg = -u_neg
    return SequenceSet(complex(u_g_pos), complex(u_neg), 0.0j)


def internal_fault_setpoints(u_g_pos: complex, internal_factor: complex,
                             z_eq: Impedance) -> tuple[float, float]:
    """Fault-window P/Q set-points realizing the internal factor.

    The factor equals Z_eq I_s+, so the target current is factor / Z_eq and
    the per-unit set-points follow from S = U+ conj(I+).
    """
    i_target = internal_factor / z_eq.z
    s = u_g_pos * i_target.conjugate()
    return s.real, s.imag


def make_impedance_study(level: str) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-arm impedance multipliers (upper abc, lower abc) of the
    asymmetry study."""
    if level == "five_pct":
        upper = (1.0 - 0.05, 1.0 - 0.01, 1.0 + 0.02)
        lower = (1.0 + 0.03, 1.0 + 0.015, 1.0 + 0.025)
    elif level == "ten_pct":
        upper = (1.0 - 0.015, 1.0 - 0.1, 1.0 + 0.13)
        lower = (1.0 + 0.05, 1.0 + 0.1, 1.0 - 0.08)
    elif level == "none":
        upper = lower = (1.0, 1.0, 1.0)
    else:
        raise ValueError(f"unknown impedance study level {level!r}")
    return upper, lower


@dataclass
class ScenarioSpec:
    """Declarative run description.

    The pre-fault grid set also applies after clearance.  Fault-window
    set-points default to the pre-fault ones.  Arm impedance scales are
    multipliers on the nominal arm impedance (upper abc, lower abc).
    """

    name: str
    prefault: SequenceSet = BALANCED_GRID
    fault: SequenceSet = BALANCED_GRID
    t_fault: float = T_FAULT_DEFAULT
    t_clear: float = T_CLEAR_DEFAULT
    duration: float = DURATION_DEFAULT
    p_set: float = P_SET_DEFAULT
    q_set: float = Q_SET_DEFAULT
    p_set_fault: float | None = None
    q_set_fault: float | None = None
    method: MethodId = MethodId.M4
    arm_scale_u: tuple[float, float, float] = (1.0, 1.0, 1.0)
    arm_scale_l: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 < self.t_fault < self.t_clear < self.duration:
            raise ValueError(
                f"need 0 < t_fault ({self.t_fault}) < t_clear ({self.t_clear})"
                f" < duration ({self.duration})")

    @property
    def fault_setpoints(self) -> tuple[float, float]:
        p = self.p_set if self.p_set_fault is None else self.p_set_fault
        q = self.q_set if self.q_set_fault is None else self.q_set_fault
        return p, q

    def with_method(self, method: MethodId) -> "ScenarioSpec":
        return replace(self, method=method)


# --- scenario file format -----------------------------------------------------

_SEQ_KEYS = ("pos_mag", "pos_angle", "neg_mag", "neg_angle", "zero_mag", "zero_angle")
_ALLOWED = {
    "grid": set(_SEQ_KEYS),
    "fault": set(_SEQ_KEYS) | {"t_fault", "t_clear"},
    "setpoints": {"p", "q", "p_fault", "q_fault"},
    "impedances": {"zu_a", "zu_b", "zu_c", "zl_a", "zl_b", "zl_c"},
    "run": {"name", "method", "duration"},
}


def _seq_to_items(seq: SequenceSet) -> dict:
    out = {}
    for key, ph in zip(("pos", "neg", "zero"), seq):
        out[f"{key}_mag"] = repr(abs(ph))
        out[f"{key}_angle"] = repr(math.degrees(math.atan2(ph.imag, ph.real)))
    return out


def _seq_from_section(sec) -> SequenceSet:
    vals = []
    for key in ("pos", "neg", "zero"):
        vals.append(from_polar(float(sec[f"{key}_mag"]), float(sec[f"{key}_angle"])))
    return SequenceSet(*vals)


def save_scenario(spec: ScenarioSpec, path=None) -> str:
    """Serialize to the sectioned key-value format; returns the text."""
    cp = configparser.ConfigParser()
    cp["grid"] = _seq_to_items(spec.prefault)
    fault = _seq_to_items(spec.fault)
    fault["t_fault"] = repr(spec.t_fault)
    fault["t_clear"] = repr(spec.t_clear)
    cp["fault"] = fault
    sp = {"p": repr(spec.p_set), "q": repr(spec.q_set)}
    if spec.p_set_fault is not None:
        sp["p_fault"] = repr(spec.p_set_fault)
    if spec.q_set_fault is not None:
        sp["q_fault"] = repr(spec.q_set_fault)
    cp["setpoints"] = sp
    if spec.arm_scale_u != (1.0,) * 3 or spec.arm_scale_l != (1.0,) * 3:
        cp["impedances"] = {
            "zu_a": repr(spec.arm_scale_u[0]), "zu_b": repr(spec.arm_scale_u[1]),
            "zu_c": repr(spec.arm_scale_u[2]), "zl_a": repr(spec.arm_scale_l[0]),
            "zl_b": repr(spec.arm_scale_l[1]), "zl_c": repr(spec.arm_scale_l[2]),
        }
    cp["run"] = {"name": spec.name, "method": spec.method.name,
                 "duration": repr(spec.duration)}
    buf = io.StringIO()
    cp.write(buf)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


class ScenarioFormatError(ValueError):
    """Malformed scenario file (unknown sections/keys or bad values)."""


def load_scenario(source: str, is_path: bool = True) -> ScenarioSpec:
    """Parse a scenario file; unknown sections or keys are rejected."""
    cp = configparser.ConfigParser()
    try:
        if is_path:
            with open(source) as fh:
                cp.read_file(fh)
        else:
            cp.read_string(source)
    except (configparser.Error, OSError) as exc:
        if isinstance(exc, OSError):
            raise
        raise ScenarioFormatError(str(exc)) from exc

    for sec in cp.sections():
        if sec not in _ALLOWED:
            raise ScenarioFormatError(f"unknown section [{sec}]")
        for key in cp[sec]:
            if key not in _ALLOWED[sec]:
                raise ScenarioFormatError(f"unknown key {key!r} in [{sec}]")
    for sec in ("grid", "fault", "setpoints", "run"):
        if sec not in cp:
            raise ScenarioFormatError(f"missing section [{sec}]")

    try:
        prefault = _seq_from_section(cp["grid"])
        fault = _seq_from_section(cp["fault"])
        run = cp["run"]
        sp = cp["setpoints"]
        kwargs = dict(
            name=run["name"],
            prefault=prefault,
            fault=fault,
            t_fault=float(cp["fault"]["t_fault"]),
            t_clear=float(cp["fault"]["t_clear"]),
            duration=float(run["duration"]),
            p_set=float(sp["p"]),
            q_set=float(sp["q"]),
            method=MethodId.parse(run["method"]),
        )
        if "p_fault" in sp:
            kwargs["p_set_fault"] = float(sp["p_fault"])
        if "q_fault" in sp:
            kwargs["q_set_fault"] = float(sp["q_fault"])
        if "impedances" in cp:
            imp = cp["impedances"]
            kwargs["arm_scale_u"] = tuple(float(imp[f"zu_{p}"]) for p in "abc")
            kwargs["arm_scale_l"] = tuple(float(imp[f"zl_{p}"]) for p in "abc")
        return ScenarioSpec(**kwargs)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ScenarioFormatError):
            raise
        raise ScenarioFormatError(f"bad scenario file: {exc}") from exc


# --- canonical scenario set -----------------------------------------------------

#: Internal-singular variants: (mirror flag, depth scale) per sag class.
_INTERNAL_VARIANTS = {
    SagKind.C: (False, 1.0),
    SagKind.D: (True, 1.0),
    SagKind.E: (False, 2.0 / 3.0),
    SagKind.F: (True, 1.0 / 3.0),
    SagKind.G: (False, 2.0 / 3.0),
}


def ac_singular_scenario(kind: SagKind, method: MethodId = MethodId.M4) -> ScenarioSpec:
    return ScenarioSpec(
        name=f"ac_singular_{kind.value.lower()}",
        fault=make_ac_singular(SagClass(kind)),
        method=method,
    )


def internal_singular_scenario(kind: SagKind, z_eq: Impedance,
                               method: MethodId = MethodId.M4) -> ScenarioSpec:
    mirror, depth = _INTERNAL_VARIANTS[kind]
    u_pos = INTERNAL_UGPOS * depth
    factor = INTERNAL_FACTOR * depth
    grid = make_internal_singular(u_pos, factor, mirror)
    if kind == SagKind.E:
        # class E carries a zero-sequence component equal to the collapsed pair
        grid = SequenceSet(grid.pos, grid.neg, grid.neg)
    p_f, q_f = internal_fault_setpoints(u_pos, factor, z_eq)
    return ScenarioSpec(
        name=f"internal_singular_{kind.value.lower()}",
        fault=grid,
        p_set_fault=p_f,
        q_set_fault=q_f,
        method=method,
    )


def balanced_scenario(method: MethodId = MethodId.M4) -> ScenarioSpec:
    """No-fault run: the 'fault' segment repeats the balanced grid."""
    return ScenarioSpec(name="balanced", method=method)


def impedance_scenario(level: str, z_eq: Impedance,
                       method: MethodId = MethodId.M4) -> ScenarioSpec:
    """Arm-impedance asymmetry study on the internal-singular class D sag."""
    base = internal_singular_scenario(SagKind.D, z_eq, method)
    upper, lower = make_impedance_study(level)
    return replace(base, name=f"impedance_{level}",
                   arm_scale_u=upper, arm_scale_l=lower)


def canonical_scenarios(z_eq: Impedance) -> list[ScenarioSpec]:
    """The ten comparison scenarios: AC singular C-G, internal singular C-G."""
    out = [ac_singular_scenario(kind) for kind in SagKind]
    out += [internal_singular_scenario(kind, z_eq) for kind in SagKind]
    return out


def all_scenarios(z_eq: Impedance) -> list[ScenarioSpec]:
    """Canonical set plus the balanced run and the two impedance studies."""
    return (canonical_scenarios(z_eq)
            + [balanced_scenario(),
               impedance_scenario("five_pct", z_eq),
               impedance_scenario("ten_pct", z_eq)])
