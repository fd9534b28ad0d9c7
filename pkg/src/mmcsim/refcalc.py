"""Current reference calculation for the MMC internal energy balancing.

Implements the five AC additive-current reference calculation methods:

===== ============================ ========= ============== =========
id    arm voltages taken as        Z_arm     solve          U_diff0DC
===== ============================ ========= ============== =========
M0    grid voltage sequences       ignored   direct 3x3     unused
M1    grid voltage sequences       ignored   rank-reduced   regulated
M2    differential voltage cmds    ignored   direct 3x3     regulated
M3    differential voltage cmds    ignored   rank-reduced   regulated
M4    differential voltage cmds    included  direct 3x3     regulated
===== ============================ ========= ============== =========

The rank-reduced solve always removes one degree of freedom (the direction
of the smallest singular value) from the AC additive current; the unserved
power is picked up by the zero-sequence DC differential voltage channel.

All vertical powers are per-phase pu, phasors are RMS pu.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernel as K
from .phasors import Impedance

#: Scale-invariant singularity threshold: |det M| <= DET_DELTA * prod(row norms).
DET_DELTA = 1e-6
#: Relative singular-value truncation tolerance for the rank-reduced solve.
SVD_RTOL = 1e-6
#: Grid-voltage guard below which the current reference holds its last value.
EPS_VOLTAGE = 0.01
#: DC additive current guard for the U_diff0DC computation.
EPS_CURRENT = 1e-3
#: Saturation of the commanded zero-sequence DC differential voltage (pu).
U0DC_SAT = 0.1
#: Grid current reference magnitude limit (pu).
I_REF_MAX = 1.0
#: U_diff0DC regulator gains.
U0DC_KP = 0.25
U0DC_KI = 12.0


class VoltageTooLow(ValueError):
    """Positive-sequence grid voltage below the reference-calculation guard."""


class NonFiniteInput(ValueError):
    """Reference solve received non-finite inputs."""


class MethodId(enum.IntEnum):
    M0 = 0
    M1 = 1
    M2 = 2
    M3 = 3
    M4 = 4

    @property
    def uses_differential_voltages(self) -> bool:
        return self >= MethodId.M2

    @property
    def uses_arm_impedance(self) -> bool:
        return self == MethodId.M4

    @property
    def uses_rank_reduction(self) -> bool:
        return self in (MethodId.M1, MethodId.M3)

    @property
    def uses_udiff0dc(self) -> bool:
        return self != MethodId.M0

    @classmethod
    def parse(cls, text: str) -> "MethodId":
        key = text.strip().upper()
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown method {text!r}; expected M0..M4") from None


class PowerTargets(NamedTuple):
    """Outputs of the six energy loops (per-phase pu)."""

    p_vert: tuple[float, float, float]
    p_total: float
    p_ab: float
    p_ac: float


@dataclass
class AdditiveCurrentRefs:
    """AC additive current references plus the per-phase DC components."""

    i_sum_pos: complex
    i_sum_neg: complex
    i_dc: tuple[float, float, float]
    raw: tuple[float, float, float]     # [I- cos, I- sin, I+ cos]


@dataclass
class SolveDiagnostics:
    det_m: float
    condition: float
    singular: bool
    method: MethodId
    pseudoinverse_used: bool


def grid_current_ref(p_set: float, q_set: float, u_g_pos: complex,
                     i_max: float = I_REF_MAX) -> complex:
    """Positive-sequence grid current reference from the P/Q set-points.

    Per-unit form of the three-phase identity S = 3 U+ conj(I+): with the
    per-phase bases the factor three is absorbed, I = conj((P + jQ)/U+).
    The magnitude is limited to ``i_max`` (converter rating); the
    negative-sequence reference is identically zero.
    """
    if abs(u_g_pos) <= EPS_VOLTAGE:
        raise VoltageTooLow(f"|U+| = {abs(u_g_pos):.4f} <= {EPS_VOLTAGE}")
    ref, _, _ = K.grid_current_ref(p_set, q_set, complex(u_g_pos),
                                   EPS_VOLTAGE, i_max, 0.0j)
    return complex(ref)


def dc_additive_refs(p_total: float, p_ab: float, p_ac: float,
                     u_dc: float) -> tuple[float, float, float]:
    """Per-phase DC additive current references.

    Unique solution of P^a - P^b = P_ab, P^a - P^c = P_ac, sum = P_total,
    each converted by the DC bus voltage.
    """
    if u_dc <= 0.0:
        raise ValueError("u_dc must be positive")
    return K.dc_additive_refs(p_total, p_ab, p_ac, u_dc)


def compute_udiff0dc(p_vert, i_dc) -> tuple[float, bool]:
    """Unregulated zero-sequence DC differential voltage.

    Returns (value, valid); (0.0, False) when the mean DC additive current
    is inside the guard band (the regulator holds).
    """
    pa, pb, pc = p_vert
    ia, ib, ic = i_dc
    return K.compute_udiff0dc(pa, pb, pc, ia, ib, ic, EPS_CURRENT)


class UdiffZeroDcRegulator:
    """PI regulator of the zero-sequence DC differential voltage.

    Drives the unregulated value to zero; the output is saturated and the
    integrator freezes while saturated.
    """

    def __init__(self, kp: float = U0DC_KP, ki: float = U0DC_KI,
                 sat: float = U0DC_SAT):
        self.kp = kp
        self.ki = ki
        self.sat = sat
        self.integrator = 0.0
        self.saturated = False

    def step(self, measured: float, dt: float) -> float:
        out, self.integrator = K.pi_step(self.integrator, -measured,
                                         self.kp, self.ki, dt,
                                         -self.sat, self.sat, 0.0)
        self.saturated = abs(out) >= self.sat * (1.0 - 1e-12)
        return out


def assemble_m(u_diff_pos: complex, u_diff_neg: complex,
               i_s_pos: complex, i_s_neg: complex,
               z_arm: Impedance, include_zarm: bool = True) -> np.ndarray:
    """Reduced 3x3 matrix of the vertical power transfer equations.

    The caller selects the voltage source: pass grid sequence voltages for
    the grid-voltage methods or measured/commanded differential sequence
    voltages for the others.  ``include_zarm=False`` zeroes every arm
    impedance term.
    """
    return np.asarray(K.assemble_m(complex(u_diff_pos), complex(u_diff_neg),
                                   complex(i_s_pos), complex(i_s_neg),
                                   z_arm.r, z_arm.x, include_zarm))


def method_matrix(method: MethodId, grid_seq, diff_seq, i_s_pos: complex,
                  z_arm: Impedance, i_s_neg: complex = 0j) -> np.ndarray:
    """Assemble M with the voltage source and impedance terms of ``method``."""
    seq = diff_seq if method.uses_differential_voltages else grid_seq
    return assemble_m(seq.pos, seq.neg, i_s_pos, i_s_neg, z_arm,
                      method.uses_arm_impedance)


def det_closed_form(u_diff_pos: complex, i_s_pos: complex,
                    z_arm: Impedance) -> float:
    """Closed-form det(M) for equal differential sequence voltages and
    positive-sequence-only grid current."""
    return K.det_closed_form(complex(u_diff_pos), complex(i_s_pos),
                             z_arm.r, z_arm.x)


def solve_ac_additive(method: MethodId, m: np.ndarray, p_vert, i_dc,
                      u_diff0dc: float) -> tuple[AdditiveCurrentRefs, SolveDiagnostics]:
    """Solve M x = P + 2 U_diff0DC I_dc for the AC additive current components.

    Direct methods return the unclamped solution even when near-singular
    (components diverge as det -> 0); the rank-reduced methods return the
    minimum-norm solution with one degree of freedom removed.
    """
    m = np.asarray(m, dtype=float)
    p_vert = np.asarray(p_vert, dtype=float)
    i_dc = np.asarray(i_dc, dtype=float)
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(p_vert))
            and np.all(np.isfinite(i_dc)) and math.isfinite(u_diff0dc)):
        raise NonFiniteInput("non-finite inputs to the additive current solve")
    if method == MethodId.M0:
        u_diff0dc = 0.0
    b = p_vert + 2.0 * u_diff0dc * i_dc
    det = float(K.det3(m))
    scale = float(K.row_norm_scale(m))
    singular = abs(det) <= DET_DELTA * scale
    sv = np.linalg.svd(m, compute_uv=False)
    condition = float(sv[0] / sv[2]) if sv[2] > 0.0 else math.inf
    if method.uses_rank_reduction:
        x, _ = K.solve_truncated(m, b[0], b[1], b[2], SVD_RTOL)
        pinv_used = True
    else:
        x = K.solve_direct(m, b[0], b[1], b[2])
        pinv_used = False
    refs = AdditiveCurrentRefs(
        i_sum_pos=complex(x[2], 0.0),
        i_sum_neg=complex(x[0], x[1]),
        i_dc=(float(i_dc[0]), float(i_dc[1]), float(i_dc[2])),
        raw=(float(x[0]), float(x[1]), float(x[2])),
    )
    diag = SolveDiagnostics(det, condition, singular, method, pinv_used)
    return refs, diag


def vertical_power_forward(u_diff_seq, i_s_seq, u_sum_seq, i_sum_seq,
                           u_diff0dc: float, i_dc) -> np.ndarray:
    """Per-phase vertical power transfer from the full bilinear forms.

    Sequence inputs are (pos, neg, zero) phasor triples; zero-sequence AC
    components do not enter the vertical power balance and are ignored.
    Used as the oracle for the reduced matrix and for telemetry.
    """
    ia, ib, ic = i_dc
    return np.asarray(K.vertical_power_forward(
        complex(u_diff_seq.pos), complex(u_diff_seq.neg),
        complex(i_s_seq.pos), complex(i_s_seq.neg),
        complex(u_sum_seq.pos), complex(u_sum_seq.neg),
        complex(i_sum_seq.pos), complex(i_sum_seq.neg),
        u_diff0dc, ia, ib, ic))


def usum_from_additive(i_sum_seq_component: complex, z_arm: Impedance) -> complex:
    """Additive-voltage substitution U_sum = -2 Z_arm I_sum /_(rho + phi)."""
    return K.usum_from_additive(complex(i_sum_seq_component), z_arm.r, z_arm.x)
