"""Averaged electrical model of the three-phase MMC.

Six controllable arm voltage sources with aggregated capacitor energy
states, per-arm impedances, stiff DC bus and a Thevenin grid behind a
series impedance.  The AC connection is three-wire: the grid neutral is
not bonded to the DC midpoint, so the zero-sequence grid current is
identically zero and the neutral-to-midpoint voltage floats.

Per-unit system (single consistent set used everywhere):

* voltage base: per-phase RMS, ``325 kV / sqrt(3)``
* current base: rated per-phase RMS current, ``S / (sqrt(3) * 325 kV)``
* impedance base: ``325 kV^2 / S`` (so the usual table values carry over)
* power products ``u * i`` are per-phase powers on the ``S/3`` base;
  balanced rated operation gives 1 pu voltage, 1 pu current and a
  per-phase power numerically equal to the total-power set-point.
* the +-320 kV DC bus is ``640e3 / V_base ~ 3.411`` pu.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernel as K
from .phasors import Impedance, SequenceSet, synthesize_sequences

#: Rated system values (MVA, kV, Hz) for the 1000 MVA HVDC converter study.
S_BASE_MVA = 1000.0
U_GRID_KV = 325.0            # line-to-line RMS
U_DC_KV = 640.0              # pole-to-pole
F_NOM_HZ = 50.0
N_ARM_DEFAULT = 433
C_SM_MF = 9.5

Z_GRID_DEFAULT = Impedance(0.005, 0.18)
Z_ARM_DEFAULT = Impedance(0.01, 0.15)


@dataclass
class PlantParams:
    """Electrical parameters; impedances in pu on the system base."""

    s_base_mva: float = S_BASE_MVA
    u_grid_kv: float = U_GRID_KV
    u_dc_kv: float = U_DC_KV
    f_nom: float = F_NOM_HZ
    z_grid: Impedance = Z_GRID_DEFAULT
    z_arm_u: tuple[Impedance, Impedance, Impedance] = (Z_ARM_DEFAULT,) * 3
    z_arm_l: tuple[Impedance, Impedance, Impedance] = (Z_ARM_DEFAULT,) * 3
    z_arm_nominal: Impedance = Z_ARM_DEFAULT
    n_arm: int = N_ARM_DEFAULT
    c_sm_mf: float = C_SM_MF
    #: Average aggregated capacitor voltage per arm relative to the DC bus;
    #: the margin keeps the inserted-voltage command below the available
    #: capacitor voltage through the line-frequency energy ripple.
    arm_voltage_margin: float = 1.1

    def __post_init__(self):
        for name in ("s_base_mva", "u_grid_kv", "u_dc_kv", "f_nom", "c_sm_mf"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.n_arm <= 0:
            raise ValueError("n_arm must be positive")

    # -- bases --------------------------------------------------------------
    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.f_nom

    @property
    def v_base(self) -> float:
        """Per-phase RMS voltage base (V)."""
        return self.u_grid_kv * 1e3 / math.sqrt(3.0)

    @property
    def i_base(self) -> float:
        """Rated per-phase RMS current (A)."""
        return self.s_base_mva * 1e6 / (math.sqrt(3.0) * self.u_grid_kv * 1e3)

    @property
    def z_base(self) -> float:
        return (self.u_grid_kv * 1e3) ** 2 / (self.s_base_mva * 1e6)

    @property
    def e_base(self) -> float:
        """Energy base (J) of one per-phase-power pu-second."""
        return self.s_base_mva * 1e6 / 3.0

    @property
    def u_dc_pu(self) -> float:
        """DC bus voltage on the per-phase AC voltage base."""
        return self.u_dc_kv * 1e3 / self.v_base

    # -- derived arm quantities ----------------------------------------------
    @property
    def c_arm_farad(self) -> float:
        """Equivalent aggregated arm capacitance C_sm / N (F)."""
        return self.c_sm_mf * 1e-3 / self.n_arm

    @property
    def c_arm_pu(self) -> float:
        """Arm capacitance in pu: E_pu = 0.5 * c_arm_pu * u_pu^2."""
        return self.c_arm_farad * self.v_base**2 / self.e_base

    @property
    def e_arm_nominal(self) -> float:
        """Nominal stored arm energy (pu s) at the margined capacitor voltage."""
        return 0.5 * self.c_arm_pu * (self.arm_voltage_margin * self.u_dc_pu)**2

    @property
    def z_eq(self) -> Impedance:
        """Series impedance seen by the grid current: Z_s + Z_arm/2."""
        zn = self.z_arm_nominal
        return Impedance(self.z_grid.r + zn.r / 2.0, self.z_grid.x + zn.x / 2.0)

    def with_arm_scales(self, scales_u, scales_l) -> "PlantParams":
        """Copy with per-arm impedance multipliers applied."""
        zu = tuple(self.z_arm_nominal.scaled(s) for s in scales_u)
        zl = tuple(self.z_arm_nominal.scaled(s) for s in scales_l)
        return PlantParams(self.s_base_mva, self.u_grid_kv, self.u_dc_kv,
                           self.f_nom, self.z_grid, zu, zl,
                           self.z_arm_nominal, self.n_arm, self.c_sm_mf,
                           self.arm_voltage_margin)

    # -- kernel packing -------------------------------------------------------
    def kernel_array(self) -> np.ndarray:
        """Pack plant parameters for the compiled kernel (inductances as L = X/w)."""
        pp = np.zeros(K.PP_LEN)
        pp[K.PP_R_S] = self.z_grid.r
        pp[K.PP_L_S] = self.z_grid.x / self.omega
        pp[K.PP_U_DC] = self.u_dc_pu
        pp[K.PP_C_ARM] = self.c_arm_pu
        pp[K.PP_OMEGA] = self.omega
        for k in range(3):
            pp[K.PP_R_U + k] = self.z_arm_u[k].r
            pp[K.PP_L_U + k] = self.z_arm_u[k].x / self.omega
            pp[K.PP_R_L + k] = self.z_arm_l[k].r
            pp[K.PP_L_L + k] = self.z_arm_l[k].x / self.omega
            pp[K.PP_RBAR + k] = 0.5 * (pp[K.PP_R_U + k] + pp[K.PP_R_L + k])
            pp[K.PP_DR + k] = 0.5 * (pp[K.PP_R_U + k] - pp[K.PP_R_L + k])
        return pp

    def circuit_matrix(self) -> np.ndarray:
        """6x6 linear system for [di_sa, di_sb, di_sum_abc, u_n0].

        Rows: grid KVL a, b, c then additive KVL a, b, c, with the phase-c
        grid current eliminated through the three-wire constraint.
        """
        pp = self.kernel_array()
        l_s = pp[K.PP_L_S]
        lbar = [0.5 * (pp[K.PP_L_U + k] + pp[K.PP_L_L + k]) for k in range(3)]
        dl = [0.5 * (pp[K.PP_L_U + k] - pp[K.PP_L_L + k]) for k in range(3)]
        a = np.zeros((6, 6))
        # grid rows: (L_s + Lbar/2) di_s + dL dc + u_n0 = g
        a[0, 0] = l_s + 0.5 * lbar[0]
        a[0, 2] = dl[0]
        a[0, 5] = 1.0
        a[1, 1] = l_s + 0.5 * lbar[1]
        a[1, 3] = dl[1]
        a[1, 5] = 1.0
        a[2, 0] = -(l_s + 0.5 * lbar[2])
        a[2, 1] = -(l_s + 0.5 * lbar[2])
        a[2, 4] = dl[2]
        a[2, 5] = 1.0
        # additive rows: dL di_s + 2 Lbar dc = h
        a[3, 0] = dl[0]
        a[3, 2] = 2.0 * lbar[0]
        a[4, 1] = dl[1]
        a[4, 3] = 2.0 * lbar[1]
        a[5, 0] = -dl[2]
        a[5, 1] = -dl[2]
        a[5, 4] = 2.0 * lbar[2]
        return a

    def circuit_matrix_inverse(self) -> np.ndarray:
        return np.linalg.inv(self.circuit_matrix())


@dataclass
class MmcState:
    """Plant state: independent grid currents, additive currents, arm energies.

    ``i_s_c`` is dependent (three-wire): ``i_s_c = -i_s_a - i_s_b``.
    """

    i_s_a: float = 0.0
    i_s_b: float = 0.0
    i_sum: np.ndarray = field(default_factory=lambda: np.zeros(3))
    e_u: np.ndarray = field(default_factory=lambda: np.zeros(3))
    e_l: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    @property
    def i_s(self) -> np.ndarray:
        return np.array([self.i_s_a, self.i_s_b, -self.i_s_a - self.i_s_b])

    def arm_currents(self) -> tuple[np.ndarray, np.ndarray]:
        i_s = self.i_s
        return 0.5 * i_s + self.i_sum, -0.5 * i_s + self.i_sum

    def as_vector(self) -> np.ndarray:
        y = np.zeros(K.NSTATE)
        y[0], y[1] = self.i_s_a, self.i_s_b
        y[2:5] = self.i_sum
        y[5:8] = self.e_u
        y[8:11] = self.e_l
        return y

    @classmethod
    def from_vector(cls, y, t=0.0) -> "MmcState":
        return cls(y[0], y[1], np.array(y[2:5]), np.array(y[5:8]),
                   np.array(y[8:11]), t)


@dataclass
class ArmCommand:
    """Commanded inserted arm voltages (pu, instantaneous)."""

    u_u: np.ndarray
    u_l: np.ndarray


def clamp_halfbridge(cmd: ArmCommand, e_u, e_l, c_arm_pu: float):
    """Limit each arm command to [0, available capacitor voltage].

    Returns (clamped command, per-arm saturation flags).
    """
    u_u = np.array(cmd.u_u, dtype=float)
    u_l = np.array(cmd.u_l, dtype=float)
    flags = np.zeros(6, dtype=bool)
    for k in range(3):
        cap_u = math.sqrt(max(2.0 * e_u[k] / c_arm_pu, 0.0))
        cap_l = math.sqrt(max(2.0 * e_l[k] / c_arm_pu, 0.0))
        cu = min(max(u_u[k], 0.0), cap_u)
        cl = min(max(u_l[k], 0.0), cap_l)
        flags[k] = cu != u_u[k]
        flags[3 + k] = cl != u_l[k]
        u_u[k], u_l[k] = cu, cl
    return ArmCommand(u_u, u_l), flags


class Plant:
    """Thin stateful wrapper over the compiled plant model (for direct use
    and for tests; the simulation runner drives the kernel directly)."""

    def __init__(self, params: PlantParams | None = None):
        self.params = params or PlantParams()
        self._pp = self.params.kernel_array()
        self._a_inv = self.params.circuit_matrix_inverse()

    def derivatives(self, state: MmcState, cmd: ArmCommand,
                    grid: SequenceSet, t: float | None = None) -> np.ndarray:
        """State derivative for clamped commands and a grid source sequence set."""
        y = state.as_vector()
        dy = np.zeros(K.NSTATE)
        tt = state.t if t is None else t
        K.plant_rhs(y, tt, np.asarray(cmd.u_u, dtype=float),
                    np.asarray(cmd.u_l, dtype=float), self._pp, self._a_inv,
                    complex(grid.pos), complex(grid.neg), complex(grid.zero), dy)
        return dy

    def measure(self, state: MmcState, cmd: ArmCommand, grid: SequenceSet) -> dict:
        """Instantaneous measurement bundle."""
        i_u, i_l = state.arm_currents()
        u_u = np.asarray(cmd.u_u, dtype=float)
        u_l = np.asarray(cmd.u_l, dtype=float)
        e_grid = synthesize_sequences(grid, self.params.omega, state.t)
        return {
            "i_s": state.i_s,
            "i_sum": state.i_sum.copy(),
            "i_u": i_u,
            "i_l": i_l,
            "i_dc": float(np.sum(state.i_sum)),
            "u_diff": 0.5 * (-u_u + u_l),
            "u_sum": u_u + u_l,
            "e_u": state.e_u.copy(),
            "e_l": state.e_l.copy(),
            "e_total": float(np.sum(state.e_u) + np.sum(state.e_l)),
            "grid_emf": np.array(e_grid),
        }
