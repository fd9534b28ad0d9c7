"""Closed-loop controllers: grid current, additive current, energy loops.

The numerically hot implementations live in the compiled kernel; this module
provides the tuning (bandwidth-based PI design against the plant impedances),
the discrete notch design, small stateful wrapper classes, and the packing of
controller parameters/states for the simulation runner.

Loop structure:

* grid current: dual synchronous-frame complex PI with grid-voltage
  feedforward and reactance decoupling; the negative-sequence loop
  regulates its current to zero.  Frame measurements pass a 100 Hz notch
  (the opposite sequence appears at twice the line frequency).
* additive current: per-phase PI on the notched DC component plus dual
  synchronous-frame complex PI for the sequence components (50 + 100 Hz
  notches in frame).
* energy: six PI loops (total, two horizontal, three vertical) whose
  outputs pass 50 and 100 Hz notches to strip the line-frequency power
  ripple before the reference calculation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernel as K
from . import refcalc
from .plant import PlantParams


def notch_coefficients(f0: float, bandwidth: float, dt: float) -> np.ndarray:
    """Biquad notch (unity DC gain by construction): [b0, b1, b2, a1, a2]."""
    w0 = 2.0 * math.pi * f0 * dt
    q = f0 / bandwidth
    alpha = math.sin(w0) / (2.0 * q)
    a0 = 1.0 + alpha
    return np.array([1.0 / a0, -2.0 * math.cos(w0) / a0, 1.0 / a0,
                     -2.0 * math.cos(w0) / a0, (1.0 - alpha) / a0])


class Notch:
    """Discrete notch filter (works on real or complex samples)."""

    def __init__(self, f0: float, bandwidth: float, dt: float):
        self.coeff = notch_coefficients(f0, bandwidth, dt)
        self.z1 = 0.0j
        self.z2 = 0.0j

    def step(self, x):
        y, self.z1, self.z2 = K.notch_step(self.z1, self.z2, complex(x), self.coeff)
        return y if isinstance(x, complex) else y.real

    def preload(self, steady_value):
        """Set the internal state to the steady response of a constant input."""
        b0, b1, b2, a1, a2 = self.coeff
        x = complex(steady_value)
        self.z2 = (b2 - a2) * x
        self.z1 = (b1 - a1) * x + self.z2


class Pi:
    """PI with output limits and clamping anti-windup."""

    def __init__(self, kp: float, ki: float, dt: float,
                 limits: tuple[float, float] = (-math.inf, math.inf)):
        self.kp = kp
        self.ki = ki
        self.dt = dt
        self.lo, self.hi = limits
        self.integrator = 0.0

    def step(self, error: float, feedforward: float = 0.0) -> float:
        out, self.integrator = K.pi_step(self.integrator, error, self.kp,
                                         self.ki, self.dt, self.lo, self.hi,
                                         feedforward)
        return out


class ComplexPi:
    """Complex (synchronous-frame) PI with a magnitude limit."""

    def __init__(self, kp: float, ki: float, dt: float, limit: float = math.inf):
        self.kp = kp
        self.ki = ki
        self.dt = dt
        self.limit = limit
        self.integrator = 0.0j

    def step(self, error: complex, feedforward: complex = 0.0j) -> complex:
        out, self.integrator = K.cpi_step(self.integrator, complex(error),
                                          self.kp, self.ki, self.dt,
                                          self.limit, complex(feedforward))
        return out


@dataclass
class EnergyRefs:
    """Energy set-points: total stored energy, zero horizontal/vertical offsets."""

    e_total: float
    e_ab: float = 0.0
    e_ac: float = 0.0
    e_vert: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class ControlConfig:
    """Controller bandwidths (rad/s) and derived gains.

    The loop designs are first-order targets against the decided plant
    impedances; the bandwidth split keeps the current loops an order of
    magnitude above the energy loops, which in turn sit well below the
    notch centers.
    """

    grid_bw: float = 500.0
    additive_ac_bw: float = 150.0
    additive_dc_bw: float = 100.0
    energy_bw: float = 15.0
    notch_bandwidth_hz: float = 10.0
    u0dc_kp: float = refcalc.U0DC_KP
    u0dc_ki: float = refcalc.U0DC_KI
    u0dc_sat: float = refcalc.U0DC_SAT
    i_ref_max: float = refcalc.I_REF_MAX
    ref_cap: float = 10.0          # defensive clip of solved additive refs
    v_cmd_cap: float = 2.5         # controller voltage command magnitude cap
    energy_pi_cap: float = 2.0     # energy-loop power output cap (per-phase pu)

    def gains(self, plant: PlantParams) -> dict:
        w = plant.omega
        z_eq = plant.z_eq
        zn = plant.z_arm_nominal
        l_eq = z_eq.x / w
        l_arm2 = 2.0 * zn.x / w
        kp_e = 2.0 * (self.energy_bw / 2.0)        # critically damped pair
        ki_e = (self.energy_bw / 2.0) ** 2
        return {
            "kp_g": self.grid_bw * l_eq,
            "ki_g": self.grid_bw * z_eq.r,
            "x_eq": z_eq.x,
            "r_eq": z_eq.r,
            "kp_a": self.additive_ac_bw * l_arm2,
            "ki_a": self.additive_ac_bw * 2.0 * zn.r,
            "x_arm2": 2.0 * zn.x,
            "kp_adc": self.additive_dc_bw * l_arm2,
            "ki_adc": self.additive_dc_bw * 2.0 * zn.r,
            "r_arm2": 2.0 * zn.r,
            "kp_e": kp_e,
            "ki_e": ki_e,
        }

    def kernel_array(self, plant: PlantParams) -> np.ndarray:
        g = self.gains(plant)
        cp = np.zeros(K.CP_LEN)
        cp[K.CP_KP_G] = g["kp_g"]
        cp[K.CP_KI_G] = g["ki_g"]
        cp[K.CP_X_EQ] = g["x_eq"]
        cp[K.CP_R_EQ] = g["r_eq"]
        cp[K.CP_KP_A] = g["kp_a"]
        cp[K.CP_KI_A] = g["ki_a"]
        cp[K.CP_X_ARM2] = g["x_arm2"]
        cp[K.CP_KP_ADC] = g["kp_adc"]
        cp[K.CP_KI_ADC] = g["ki_adc"]
        cp[K.CP_R_ARM2] = g["r_arm2"]
        cp[K.CP_KP_E] = g["kp_e"]
        cp[K.CP_KI_E] = g["ki_e"]
        cp[K.CP_ET_REF] = 6.0 * plant.e_arm_nominal
        cp[K.CP_U0_KP] = self.u0dc_kp
        cp[K.CP_U0_KI] = self.u0dc_ki
        cp[K.CP_U0_SAT] = self.u0dc_sat
        cp[K.CP_EPS_V] = refcalc.EPS_VOLTAGE
        cp[K.CP_EPS_I] = refcalc.EPS_CURRENT
        cp[K.CP_I_MAX] = self.i_ref_max
        cp[K.CP_REF_CAP] = self.ref_cap
        cp[K.CP_V_CAP] = self.v_cmd_cap
        cp[K.CP_E_CAP] = self.energy_pi_cap
        return cp


def initial_controller_state(plant: PlantParams, config: ControlConfig,
                             grid_pos: complex, p_set: float, q_set: float,
                             dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Pre-settled controller state for balanced steady-state operation.

    Integrators and notch registers are loaded with their steady values so a
    run starts essentially settled; residuals are trimmed by the loops well
    before the earliest fault time.
    """
    g = config.gains(plant)
    iref, _, _ = K.grid_current_ref(p_set, q_set, complex(grid_pos),
                                    refcalc.EPS_VOLTAGE, config.i_ref_max, 0.0j)
    iref = complex(iref)
    cs = np.zeros(K.CS_LEN, dtype=complex)
    cs[K.CS_GI_P] = g["r_eq"] * iref           # holds the resistive drop
    cs[K.CS_HELD_IREF] = iref

    nc50 = notch_coefficients(50.0, config.notch_bandwidth_hz, dt)
    nc100 = notch_coefficients(100.0, config.notch_bandwidth_hz, dt)

    def preload(arr, idx, coeff, value):
        b0, b1, b2, a1, a2 = coeff
        z2 = (b2 - a2) * value
        z1 = (b1 - a1) * value + z2
        arr[idx] = z1
        arr[idx + 1] = z2

    preload(cs, K.CS_GN_P, nc100, iref)

    rs = np.zeros(K.RS_LEN)
    p_ff = 3.0 * ((grid_pos * iref.conjugate()).real + g["r_eq"] * abs(iref)**2)
    # one fixed-point pass for the arm conduction loss picked up by the
    # total-energy integrator
    i_dc0 = p_ff / 3.0 / plant.u_dc_pu
    loss_dc = 3.0 * g["r_arm2"] * i_dc0**2
    rs[K.RS_E_I] = loss_dc
    i_dc = (p_ff + loss_dc) / 3.0 / plant.u_dc_pu
    for k in range(3):
        preload(rs, K.RS_ADCN50 + 2 * k, nc50, i_dc)
        preload(rs, K.RS_ADCN100 + 2 * k, nc100, i_dc)
    preload(rs, K.RS_EN50, nc50, loss_dc)
    preload(rs, K.RS_EN100, nc100, loss_dc)
    return cs, rs
